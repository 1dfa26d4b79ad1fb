//! Scenes, frames, neighborhoods and the synthetic scenario generator.

pub mod generator;
pub mod io;
pub mod transform;
pub mod types;
pub mod vectorize;

pub use generator::{generate_dataset, generate_synthetic_scene, GeneratorConfig, Intent, Topology};
pub use io::{is_header_line, read_scenes, write_scenes, write_scenes_with_header};
pub use transform::{knn_between, knn_neighborhoods, relative_pose, transform_scene};
pub use types::{
    road_type, wrap_angle, AgentState, AgentTrack, FocalIntent, FutureState, IntentEndpoint, MapPoint, MapPolyline,
    Pose, Scene, SceneMeta,
};
pub use vectorize::{
    chunk_map, future_targets, select_map, to_polyline_frames, vectorize_focal, PolylineBatch, VectorizeConfig,
    VectorizedScene,
};
