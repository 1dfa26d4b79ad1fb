use super::*;
use crate::decoder::IntentionPoints;
use crate::model::{collect_endpoints, HeadKind, ModelConfig, ModelMode};
use crate::numerics::{gradient_check, GradCheckConfig};
use crate::scene::{generate_dataset, GeneratorConfig};

fn tiny(mode: ModelMode) -> (ModelConfig, Vec<Scene>) {
    let gen = GeneratorConfig {
        num_agents: 4,
        num_focal: 2,
        history_frames: 4,
        future_frames: 5,
        partial_history_probability: 0.0,
        ..GeneratorConfig::default()
    };
    let scenes = generate_dataset(&gen, 5, 8).unwrap();
    let mut cfg = ModelConfig {
        mode,
        future_frames: 5,
        ..ModelConfig::default()
    };
    cfg.encoder.hidden_dim = 8;
    cfg.encoder.polyline_layers = vec![8];
    cfg.decoder.num_modes = 3;
    cfg.decoder.num_layers = 2;
    cfg.decoder.map_collect = 4;
    cfg.vectorize.max_map_polylines = 8;
    cfg.vectorize.points_per_polyline = 4;
    (cfg, scenes)
}

fn build(cfg: &ModelConfig, scenes: &[Scene], seed: u64) -> (ParameterStore, MotionModel) {
    let ip = IntentionPoints::generate(&collect_endpoints(scenes).unwrap(), cfg.decoder.num_modes, 0).unwrap();
    let mut store = ParameterStore::new(seed);
    let m = MotionModel::new(&mut store, cfg, ip).unwrap();
    (store, m)
}

#[test]
fn breakdown_sums_to_total() {
    for mode in [ModelMode::Mtr, ModelMode::MtrPlusPlus] {
        let (cfg, scenes) = tiny(mode);
        let (store, m) = build(&cfg, &scenes, 1);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &store, &scenes[0]).unwrap();
        let l = scene_loss(&mut g, &scenes[0], &out).unwrap().breakdown;
        assert!((l.gmm + l.classification + l.dense - l.total).abs() < 1e-12);
        let n = l.per_layer.len() as f64;
        let gmm: f64 = l.per_layer.iter().map(|p| p.nll).sum::<f64>() / n;
        assert!((gmm - l.gmm).abs() < 1e-12);
    }
}

#[test]
fn one_layer_total_is_layer_loss_plus_dense() {
    let (mut cfg, scenes) = tiny(ModelMode::MtrPlusPlus);
    cfg.decoder.num_layers = 1;
    let (store, m) = build(&cfg, &scenes, 2);
    let mut g = Graph::new();
    let out = m.forward(&mut g, &store, &scenes[1]).unwrap();
    let l = scene_loss(&mut g, &scenes[1], &out).unwrap().breakdown;
    let want = l.per_layer[0].nll + l.per_layer[0].classification + l.dense;
    assert!((l.total - want).abs() < 1e-12);
}

#[test]
fn uniform_modes_cost_log_k() {
    let (cfg, scenes) = tiny(ModelMode::MtrPlusPlus);
    let (mut store, m) = build(&cfg, &scenes, 3);
    for l in 0..2 {
        store
            .set(&format!("decoder.layer{l}.cls.1.weight"), crate::numerics::Tensor::zeros(&[8, 1]))
            .unwrap();
    }
    let mut g = Graph::new();
    let out = m.forward(&mut g, &store, &scenes[2]).unwrap();
    let l = scene_loss(&mut g, &scenes[2], &out).unwrap().breakdown;
    assert!((l.classification - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn nll_ignores_non_positive_modes() {
    let (cfg, scenes) = tiny(ModelMode::MtrPlusPlus);
    let (store, m) = build(&cfg, &scenes, 4);
    let scene = &scenes[3];
    let mut g = Graph::new();
    let out = m.forward(&mut g, &store, scene).unwrap();
    let a = scene_loss(&mut g, scene, &out).unwrap().breakdown;

    // Recompute with every non-positive trajectory row replaced by garbage.
    let grp = &out.groups[0];
    let (tgt, mask) = crate::scene::future_targets(scene, &grp.focal_ids, &grp.focal_frames).unwrap();
    let h = grp.output.horizon;
    let mut keep = Vec::new();
    for t in 0..grp.focal_ids.len() {
        if mask[t * h + h - 1] {
            let end = [tgt.data()[(t * h + h - 1) * 4], tgt.data()[(t * h + h - 1) * 4 + 1]];
            keep.push(t * 3 + select_positive_mode(end, &grp.focal_points[t]));
        }
    }
    let mut out2 = out.clone();
    for layer in out2.groups[0].output.layers.iter_mut() {
        let mut v = g.value(layer.trajectories).clone();
        for r in 0..v.rows() {
            if !keep.contains(&r) {
                v.row_mut(r).iter_mut().for_each(|x| *x = 123.0);
            }
        }
        layer.trajectories = g.constant(v);
    }
    let b = scene_loss(&mut g, scene, &out2).unwrap().breakdown;
    assert!((a.gmm - b.gmm).abs() < 1e-12);
}

/// Zero-initialized biases put dead ReLU units exactly on their kink; moving
/// them off it makes the loss differentiable at the probe point.
fn jitter_biases(store: &mut ParameterStore, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
}

#[test]
fn gradients_of_total_loss_match_finite_differences() {
    for mode in [ModelMode::Mtr, ModelMode::MtrPlusPlus] {
        let (cfg, scenes) = tiny(mode);
        let (mut store, m) = build(&cfg, &scenes, 5);
        jitter_biases(&mut store, 5);
        let report = gradient_check(
            &store,
            |g, s| {
                let out = m.forward(g, s, &scenes[0])?;
                Ok(scene_loss(g, &scenes[0], &out)?.total)
            },
            GradCheckConfig {
                samples_per_tensor: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{mode:?}: {:?}", report.worst);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (cfg, scenes) = tiny(ModelMode::MtrPlusPlus);
    let (mut store, m) = build(&cfg, &scenes, 6);
    let before = store.checksum();
    let tc = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.01,
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&m, &mut store, &scenes, &tc, 0, |_| {}).unwrap();
    assert_eq!(store.checksum(), before);
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let (cfg, scenes) = tiny(ModelMode::Mtr);
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let (mut store, m) = build(&cfg, &scenes, 7);
        let logs = train(&m, &mut store, &scenes, &tc, 11, |_| {}).unwrap();
        (store.checksum(), logs.last().unwrap().loss.total)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss() {
    let (mut cfg, scenes) = tiny(ModelMode::MtrPlusPlus);
    cfg.head = HeadKind::IntentionQuery;
    let (mut store, m) = build(&cfg, &scenes, 8);
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        epochs: 8,
        ..TrainConfig::default()
    };
    let logs = train(&m, &mut store, &scenes, &tc, 0, |_| {}).unwrap();
    assert!(logs.last().unwrap().loss.total < logs[0].loss.total);
}

#[test]
fn csv_log_has_header_and_rows() {
    let logs = vec![EpochLog {
        epoch: 1,
        lr: 0.1,
        loss: LossBreakdown {
            total: 3.0,
            gmm: 1.0,
            classification: 1.5,
            dense: 0.5,
            per_layer: vec![],
        },
        seconds: 0.0,
    }];
    let mut buf = Vec::new();
    write_training_log(&mut buf, &["config_hash=abc seed=1".into()], &logs).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s, "# config_hash=abc seed=1\nepoch,l_sum,l_gmm,classification,l_dmp,lr\n1,3,1,1.5,0.5,0.1\n");
}
