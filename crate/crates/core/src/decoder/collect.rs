//! Dynamic map collection: the map tokens nearest to a (predicted) trajectory.

use crate::scene::transform::distance_key;

/// What a query's map tokens are selected against.
#[derive(Clone, Copy, Debug)]
pub enum CollectionPath<'a> {
    /// The straight segment from the agent to its intention point, used
    /// before any trajectory has been predicted.
    Segment([f64; 2], [f64; 2]),
    /// Predicted waypoints; the distance to a center is the minimum over them.
    Waypoints(&'a [[f64; 2]]),
}

fn closest_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return a;
    }
    let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

fn path_key(path: CollectionPath<'_>, c: [f64; 2]) -> i64 {
    match path {
        CollectionPath::Segment(a, b) => distance_key(closest_on_segment(a, b, c), c),
        CollectionPath::Waypoints(w) => w.iter().map(|&p| distance_key(p, c)).min().unwrap_or(i64::MAX),
    }
}

/// Indices of the `count` valid centers nearest to `path`, ties to the lower
/// index, returned in ascending index order. Saturates at all valid centers.
pub fn collect_map_tokens(path: CollectionPath<'_>, centers: &[[f64; 2]], valid: &[bool], count: usize) -> Vec<usize> {
    let mut order: Vec<(i64, usize)> = centers
        .iter()
        .enumerate()
        .filter(|&(i, _)| valid.get(i).copied().unwrap_or(true))
        .map(|(i, &c)| (path_key(path, c), i))
        .collect();
    if count < order.len() {
        order.select_nth_unstable(count.max(1) - 1);
        order.truncate(count);
    }
    let mut idx: Vec<usize> = order.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_to_straight_path() {
        let w = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let centers = [[1.0, 0.0], [1.0, 5.0], [2.0, 0.0]];
        let got = collect_map_tokens(CollectionPath::Waypoints(&w), &centers, &[true; 3], 2);
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn saturates_at_map_size() {
        let centers = [[1.0, 0.0], [1.0, 5.0]];
        let got = collect_map_tokens(CollectionPath::Segment([0.0, 0.0], [1.0, 0.0]), &centers, &[true; 2], 10);
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn segment_distance_uses_interior() {
        // The center beside the middle of the segment beats one near an end.
        let centers = [[5.0, 1.0], [11.0, 0.0]];
        let got = collect_map_tokens(CollectionPath::Segment([0.0, 0.0], [10.0, 0.0]), &centers, &[true; 2], 1);
        assert_eq!(got, vec![0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let centers = [[0.0, 1.0], [0.0, -1.0], [1.0, 0.0]];
        let got = collect_map_tokens(CollectionPath::Waypoints(&[[0.0, 0.0]]), &centers, &[true; 3], 2);
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn invalid_tokens_skipped() {
        let centers = [[0.0, 0.0], [5.0, 0.0]];
        let got = collect_map_tokens(CollectionPath::Waypoints(&[[0.0, 0.0]]), &centers, &[false, true], 1);
        assert_eq!(got, vec![1]);
    }
}
