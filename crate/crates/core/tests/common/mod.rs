//! Independent reference implementations shared by the integration tests
//! and the acceptance run.

#![allow(dead_code)]

use gpm_core::geometry::Point;
use rand::Rng;

fn sq(a: Point, b: Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Two-sided mean nearest-neighbour Euclidean distance by double loop.
pub fn chamfer_oracle(p: &[Point], g: &[Point]) -> f64 {
    let one_way = |a: &[Point], b: &[Point]| {
        let mut total = 0.0;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                best = best.min(sq(*x, *y).sqrt());
            }
            total += best;
        }
        total / a.len() as f64
    };
    one_way(p, g) + one_way(g, p)
}

/// Greedy farthest point sampling that recomputes every candidate's
/// distance to the whole selected set at every step.
pub fn fps_oracle(points: &[Point], m: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected.iter().map(|s| sq(*p, points[*s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        selected.push(best.expect("a candidate remains").0);
    }
    selected
}

/// The `k` nearest indices by a full stable sort on distance.
pub fn knn_oracle(points: &[Point], target: Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq(*p, target), i)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

/// Whether `mask` is exactly the `mask.len()` centers nearest to one of
/// its own members, ties going to the lower index.
pub fn is_nearest_region(centers: &[Point], mask: &[usize]) -> bool {
    let mut sorted = mask.to_vec();
    sorted.sort_unstable();
    mask.iter().any(|&s| {
        let mut region = knn_oracle(centers, centers[s], mask.len());
        region.sort_unstable();
        region == sorted
    })
}
