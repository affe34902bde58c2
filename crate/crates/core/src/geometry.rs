//! Point clouds, farthest point sampling, kNN patches and Chamfer distance.
//!
//! Everything here is computed in double precision. Ties between equal
//! distances always resolve to the lowest point index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};

pub type Point = [f64; 3];

/// Ordered, non-empty list of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: Point) -> Self {
        Self {
            points: self.points.iter().map(|p| add(*p, t)).collect(),
        }
    }
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    dist2(a, b).sqrt()
}

/// Greedy farthest point sampling. The first index is drawn uniformly from
/// a generator seeded with `seed`; each later pick maximizes the distance
/// to the already selected set. Indices are returned in selection order.
pub fn fps(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    fps_from(cloud, m, first)
}

/// Farthest point sampling with a fixed first pick.
pub fn fps_from(cloud: &PointCloud, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(invalid(format!("fps: cannot select {m} of {n} points")));
    }
    if first >= n {
        return Err(invalid(format!("fps: start index {first} out of range")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..m {
        selected.push(cur);
        // excluded from later picks even when the cloud has duplicate points
        min_d[cur] = f64::NEG_INFINITY;
        let c = pts[cur];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// Indices of the `k` points nearest to `target`, nearest first.
pub fn knn_of_point(points: &[Point], target: Point, k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(invalid(format!(
            "knn: k = {k} exceeds {} points",
            points.len()
        )));
    }
    let d: Vec<f64> = points.iter().map(|p| dist2(*p, target)).collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let by = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by);
    Ok(idx)
}

/// The `k` nearest points to `cloud[center_index]`, nearest first. The
/// center is at distance zero and so is always part of its own patch.
pub fn knn_patch(cloud: &PointCloud, center_index: usize, k: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let center = *pts
        .get(center_index)
        .ok_or_else(|| invalid(format!("knn: center {center_index} out of range")))?;
    knn_of_point(pts, center, k)
}

/// `m` FPS centers, each with its `k` nearest neighbours stored relative to
/// the center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub center_indices: Vec<usize>,
    /// `m` patches of `k` center-relative points.
    pub patches: Vec<Vec<Point>>,
    pub source_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// All patch points back in cloud coordinates, patch by patch.
    pub fn union_points(&self) -> Vec<Point> {
        self.patches
            .iter()
            .zip(&self.centers)
            .flat_map(|(p, c)| p.iter().map(move |q| add(*q, *c)))
            .collect()
    }
}

pub fn build_patches(cloud: &PointCloud, m: usize, k: usize, seed: u64) -> Result<PatchSet> {
    if k == 0 || k > cloud.len() {
        return Err(invalid(format!(
            "patch size {k} invalid for {} points",
            cloud.len()
        )));
    }
    let center_indices = fps(cloud, m, seed)?;
    let pts = cloud.points();
    let source_indices = center_indices
        .par_iter()
        .map(|c| knn_patch(cloud, *c, k))
        .collect::<Result<Vec<_>>>()?;
    let centers: Vec<Point> = center_indices.iter().map(|i| pts[*i]).collect();
    let patches = source_indices
        .iter()
        .zip(&centers)
        .map(|(idx, c)| idx.iter().map(|i| sub(pts[*i], *c)).collect())
        .collect();
    Ok(PatchSet {
        centers,
        center_indices,
        patches,
        source_indices,
    })
}

pub use gpm_nn::ChamferNorm;

fn norm_of(d: Point, norm: ChamferNorm) -> f64 {
    match norm {
        ChamferNorm::Euclidean => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
        ChamferNorm::L1 => d[0].abs() + d[1].abs() + d[2].abs(),
        ChamferNorm::Squared => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
    }
}

fn one_way(src: &[Point], dst: &[Point], norm: ChamferNorm) -> f64 {
    src.iter()
        .map(|p| {
            dst.iter()
                .map(|q| norm_of(sub(*p, *q), norm))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / src.len() as f64
}

/// Mean nearest-neighbour distance from `p` to `g` plus from `g` to `p`,
/// with non-squared Euclidean norms.
pub fn chamfer_l1(p: &PointCloud, g: &PointCloud) -> f64 {
    chamfer_with_norm(p, g, ChamferNorm::Euclidean)
}

pub fn chamfer_with_norm(p: &PointCloud, g: &PointCloud, norm: ChamferNorm) -> f64 {
    one_way(p.points(), g.points(), norm) + one_way(g.points(), p.points(), norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn empty_and_non_finite_clouds_rejected() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn fps_single_point() {
        assert_eq!(fps(&cloud(&[[1.0, 2.0, 3.0]]), 1, 7).unwrap(), vec![0]);
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let sq = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        assert_eq!(fps_from(&sq, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_rejects_too_many() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(fps(&c, 3, 0).is_err());
        assert!(fps(&c, 0, 0).is_err());
    }

    #[test]
    fn knn_self_first_and_tie_to_lowest_index() {
        let line = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        assert_eq!(knn_patch(&line, 1, 1).unwrap(), vec![1]);
        assert_eq!(knn_patch(&line, 1, 2).unwrap(), vec![1, 0]);
        assert!(knn_patch(&line, 1, 5).is_err());
    }

    #[test]
    fn chamfer_simple_values() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l1(&a, &b), 2.0);
        assert_eq!(chamfer_l1(&a, &a), 0.0);
        let c = cloud(&[[1.0, 1.0, 0.0]]);
        assert_eq!(chamfer_with_norm(&a, &c, ChamferNorm::L1), 4.0);
    }

    #[test]
    fn single_patch_covering_whole_cloud() {
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, -0.25, 1.0]];
        let c = cloud(&pts);
        let ps = build_patches(&c, 1, 3, 0).unwrap();
        let center = ps.centers[0];
        let mut got: Vec<Point> = ps.patches[0].iter().map(|p| add(*p, center)).collect();
        let mut want = pts.to_vec();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }
}
