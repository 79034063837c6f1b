//! Point-set kernels: farthest point sampling, exact k-nearest neighbors,
//! patch division, voxel-grid subsampling and inverse-distance
//! interpolation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{strict_mode, Indices};

pub type Point = [f64; 3];

/// Coordinates, per-point features and optional per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub(crate) coords: Vec<Point>,
    pub(crate) feats: Vec<f64>,
    pub(crate) channels: usize,
    pub(crate) labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<Point>,
        feats: Vec<f64>,
        channels: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Validation("point cloud must contain at least one point".into()));
        }
        if feats.len() != coords.len() * channels {
            return Err(Error::Validation(format!(
                "{} feature values for {} points with {} channels",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} points",
                    l.len(),
                    coords.len()
                )));
            }
        }
        Ok(PointCloud {
            coords,
            feats,
            channels,
            labels,
        })
    }

    /// Cloud whose features are a copy of its coordinates.
    pub fn from_coords(coords: Vec<Point>, labels: Option<Vec<usize>>) -> Result<Self> {
        let feats = coords.iter().flatten().copied().collect();
        PointCloud::new(coords, feats, 3, labels)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn feat_row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    /// Checks every label is below `classes`.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::Validation(format!(
                    "label {bad} outside [0, {classes})"
                )));
            }
        }
        Ok(())
    }

    /// Rows picked by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            feats: idx.iter().flat_map(|&i| self.feat_row(i).iter().copied()).collect(),
            channels: self.channels,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn translated(&self, t: Point) -> PointCloud {
        let mut out = self.clone();
        for p in &mut out.coords {
            for (c, d) in p.iter_mut().zip(t) {
                *c += d;
            }
        }
        out
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Index of the lexicographically smallest coordinate triple (lowest index
/// on exact duplicates).
pub fn lex_min_index(coords: &[Point]) -> Option<usize> {
    (0..coords.len()).min_by(|&i, &j| lex_cmp(&coords[i], &coords[j]).then(i.cmp(&j)))
}

/// Greedy max-min selection of `m` indices seeded at the lexicographically
/// smallest point. Ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Point], m: usize) -> Result<Vec<usize>> {
    let start = lex_min_index(coords).ok_or_else(|| Error::contract("FPS on an empty point set"))?;
    farthest_point_sample_from(coords, m, start)
}

/// [`farthest_point_sample`] with an explicit first pick, e.g. a seeded
/// random start.
pub fn farthest_point_sample_from(coords: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::contract(format!(
            "farthest_point_sample needs 1 <= m <= N, got m={m}, N={n}"
        )));
    }
    if start >= n {
        return Err(Error::Index {
            index: start,
            extent: n,
        });
    }
    let mut picked = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    loop {
        picked.push(cur);
        chosen[cur] = true;
        if picked.len() == m {
            break;
        }
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&coords[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

fn knn_row(q: &Point, points: &[Point], k: usize, scratch: &mut Vec<(f64, usize)>, out: &mut [usize]) {
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (dist2(q, p), i)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    for (o, &(_, i)) in out.iter_mut().zip(scratch.iter()) {
        *o = i;
    }
}

/// Exact k nearest `points` for every query, each row ascending by
/// (distance, index). Shape `[queries, k]`.
pub fn knn_indices(queries: &[Point], points: &[Point], k: usize) -> Result<Indices> {
    if k == 0 || k > points.len() {
        return Err(Error::contract(format!(
            "knn needs 1 <= k <= N, got k={k}, N={}",
            points.len()
        )));
    }
    let mut out = vec![0usize; queries.len() * k];
    if !strict_mode() && queries.len() * points.len() >= 1 << 16 {
        out.par_chunks_mut(k)
            .zip(queries.par_iter())
            .for_each_init(Vec::new, |scratch, (row, q)| knn_row(q, points, k, scratch, row));
    } else {
        let mut scratch = Vec::with_capacity(points.len());
        for (row, q) in out.chunks_mut(k).zip(queries) {
            knn_row(q, points, k, &mut scratch, row);
        }
    }
    Indices::new(&[queries.len(), k], out)
}

/// FPS patch centers and their K-nearest-neighbor groups.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchIndex {
    pub center_idx: Vec<usize>,
    pub neighbor_idx: Indices,
    pub scale: usize,
}

impl PatchIndex {
    pub fn num_patches(&self) -> usize {
        self.center_idx.len()
    }

    pub fn k(&self) -> usize {
        self.neighbor_idx.shape()[1]
    }
}

pub fn patch_count(n: usize, scale: usize) -> usize {
    n.div_ceil(scale)
}

pub fn patch_divide(cloud: &PointCloud, scale: usize, k: usize) -> Result<PatchIndex> {
    patch_divide_coords(&cloud.coords, scale, k)
}

/// `M = ceil(N / scale)` FPS centers, each grouped with its `k` nearest
/// points.
pub fn patch_divide_coords(coords: &[Point], scale: usize, k: usize) -> Result<PatchIndex> {
    if scale == 0 {
        return Err(Error::contract("patch scale must be positive"));
    }
    let m = patch_count(coords.len(), scale);
    let center_idx = farthest_point_sample(coords, m)?;
    let centers: Vec<Point> = center_idx.iter().map(|&i| coords[i]).collect();
    let neighbor_idx = knn_indices(&centers, coords, k)?;
    let mut data = neighbor_idx.data().to_vec();
    // exact duplicates of a center can outrank it on the index tie-break
    for (row, &c) in data.chunks_mut(k).zip(&center_idx) {
        if !row.contains(&c) {
            row[k - 1] = c;
        }
    }
    Ok(PatchIndex {
        center_idx,
        neighbor_idx: Indices::new(&[m, k], data)?,
        scale,
    })
}

/// Voxel-grid subsampling: one point per occupied voxel holding the member
/// centroid, the mean feature and the majority label (ties to the lowest
/// class id). Output is ordered by voxel key `(z, y, x)` ascending.
pub fn grid_subsample(cloud: &PointCloud, grid: f64) -> Result<PointCloud> {
    if !(grid > 0.0) {
        return Err(Error::contract("grid size must be positive"));
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        let key = |v: f64| (v / grid).floor() as i64;
        voxels
            .entry((key(p[2]), key(p[1]), key(p[0])))
            .or_default()
            .push(i);
    }
    let c = cloud.channels;
    let mut coords = Vec::with_capacity(voxels.len());
    let mut feats = Vec::with_capacity(voxels.len() * c);
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(voxels.len()));
    for members in voxels.values() {
        let inv = 1.0 / members.len() as f64;
        let mut centroid = [0.0; 3];
        let mut f = vec![0.0; c];
        for &i in members {
            for a in 0..3 {
                centroid[a] += cloud.coords[i][a];
            }
            for (acc, v) in f.iter_mut().zip(cloud.feat_row(i)) {
                *acc += v;
            }
        }
        coords.push(centroid.map(|v| v * inv));
        feats.extend(f.into_iter().map(|v| v * inv));
        if let (Some(out), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in members {
                *votes.entry(src[i]).or_default() += 1;
            }
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .expect("voxel has members");
            out.push(best);
        }
    }
    PointCloud::new(coords, feats, c, labels)
}

/// `Δp[a, k] = keys[a, k] − queries[a]`, flattened `[A, K, 3]`.
pub fn relative_offsets(queries: &[Point], keys: &[Point], k: usize) -> Result<Vec<f64>> {
    if keys.len() != queries.len() * k {
        return Err(Error::Shape {
            op: "relative_offsets",
            lhs: vec![queries.len(), 3],
            rhs: vec![keys.len(), 3],
        });
    }
    let mut out = Vec::with_capacity(keys.len() * 3);
    for (q, ks) in queries.iter().zip(keys.chunks(k.max(1))) {
        for p in ks {
            out.extend([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        }
    }
    Ok(out)
}

/// Offsets of indexed keys relative to queries: `points[idx[a, j]] − queries[a]`.
pub fn indexed_offsets(queries: &[Point], points: &[Point], idx: &Indices) -> Vec<f64> {
    let k = idx.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * 3);
    for (q, row) in queries.iter().zip(idx.data().chunks(k)) {
        for &j in row {
            let p = points[j];
            out.extend([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        }
    }
    out
}

/// Inverse-distance weights from up to three nearest sources per
/// destination.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub idx: Indices,
    pub weights: Vec<f64>,
}

const COINCIDENT: f64 = 1e-8;

pub fn interpolation_weights(src: &[Point], dst: &[Point]) -> Result<Interpolation> {
    if src.is_empty() {
        return Err(Error::contract("interpolation needs at least one source point"));
    }
    let k = src.len().min(3);
    let idx = knn_indices(dst, src, k)?;
    let mut weights = Vec::with_capacity(idx.len());
    for (q, row) in dst.iter().zip(idx.data().chunks(k)) {
        let d: Vec<f64> = row.iter().map(|&j| dist2(q, &src[j]).sqrt()).collect();
        if d[0] < COINCIDENT {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let w: Vec<f64> = d.iter().map(|&v| 1.0 / (v + COINCIDENT)).collect();
        let s: f64 = w.iter().sum();
        weights.extend(w.into_iter().map(|v| v / s));
    }
    Ok(Interpolation { idx, weights })
}

/// Inverse-distance upsampling of `src_feats` (`M × channels`) onto
/// `dst_coords`.
pub fn interpolate_upsample(
    src_coords: &[Point],
    src_feats: &[f64],
    channels: usize,
    dst_coords: &[Point],
) -> Result<Vec<f64>> {
    if src_feats.len() != src_coords.len() * channels {
        return Err(Error::Shape {
            op: "interpolate_upsample",
            lhs: vec![src_coords.len(), channels],
            rhs: vec![src_feats.len()],
        });
    }
    let interp = interpolation_weights(src_coords, dst_coords)?;
    let k = interp.idx.shape()[1];
    let mut out = vec![0.0; dst_coords.len() * channels];
    for (n, (row, w)) in interp
        .idx
        .data()
        .chunks(k)
        .zip(interp.weights.chunks(k))
        .enumerate()
    {
        let o = &mut out[n * channels..(n + 1) * channels];
        for (&j, &wj) in row.iter().zip(w) {
            for (y, &x) in o.iter_mut().zip(&src_feats[j * channels..(j + 1) * channels]) {
                *y += wj * x;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_examples() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pts, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let shuffled = vec![[2.0, 1.0, 0.0], [-1.0, 5.0, 5.0], [-1.0, 2.0, 9.0]];
        assert_eq!(farthest_point_sample(&shuffled, 1).unwrap(), vec![2]);
        assert!(farthest_point_sample(&pts, 5).is_err());
        assert!(farthest_point_sample(&pts, 0).is_err());
    }

    #[test]
    fn knn_examples() {
        let pts = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [3.0, 0.0, 0.0]];
        let idx = knn_indices(&[[0.0; 3]], &pts, 2).unwrap();
        assert_eq!(idx.data(), &[0, 1]);
        let idx = knn_indices(&[[0.0; 3]], &pts, 3).unwrap();
        assert_eq!(idx.data(), &[0, 1, 2]);
        let tie = line(&[-1.0, 1.0]);
        assert_eq!(knn_indices(&[[0.0; 3]], &tie, 1).unwrap().data(), &[0]);
        assert!(knn_indices(&[[0.0; 3]], &pts, 4).is_err());
    }

    #[test]
    fn patch_divide_examples() {
        let pts: Vec<Point> = (0..8).map(|i| [i as f64, (i * i) as f64 * 0.1, 0.0]).collect();
        let cloud = PointCloud::from_coords(pts.clone(), None).unwrap();
        let p = patch_divide(&cloud, 8, 4).unwrap();
        assert_eq!(p.num_patches(), 1);
        let p = patch_divide(&cloud, 1, 1).unwrap();
        assert_eq!(p.num_patches(), 8);
        assert_eq!(p.neighbor_idx.data(), p.center_idx.as_slice());
        let p = patch_divide(&cloud, 3, 2).unwrap();
        assert_eq!(p.num_patches(), 3);
    }

    #[test]
    fn patch_keeps_center_among_duplicates() {
        let pts = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]];
        let p = patch_divide_coords(&pts, 1, 1).unwrap();
        for (row, c) in p.neighbor_idx.data().iter().zip(&p.center_idx) {
            assert_eq!(row, c);
        }
    }

    #[test]
    fn grid_examples() {
        let cloud = PointCloud::from_coords(
            vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0.0, 0.0]],
            Some(vec![2, 1, 0]),
        )
        .unwrap();
        let out = grid_subsample(&cloud, 1.0).unwrap();
        assert_eq!(out.len(), 2);
        for (a, b) in out.coords()[0].iter().zip([0.15, 0.15, 0.15]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.coords()[1], [1.5, 0.0, 0.0]);
        // tie between labels 1 and 2 resolves to the lower id
        assert_eq!(out.labels().unwrap(), &[1, 0]);
        let one = grid_subsample(&cloud, 100.0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(grid_subsample(&cloud, 0.0).is_err());
    }

    #[test]
    fn grid_finer_than_spacing_keeps_points() {
        let pts = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.5]];
        let cloud = PointCloud::from_coords(pts.clone(), None).unwrap();
        let out = grid_subsample(&cloud, 0.1).unwrap();
        let mut a: Vec<_> = out.coords().to_vec();
        let mut b = pts;
        a.sort_by(lex_cmp);
        b.sort_by(lex_cmp);
        assert_eq!(a, b);
        // z-major ordering puts the z=0.5 point last
        assert_eq!(out.coords()[2], [0.0, 0.0, 0.5]);
    }

    #[test]
    fn offset_examples() {
        let q = vec![[1.0, 0.0, 0.0]];
        let k = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(relative_offsets(&q, &k, 2).unwrap(), vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(relative_offsets(&q, &k, 3).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let src = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0e4, 0.0, 0.0]];
        let feats = vec![0.0, 2.0, 0.0];
        let out = interpolate_upsample(&src, &feats, 1, &[[0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-3, "{}", out[0]);
        assert_eq!(out[1], 2.0);
        let single = interpolate_upsample(&[[3.0, 3.0, 3.0]], &[7.0, -1.0], 2, &line(&[0.0, 5.0])).unwrap();
        assert_eq!(single, vec![7.0, -1.0, 7.0, -1.0]);
    }
}
