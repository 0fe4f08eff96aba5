//! Per-fragment local volume: back-projection, cross-view similarity,
//! visibility weighting, fused features, local heads and local losses.

use std::io::Read as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_into, project_unchecked, CameraIntrinsics, CameraPose, FeatureMap, Ray};
use crate::grid::SparseVoxelGrid;
use crate::synthscene::{gt_tsdf, GroundTruthScene};

/// `D x N x C` back-projected features plus the `D x N` in-view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub voxels: usize,
    pub views: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FeatureVolume {
    pub fn feature(&self, d: usize, n: usize) -> &[f32] {
        let start = (d * self.views + n) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn is_valid(&self, d: usize, n: usize) -> bool {
        self.valid[d * self.views + n]
    }
}

/// Flattened off-diagonal cosine similarities, `N(N-1)` per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume {
    pub voxels: usize,
    pub views: usize,
    pub flat: Vec<f32>,
    pub pair_valid: Vec<bool>,
}

/// Position of the ordered pair `(m, n)`, `m != n`, inside a voxel's row.
#[inline]
pub fn pair_index(views: usize, m: usize, n: usize) -> usize {
    debug_assert_ne!(m, n);
    m * (views - 1) + if n < m { n } else { n - 1 }
}

impl SimilarityVolume {
    pub fn row_len(&self) -> usize {
        self.views * (self.views - 1)
    }

    pub fn get(&self, d: usize, m: usize, n: usize) -> (f32, bool) {
        let i = d * self.row_len() + pair_index(self.views, m, n);
        (self.flat[i], self.pair_valid[i])
    }
}

/// `D x N` fusion weights; each row is all-zero or sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityWeights {
    pub voxels: usize,
    pub views: usize,
    pub w: Vec<f32>,
}

impl VisibilityWeights {
    pub fn zeros(voxels: usize, views: usize) -> Self {
        VisibilityWeights {
            voxels,
            views,
            w: vec![0.0; voxels * views],
        }
    }

    pub fn row(&self, d: usize) -> &[f32] {
        &self.w[d * self.views..(d + 1) * self.views]
    }

    /// Row-normalised copy; rows summing to zero stay zero.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.w.par_chunks_mut(self.views.max(1)).for_each(normalize_row);
        out
    }
}

fn normalize_row(row: &mut [f32]) {
    let sum: f64 = row.iter().map(|&x| x as f64).sum();
    if sum > 0.0 {
        for x in row.iter_mut() {
            *x = (*x as f64 / sum) as f32;
        }
    } else {
        row.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedVolume {
    pub voxels: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FusedVolume {
    pub fn feature(&self, d: usize) -> &[f32] {
        &self.data[d * self.channels..(d + 1) * self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalPrediction {
    pub occupancy: Vec<f32>,
    pub tsdf: Vec<f32>,
}

/// Samples each view's feature map at the projection of every voxel centre.
pub fn backproject_features(
    grid: &SparseVoxelGrid,
    maps: &[FeatureMap],
    cameras: &[(CameraIntrinsics, CameraPose)],
) -> Result<FeatureVolume> {
    if maps.len() != cameras.len() || maps.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} feature maps for {} cameras",
            maps.len(),
            cameras.len()
        )));
    }
    let channels = maps[0].channels;
    if maps.iter().any(|m| m.channels != channels) {
        return Err(Error::InvalidInput("feature maps disagree on channel count".into()));
    }
    for (m, (k, _)) in maps.iter().zip(cameras) {
        if m.width != k.width || m.height != k.height {
            return Err(Error::InvalidInput(format!(
                "{}x{} feature map does not match {}x{} intrinsics",
                m.width, m.height, k.width, k.height
            )));
        }
    }
    let views = maps.len();
    let d = grid.len();
    let mut data = vec![0.0f32; d * views * channels];
    let mut valid = vec![false; d * views];
    data.par_chunks_mut(views * channels)
        .zip(valid.par_chunks_mut(views))
        .enumerate()
        .for_each(|(i, (feat, mask))| {
            let center = grid.center(i);
            for (n, ((k, pose), map)) in cameras.iter().zip(maps).enumerate() {
                if let Some((pixel, _)) = project_unchecked(k, pose, &center).visible() {
                    let out = &mut feat[n * channels..(n + 1) * channels];
                    if bilinear_sample_into(map, pixel, out).is_ok() {
                        mask[n] = true;
                    } else {
                        out.fill(0.0);
                    }
                }
            }
        });
    Ok(FeatureVolume {
        voxels: d,
        views,
        channels,
        data,
        valid,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f32> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

pub fn pairwise_similarity(fv: &FeatureVolume) -> SimilarityVolume {
    let n = fv.views;
    let row = n * (n - 1);
    let mut flat = vec![0.0f32; fv.voxels * row];
    let mut pair_valid = vec![false; fv.voxels * row];
    if row > 0 {
        flat.par_chunks_mut(row)
            .zip(pair_valid.par_chunks_mut(row))
            .enumerate()
            .for_each(|(d, (sim, ok))| {
                for a in 0..n {
                    for b in (a + 1)..n {
                        if !(fv.is_valid(d, a) && fv.is_valid(d, b)) {
                            continue;
                        }
                        if let Some(c) = cosine(fv.feature(d, a), fv.feature(d, b)) {
                            for (i, j) in [(a, b), (b, a)] {
                                let k = pair_index(n, i, j);
                                sim[k] = c;
                                ok[k] = true;
                            }
                        }
                    }
                }
            });
    }
    SimilarityVolume {
        voxels: fv.voxels,
        views: n,
        flat,
        pair_valid,
    }
}

/// Per-view mean of positive similarity over that view's valid pairs.
pub fn view_scores(sv: &SimilarityVolume, d: usize) -> Vec<f64> {
    (0..sv.views)
        .map(|m| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for n in (0..sv.views).filter(|&n| n != m) {
                let (s, ok) = sv.get(d, m, n);
                if ok {
                    sum += (s as f64).max(0.0);
                    count += 1;
                }
            }
            if count > 0 {
                sum / count as f64
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub enum VisibilityPredictor<'a> {
    /// Ground-truth visibility, used as given.
    Oracle(&'a VisibilityWeights),
    /// Threshold-and-renormalise on per-view similarity scores.
    Heuristic { tau_vis: f64 },
    /// Weights loaded from a sidecar file.
    External(&'a VisibilityWeights),
}

pub fn predict_visibility(
    sv: &SimilarityVolume,
    valid: &[bool],
    predictor: VisibilityPredictor<'_>,
) -> Result<VisibilityWeights> {
    let (d, n) = (sv.voxels, sv.views);
    if valid.len() != d * n {
        return Err(Error::InvalidInput("view mask does not match similarity volume".into()));
    }
    let mut out = match predictor {
        VisibilityPredictor::Oracle(w) | VisibilityPredictor::External(w) => {
            if w.voxels != d || w.views != n {
                return Err(Error::InvalidInput(format!(
                    "visibility source is {}x{}, volume is {d}x{n}",
                    w.voxels, w.views
                )));
            }
            w.clone()
        }
        VisibilityPredictor::Heuristic { tau_vis } => {
            let mut w = VisibilityWeights::zeros(d, n);
            w.w.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for (x, s) in row.iter_mut().zip(view_scores(sv, i)) {
                    *x = if s > tau_vis { s as f32 } else { 0.0 };
                }
            });
            w
        }
    };
    out.w
        .par_chunks_mut(n)
        .zip(valid.par_chunks(n))
        .for_each(|(row, mask)| {
            for (x, &ok) in row.iter_mut().zip(mask) {
                if !ok || !x.is_finite() || *x < 0.0 {
                    *x = 0.0;
                }
            }
            normalize_row(row);
        });
    Ok(out)
}

/// Visibility-weighted sum of per-view features.
pub fn fuse_features(fv: &FeatureVolume, w: &VisibilityWeights) -> Result<FusedVolume> {
    if w.voxels != fv.voxels || w.views != fv.views {
        return Err(Error::InvalidInput("weights do not match feature volume".into()));
    }
    let c = fv.channels;
    let mut data = vec![0.0f32; fv.voxels * c];
    data.par_chunks_mut(c.max(1)).enumerate().for_each(|(d, out)| {
        for n in 0..fv.views {
            let wn = w.w[d * fv.views + n];
            if wn != 0.0 {
                for (o, f) in out.iter_mut().zip(fv.feature(d, n)) {
                    *o += wn * f;
                }
            }
        }
    });
    Ok(FusedVolume {
        voxels: fv.voxels,
        channels: c,
        data,
    })
}

/// Linear readout `w . f + b` over a fused feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl LinearHead {
    pub fn apply(&self, f: &[f32]) -> f32 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f32>() + self.bias
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub enum LocalHead<'a> {
    Oracle {
        scene: Option<&'a GroundTruthScene>,
        lambda: f64,
    },
    Heuristic {
        logistic_a: f64,
        logistic_b: f64,
        lambda: f64,
        window: usize,
        stride: usize,
        d_max: f64,
    },
    External {
        occupancy: &'a LinearHead,
        tsdf: &'a LinearHead,
    },
}

/// Similarity statistic used by the heuristic occupancy head.
pub fn weighted_similarity(sv: &SimilarityVolume, w: &VisibilityWeights, d: usize) -> f64 {
    w.row(d)
        .iter()
        .zip(view_scores(sv, d))
        .map(|(&wn, s)| wn as f64 * s)
        .sum()
}

pub fn predict_local_heads(
    fused: &FusedVolume,
    sv: &SimilarityVolume,
    w: &VisibilityWeights,
    grid: &SparseVoxelGrid,
    cameras: &[(CameraIntrinsics, CameraPose)],
    head: &LocalHead<'_>,
) -> Result<LocalPrediction> {
    match head {
        LocalHead::Oracle { scene, lambda } => {
            let scene = scene.ok_or_else(|| Error::config("head", "oracle mode needs a ground-truth scene"))?;
            let (tsdf, occ) = gt_tsdf(scene, grid, *lambda);
            Ok(LocalPrediction {
                occupancy: occ.into_iter().map(|o| if o { 1.0 } else { 0.0 }).collect(),
                tsdf,
            })
        }
        LocalHead::Heuristic {
            logistic_a,
            logistic_b,
            lambda,
            window,
            stride,
            d_max,
        } => {
            let occupancy: Vec<f32> = (0..grid.len())
                .into_par_iter()
                .map(|d| sigmoid(logistic_a * (weighted_similarity(sv, w, d) - logistic_b)) as f32)
                .collect();
            let tsdf = projective_tsdf(grid, &occupancy, cameras, *window, *stride, *d_max, *lambda);
            Ok(LocalPrediction { occupancy, tsdf })
        }
        LocalHead::External { occupancy, tsdf } => {
            let (occ, t) = (0..fused.voxels)
                .into_par_iter()
                .map(|d| {
                    let f = fused.feature(d);
                    (
                        sigmoid(occupancy.apply(f) as f64) as f32,
                        (tsdf.apply(f) as f64).tanh() as f32,
                    )
                })
                .unzip();
            Ok(LocalPrediction {
                occupancy: occ,
                tsdf: t,
            })
        }
    }
}

/// Projective TSDF from per-ray surface depth estimates: each ray's estimate is
/// the occupancy-weighted mean distance inside its selected window.
pub fn projective_tsdf(
    grid: &SparseVoxelGrid,
    occupancy: &[f32],
    cameras: &[(CameraIntrinsics, CameraPose)],
    window: usize,
    stride: usize,
    d_max: f64,
    lambda: f64,
) -> Vec<f32> {
    let per_view: Vec<Vec<(u32, f32)>> = cameras
        .par_iter()
        .map(|(k, pose)| {
            let mut samples = Vec::new();
            let mut ray_voxels = Vec::new();
            let mut ray_occ = Vec::new();
            for v in (0..k.height).step_by(stride) {
                for u in (0..k.width).step_by(stride) {
                    let ray = Ray::through_pixel(k, pose, u as f64, v as f64, d_max);
                    crate::sparsifier::collect_ray(grid, &ray, &mut ray_voxels);
                    if ray_voxels.is_empty() {
                        continue;
                    }
                    ray_occ.clear();
                    ray_occ.extend(ray_voxels.iter().map(|&(i, _)| occupancy[i as usize]));
                    let sel = crate::sparsifier::select_window_unchecked(&ray_occ, window);
                    let span = sel.start..(sel.start + window).min(ray_voxels.len());
                    let mut wsum = 0.0f64;
                    let mut tsum = 0.0f64;
                    for j in span {
                        wsum += ray_occ[j] as f64;
                        tsum += ray_occ[j] as f64 * ray_voxels[j].1;
                    }
                    if wsum <= 0.0 {
                        continue;
                    }
                    let surface = tsum / wsum;
                    for &(i, t) in &ray_voxels {
                        let sdf = surface - t;
                        if sdf > -lambda {
                            samples.push((i, (sdf / lambda).clamp(-1.0, 1.0) as f32));
                        }
                    }
                }
            }
            samples
        })
        .collect();
    let mut sum = vec![0.0f64; grid.len()];
    let mut count = vec![0u32; grid.len()];
    for (i, s) in per_view.into_iter().flatten() {
        sum[i as usize] += s as f64;
        count[i as usize] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 1.0 })
        .collect()
}

/// Unnormalised `{0,1}` visibility: occupied voxels whose line of sight from the
/// camera hits no surface earlier than half a voxel in front of the centre.
pub fn ground_truth_visibility(
    grid: &SparseVoxelGrid,
    cameras: &[(CameraIntrinsics, CameraPose)],
    scene: &GroundTruthScene,
    lambda: f64,
) -> VisibilityWeights {
    let n = cameras.len();
    let margin = 0.5 * grid.spec().voxel_size;
    let mut out = VisibilityWeights::zeros(grid.len(), n);
    out.w.par_chunks_mut(n.max(1)).enumerate().for_each(|(d, row)| {
        let center = grid.center(d);
        if scene.sdf(&center).abs() >= lambda {
            return;
        }
        for (x, (k, pose)) in row.iter_mut().zip(cameras) {
            if project_unchecked(k, pose, &center).visible().is_none() {
                continue;
            }
            let eye = pose.center();
            let to = center - eye;
            let dist = to.norm();
            let reach = dist - margin;
            let blocked = reach > 0.0
                && scene
                    .trace(&Ray {
                        origin: eye,
                        direction: to / dist,
                        t_min: 0.0,
                        t_max: reach,
                    })
                    .is_some();
            if !blocked {
                *x = 1.0;
            }
        }
    });
    out
}

/// Mean squared difference to the row-normalised ground truth.
pub fn loss_visibility(pred: &VisibilityWeights, gt: &VisibilityWeights) -> Result<f64> {
    if pred.voxels != gt.voxels || pred.views != gt.views {
        return Err(Error::InvalidInput("visibility shapes differ".into()));
    }
    if pred.w.is_empty() {
        return Ok(0.0);
    }
    let target = gt.normalized();
    let sum: f64 = pred
        .w
        .iter()
        .zip(&target.w)
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    Ok(sum / pred.w.len() as f64)
}

pub const BCE_EPS: f64 = 1e-7;

pub fn loss_occupancy(pred: &[f32], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput("occupancy shapes differ".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            if g {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn log_scale(x: f64) -> f64 {
    x.signum() * (x.abs() + 1.0).ln()
}

pub fn loss_tsdf(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput("tsdf shapes differ".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (log_scale(p as f64) - log_scale(g as f64)).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

const VFW_MAGIC: &[u8; 4] = b"VFW1";

/// Writes a visibility sidecar: `VFW1`, level, D, N as u32, then `D x N` f32, little-endian.
pub fn write_visibility_sidecar(path: &Path, level: u8, w: &VisibilityWeights) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + w.w.len() * 4);
    buf.extend_from_slice(VFW_MAGIC);
    for x in [level as u32, w.voxels as u32, w.views as u32] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for x in &w.w {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_visibility_sidecar(path: &Path) -> Result<(u8, VisibilityWeights)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != VFW_MAGIC {
        return Err(Error::format("visibility sidecar", "missing VFW1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (level, d, n) = (word(0), word(1), word(2));
    if bytes.len() != 16 + d * n * 4 {
        return Err(Error::format(
            "visibility sidecar",
            format!(
                "expected {} weights, file holds {} bytes of payload",
                d * n,
                bytes.len() - 16
            ),
        ));
    }
    let w = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((level as u8, VisibilityWeights { voxels: d, views: n, w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Vec3, VoxelGridSpec};

    fn volume(views: &[&[f32]]) -> FeatureVolume {
        FeatureVolume {
            voxels: 1,
            views: views.len(),
            channels: views[0].len(),
            data: views.iter().flat_map(|v| v.iter().copied()).collect(),
            valid: vec![true; views.len()],
        }
    }

    #[test]
    fn similarity_examples() {
        let sv = pairwise_similarity(&volume(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 3.0]]));
        assert_eq!(sv.row_len(), 6);
        assert!((sv.get(0, 0, 1).0 as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(sv.get(0, 0, 2), (0.0, true));
        let same = pairwise_similarity(&volume(&[&[0.3f32, 0.4][..]; 9]));
        assert_eq!(same.row_len(), 72);
        assert!(same.flat.iter().all(|&s| (s - 1.0).abs() < 1e-6));
        let zero = pairwise_similarity(&volume(&[&[0.0, 0.0], &[1.0, 0.0]]));
        assert_eq!(zero.get(0, 0, 1), (0.0, false));
    }

    #[test]
    fn heuristic_visibility() {
        let sv = SimilarityVolume {
            voxels: 1,
            views: 3,
            flat: vec![0.9, 0.0, 0.9, 0.0, 0.0, 0.0],
            pair_valid: vec![true, false, true, false, false, false],
        };
        // scores: view 0 -> 0.9 (pair with 1), view 1 -> 0.9, view 2 -> no valid pairs
        let w = predict_visibility(&sv, &[true; 3], VisibilityPredictor::Heuristic { tau_vis: 0.1 }).unwrap();
        assert_eq!(w.w, vec![0.5, 0.5, 0.0]);
        let none = SimilarityVolume {
            pair_valid: vec![false; 6],
            flat: vec![0.0; 6],
            ..sv.clone()
        };
        let w = predict_visibility(&none, &[true; 3], VisibilityPredictor::Heuristic { tau_vis: 0.1 }).unwrap();
        assert_eq!(w.w, vec![0.0; 3]);
        let uniform = pairwise_similarity(&volume(&[&[1.0f32, 2.0][..]; 4]));
        let w = predict_visibility(&uniform, &[true; 4], VisibilityPredictor::Heuristic { tau_vis: 0.1 }).unwrap();
        assert!(w.w.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn fusion_examples() {
        let fv = volume(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = VisibilityWeights {
            voxels: 1,
            views: 2,
            w: vec![0.25, 0.75],
        };
        assert_eq!(fuse_features(&fv, &w).unwrap().data, vec![0.25, 0.75]);
        let one_hot = VisibilityWeights { w: vec![0.0, 1.0], ..w };
        assert_eq!(fuse_features(&fv, &one_hot).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn backprojection() {
        let spec = VoxelGridSpec {
            origin: [-0.05, -0.05, 0.95],
            voxel_size: 0.1,
            dims: [1, 1, 1],
            level: 1,
        };
        let grid = SparseVoxelGrid::full(spec);
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        let mut map = FeatureMap::zeros(101, 101, 2);
        map.pixel_mut(50, 50).copy_from_slice(&[7.0, -2.0]);
        let front = CameraPose::identity();
        let behind = CameraPose::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 3.0), Vec3::y()).unwrap();
        let fv = backproject_features(&grid, &[map.clone(), map.clone()], &[(k, front), (k, behind)]).unwrap();
        assert_eq!(fv.feature(0, 0), &[7.0, -2.0]);
        assert_eq!(fv.feature(0, 1), &[0.0, 0.0]);
        assert_eq!(fv.valid, vec![true, false]);
        assert!(backproject_features(&grid, &[map], &[(k, front), (k, behind)]).is_err());
    }

    #[test]
    fn loss_examples() {
        let gt = VisibilityWeights {
            voxels: 1,
            views: 3,
            w: vec![1.0, 1.0, 0.0],
        };
        let pred = VisibilityWeights {
            w: vec![1.0, 0.0, 0.0],
            ..gt.clone()
        };
        assert!((loss_visibility(&pred, &gt).unwrap() - 1.0 / 6.0).abs() < 1e-9);
        assert_eq!(loss_visibility(&gt.normalized(), &gt).unwrap(), 0.0);
        assert!((loss_occupancy(&[0.5, 0.5], &[true, false]).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(loss_occupancy(&[1.0, 0.0], &[true, false]).unwrap() <= 1e-6);
        assert!((loss_tsdf(&[1.0], &[0.0]).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert_eq!(loss_tsdf(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 0.0);
    }

    #[test]
    fn visibility_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frag0_level1.vfw");
        let w = VisibilityWeights {
            voxels: 2,
            views: 2,
            w: vec![0.5, 0.5, 1.0, 0.0],
        };
        write_visibility_sidecar(&path, 1, &w).unwrap();
        assert_eq!(read_visibility_sidecar(&path).unwrap(), (1, w));
        std::fs::write(&path, b"VFW0").unwrap();
        assert!(read_visibility_sidecar(&path).is_err());
    }
}
