//! Ray-based sparsification of a level's local volume and coarse-to-fine upsampling.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{traverse_ray_visit, CameraIntrinsics, CameraPose, Ray, VoxelGridSpec};
use crate::grid::SparseVoxelGrid;

/// Chosen window on one ray. `start` is 0-based; `i_star()` gives the 1-based index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSelection {
    pub start: usize,
    pub sum: f64,
}

impl WindowSelection {
    pub fn i_star(&self) -> usize {
        self.start + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    SlidingWindow,
    TopK,
    Threshold,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sliding_window" => Ok(Strategy::SlidingWindow),
            "topk" => Ok(Strategy::TopK),
            "threshold" => Ok(Strategy::Threshold),
            other => Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::SlidingWindow => "sliding_window",
            Strategy::TopK => "topk",
            Strategy::Threshold => "threshold",
        }
    }
}

/// Window of `k` consecutive entries with the largest sum, earliest on ties.
/// Rays no longer than `k` yield the single window covering the whole ray.
pub fn select_window(occupancies: &[f32], k: usize) -> Result<WindowSelection> {
    select_window_with(occupancies, k, false)
}

/// As [`select_window`]; `compat` drops the last full window (`R - K` candidates).
pub fn select_window_with(occupancies: &[f32], k: usize, compat: bool) -> Result<WindowSelection> {
    if occupancies.is_empty() {
        return Err(Error::InvalidInput("cannot select a window on an empty ray".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    Ok(select_window_inner(occupancies, k, compat))
}

pub(crate) fn select_window_unchecked(occupancies: &[f32], k: usize) -> WindowSelection {
    select_window_inner(occupancies, k, false)
}

fn select_window_inner(occ: &[f32], k: usize, compat: bool) -> WindowSelection {
    let r = occ.len();
    let window_sum = |i: usize| occ[i..(i + k).min(r)].iter().map(|&x| x as f64).sum::<f64>();
    let count = if r <= k {
        1
    } else if compat {
        (r - k).max(1)
    } else {
        r - k + 1
    };
    let mut best = WindowSelection {
        start: 0,
        sum: window_sum(0),
    };
    for i in 1..count {
        let s = window_sum(i);
        if s > best.sum {
            best = WindowSelection { start: i, sum: s };
        }
    }
    best
}

/// Present voxels pierced by `ray`, nearest first, as (grid index, distance of
/// the voxel centre along the ray).
pub fn collect_ray(grid: &SparseVoxelGrid, ray: &Ray, out: &mut Vec<(u32, f64)>) {
    out.clear();
    traverse_ray_visit(grid.spec(), ray, |idx, _| {
        if let Some(i) = grid.index_of(idx) {
            let t = (grid.spec().center(idx) - ray.origin).dot(&ray.direction);
            out.push((i as u32, t));
        }
    });
}

/// Per-ray sparsification settings.
#[derive(Clone, Copy, Debug)]
pub struct RaySparsifier {
    pub strategy: Strategy,
    pub window: usize,
    pub stride: usize,
    pub d_max: f64,
    pub theta: f64,
    pub compat: bool,
}

impl RaySparsifier {
    pub fn sliding_window(window: usize, stride: usize, d_max: f64) -> Self {
        RaySparsifier {
            strategy: Strategy::SlidingWindow,
            window,
            stride,
            d_max,
            theta: 0.5,
            compat: false,
        }
    }

    pub fn run(
        &self,
        grid: &SparseVoxelGrid,
        occupancy: &[f32],
        cameras: &[(CameraIntrinsics, CameraPose)],
    ) -> Vec<bool> {
        match self.strategy {
            Strategy::Threshold => threshold_sparsify(occupancy, self.theta),
            Strategy::SlidingWindow | Strategy::TopK => self.cast(grid, occupancy, cameras),
        }
    }

    fn cast(&self, grid: &SparseVoxelGrid, occupancy: &[f32], cameras: &[(CameraIntrinsics, CameraPose)]) -> Vec<bool> {
        let stride = self.stride.max(1);
        cameras
            .par_iter()
            .map(|(k, pose)| {
                let mut kept = vec![false; grid.len()];
                let mut ray_voxels = Vec::new();
                let mut occ = Vec::new();
                let mut order = Vec::new();
                for v in (0..k.height).step_by(stride) {
                    for u in (0..k.width).step_by(stride) {
                        let ray = Ray::through_pixel(k, pose, u as f64, v as f64, self.d_max);
                        collect_ray(grid, &ray, &mut ray_voxels);
                        if ray_voxels.is_empty() {
                            continue;
                        }
                        occ.clear();
                        occ.extend(ray_voxels.iter().map(|&(i, _)| occupancy[i as usize]));
                        match self.strategy {
                            Strategy::TopK => {
                                topk_indices(&occ, self.window, &mut order);
                                for &j in &order {
                                    kept[ray_voxels[j].0 as usize] = true;
                                }
                            }
                            _ => {
                                let sel = select_window_inner(&occ, self.window, self.compat);
                                let end = (sel.start + self.window).min(occ.len());
                                for &(i, _) in &ray_voxels[sel.start..end] {
                                    kept[i as usize] = true;
                                }
                            }
                        }
                    }
                }
                kept
            })
            .reduce(
                || vec![false; grid.len()],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                    a
                },
            )
    }
}

/// Sliding-window keep mask over every sampled pixel ray of every view.
pub fn sparsify_fragment(
    grid: &SparseVoxelGrid,
    occupancy: &[f32],
    cameras: &[(CameraIntrinsics, CameraPose)],
    window: usize,
    stride: usize,
    d_max: f64,
) -> Vec<bool> {
    RaySparsifier::sliding_window(window, stride, d_max).run(grid, occupancy, cameras)
}

pub fn topk_sparsify(
    grid: &SparseVoxelGrid,
    occupancy: &[f32],
    cameras: &[(CameraIntrinsics, CameraPose)],
    k: usize,
    stride: usize,
    d_max: f64,
) -> Vec<bool> {
    RaySparsifier {
        strategy: Strategy::TopK,
        ..RaySparsifier::sliding_window(k, stride, d_max)
    }
    .run(grid, occupancy, cameras)
}

/// Positions of the `k` largest occupancies, earlier positions first on ties.
pub fn topk_indices(occ: &[f32], k: usize, out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..occ.len());
    out.sort_by(|&a, &b| occ[b].total_cmp(&occ[a]).then(a.cmp(&b)));
    out.truncate(k);
}

pub fn threshold_sparsify(occupancy: &[f32], theta: f64) -> Vec<bool> {
    occupancy.iter().map(|&o| o as f64 > theta).collect()
}

/// Children of every kept voxel on the next finer level.
pub fn upsample_voxels(grid: &SparseVoxelGrid, kept: &[bool], fine: &VoxelGridSpec) -> Result<SparseVoxelGrid> {
    if !fine.is_finer_child_of(grid.spec()) {
        return Err(Error::InvalidInput("fine grid does not refine the coarse grid".into()));
    }
    if kept.len() != grid.len() {
        return Err(Error::InvalidInput("keep mask does not match grid".into()));
    }
    let mut present = vec![false; fine.num_voxels()];
    for (i, _) in kept.iter().enumerate().filter(|(_, k)| **k) {
        let [x, y, z] = grid.lattice(i);
        for off in 0..8 {
            let child = [2 * x + (off & 1), 2 * y + ((off >> 1) & 1), 2 * z + ((off >> 2) & 1)];
            if let Some(idx) = fine.from_lattice(child) {
                present[fine.linear_index(idx)] = true;
            }
        }
    }
    Ok(SparseVoxelGrid::from_mask(*fine, &present))
}

/// Kept voxels as world lattice triples, one `x y z` per line.
pub fn write_keep_dump(path: &Path, grid: &SparseVoxelGrid, kept: &[bool]) -> Result<()> {
    let mut s = String::new();
    for (i, _) in kept.iter().enumerate().filter(|(_, k)| **k) {
        let [x, y, z] = grid.lattice(i);
        let _ = writeln!(s, "{x} {y} {z}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let sel = select_window(&[0.1, 0.9, 0.8, 0.2, 0.1], 2).unwrap();
        assert_eq!(sel.i_star(), 2);
        assert!((sel.sum - 1.7).abs() < 1e-6);
        assert_eq!(select_window(&[0.4; 7], 3).unwrap().i_star(), 1);
        let short = select_window(&[0.1, 0.2, 0.3], 9).unwrap();
        assert_eq!(short.i_star(), 1);
        assert!((short.sum - 0.6).abs() < 1e-6);
        assert!(select_window(&[], 2).is_err());
        // the last full window only exists without the compatibility flag
        assert_eq!(select_window_with(&[0.0, 0.0, 1.0], 2, false).unwrap().start, 1);
        assert_eq!(select_window_with(&[0.0, 0.0, 1.0], 2, true).unwrap().start, 0);
    }

    #[test]
    fn topk_vs_window_on_bimodal_ray() {
        let occ = [0.9, 0.1, 0.1, 0.9];
        let mut idx = Vec::new();
        topk_indices(&occ, 2, &mut idx);
        idx.sort();
        assert_eq!(idx, vec![0, 3]);
        let sel = select_window(&occ, 2).unwrap();
        assert_eq!(sel.start, 0);
        topk_indices(&occ, 9, &mut idx);
        assert_eq!(idx.len(), 4);
    }

    #[test]
    fn thresholds() {
        let occ = [0.0, 0.3, 1.0];
        assert_eq!(threshold_sparsify(&occ, 0.0), vec![false, true, true]);
        assert_eq!(threshold_sparsify(&occ, 1.0), vec![false; 3]);
        assert_eq!(threshold_sparsify(&occ, 0.5), vec![false, false, true]);
    }

    #[test]
    fn upsampling() {
        let coarse = VoxelGridSpec {
            origin: [-0.32, 0.16, 0.0],
            voxel_size: 0.16,
            dims: [3, 2, 2],
            level: 1,
        };
        let grid = SparseVoxelGrid::full(coarse);
        let fine = coarse.refined();
        let mut kept = vec![false; grid.len()];
        assert!(upsample_voxels(&grid, &kept, &fine).unwrap().is_empty());
        kept[5] = true;
        let up = upsample_voxels(&grid, &kept, &fine).unwrap();
        assert_eq!(up.len(), 8);
        let parent = grid.voxels()[5];
        let lo = coarse.center(parent).map(|c| c - 0.08);
        for i in 0..up.len() {
            let c = up.center(i);
            for a in 0..3 {
                assert!(c[a] > lo[a] && c[a] < lo[a] + 0.16);
            }
        }
    }
}
