//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use visrecon_core::geometry::{Ray, VoxelGridSpec};
use visrecon_core::global_fusion::GruParams;

/// Start and sum of the best length-`k` window, earliest start on ties.
pub fn brute_window(occ: &[f32], k: usize) -> (usize, f64) {
    if occ.len() <= k {
        return (0, occ.iter().map(|&x| x as f64).sum());
    }
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..=occ.len() - k {
        let mut sum = 0.0f64;
        for &x in &occ[s..s + k] {
            sum += x as f64;
        }
        if sum > best.1 {
            best = (s, sum);
        }
    }
    best
}

/// Every voxel whose box meets the ray segment in an interval of positive length,
/// ordered by entry distance.
pub fn box_oracle(grid: &VoxelGridSpec, ray: &Ray) -> Vec<[usize; 3]> {
    let (o, d) = (ray.origin, ray.direction);
    let mut hits = Vec::new();
    for z in 0..grid.dims[2] {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let idx = [x, y, z];
                let (mut enter, mut exit) = (ray.t_min, ray.t_max);
                for a in 0..3 {
                    let lo = grid.boundary(a, idx[a] as i64);
                    let hi = grid.boundary(a, idx[a] as i64 + 1);
                    if d[a] == 0.0 {
                        if o[a] < lo || o[a] >= hi {
                            exit = f64::NEG_INFINITY;
                        }
                        continue;
                    }
                    let (ta, tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                    enter = enter.max(ta.min(tb));
                    exit = exit.min(ta.max(tb));
                }
                if enter < exit {
                    hits.push((enter, idx));
                }
            }
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    hits.into_iter().map(|(_, i)| i).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU candidate state for one voxel, evaluated independently in f64.
pub fn gru_candidate(p: &GruParams, l: &[f32], g: &[f32]) -> Vec<f64> {
    let c = p.channels;
    let affine = |w: &[f32], b: &[f32], row: usize, y: &[f32]| {
        let r = &w[row * 2 * c..(row + 1) * 2 * c];
        let mut acc = b[row] as f64;
        for i in 0..c {
            acc += r[i] as f64 * l[i] as f64;
        }
        for i in 0..c {
            acc += r[c + i] as f64 * y[i] as f64;
        }
        acc
    };
    let reset: Vec<f32> = (0..c)
        .map(|i| (sigmoid(affine(&p.w_r, &p.b_r, i, g)) * g[i] as f64) as f32)
        .collect();
    (0..c).map(|i| affine(&p.w_h, &p.b_h, i, &reset).tanh()).collect()
}
