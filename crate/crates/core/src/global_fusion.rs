//! Persistent global volume, per-voxel GRU fusion and residual TSDF composition.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::local_fusion::LinearHead;

/// Gate and candidate parameters of the per-voxel GRU for feature width `C`.
/// Matrices are `C x 2C`, row-major, acting on `[L; G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub channels: usize,
    pub w_z: Vec<f32>,
    pub b_z: Vec<f32>,
    pub w_r: Vec<f32>,
    pub b_r: Vec<f32>,
    pub w_h: Vec<f32>,
    pub b_h: Vec<f32>,
}

impl GruParams {
    pub fn constant(channels: usize, weight: f32, bias: f32) -> Self {
        let m = vec![weight; channels * 2 * channels];
        let b = vec![bias; channels];
        GruParams {
            channels,
            w_z: m.clone(),
            b_z: b.clone(),
            w_r: m.clone(),
            b_r: b.clone(),
            w_h: m,
            b_h: b,
        }
    }

    /// Reproducible default: each matrix has orthonormal rows drawn from a
    /// seeded Gaussian, biases are zero.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = || orthonormal_rows(channels, 2 * channels, &mut rng);
        let (w_z, w_r, w_h) = (matrix(), matrix(), matrix());
        GruParams {
            channels,
            w_z,
            b_z: vec![0.0; channels],
            w_r,
            b_r: vec![0.0; channels],
            w_h,
            b_h: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let mats = [&self.w_z, &self.w_r, &self.w_h];
        let biases = [&self.b_z, &self.b_r, &self.b_h];
        if mats.iter().any(|m| m.len() != 2 * c * c) || biases.iter().any(|b| b.len() != c) {
            return Err(Error::InvalidInput(format!(
                "GRU parameter shapes do not match width {c}"
            )));
        }
        if mats
            .iter()
            .chain(biases.iter())
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::InvalidInput("GRU parameters must be finite".into()));
        }
        Ok(())
    }

    /// One GRU step for a single voxel, written into `out`.
    pub fn step(&self, local: &[f32], global: &[f32], out: &mut [f32]) {
        let c = self.channels;
        let affine = |w: &[f32], b: &[f32], row: usize, x: &[f32], y: &[f32]| {
            let r = &w[row * 2 * c..(row + 1) * 2 * c];
            let mut acc = b[row] as f64;
            for i in 0..c {
                acc += r[i] as f64 * x[i] as f64;
            }
            for i in 0..c {
                acc += r[c + i] as f64 * y[i] as f64;
            }
            acc
        };
        let mut reset_g = vec![0.0f32; c];
        for i in 0..c {
            let r = sigmoid(affine(&self.w_r, &self.b_r, i, local, global));
            reset_g[i] = (r * global[i] as f64) as f32;
        }
        for i in 0..c {
            let z = sigmoid(affine(&self.w_z, &self.b_z, i, local, global));
            let h = affine(&self.w_h, &self.b_h, i, local, &reset_g).tanh();
            out[i] = ((1.0 - z) * global[i] as f64 + z * h) as f32;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.into_iter().flatten().map(|x| x as f32).collect()
}

/// GRU over `D` voxels; `local` and `global` are `D x C`.
pub fn gru_fuse(local: &[f32], global: &[f32], params: &GruParams) -> Result<Vec<f32>> {
    let c = params.channels;
    if c == 0 || local.len() != global.len() || !local.len().is_multiple_of(c) {
        return Err(Error::InvalidInput(format!(
            "GRU width {c} does not fit local ({}) and global ({}) features",
            local.len(),
            global.len()
        )));
    }
    let mut out = vec![0.0f32; local.len()];
    out.par_chunks_mut(c)
        .zip(local.par_chunks(c).zip(global.par_chunks(c)))
        .for_each(|(o, (l, g))| params.step(l, g, o));
    Ok(out)
}

/// `clamp(coarse + delta, -1, 1)` per voxel.
pub fn compose_residual(coarse_up: &[f32], delta: &[f32]) -> Result<Vec<f32>> {
    if coarse_up.len() != delta.len() {
        return Err(Error::InvalidInput("residual shapes differ".into()));
    }
    Ok(coarse_up
        .iter()
        .zip(delta)
        .map(|(&c, &d)| (c as f64 + d as f64).clamp(-1.0, 1.0) as f32)
        .collect())
}

/// Parameters for one level: GRU plus the linear readouts used in external mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub level: u8,
    pub gru: GruParams,
    pub local_occupancy: LinearHead,
    pub local_tsdf: LinearHead,
    pub global_tsdf: LinearHead,
}

impl LevelParams {
    pub fn seeded(level: u8, channels: usize, seed: u64) -> Self {
        let zero = LinearHead {
            weights: vec![0.0; channels],
            bias: 0.0,
        };
        LevelParams {
            level,
            gru: GruParams::seeded(channels, seed.wrapping_add(level as u64)),
            local_occupancy: zero.clone(),
            local_tsdf: zero.clone(),
            global_tsdf: zero,
        }
    }

    pub fn channels(&self) -> usize {
        self.gru.channels
    }
}

const VFG_MAGIC: &[u8; 4] = b"VFG1";

/// Layout: `VFG1`, level and C as u32, then `W_z b_z W_r b_r W_h b_h`, then
/// local occupancy, local TSDF and global TSDF heads as `C` weights plus a bias.
pub fn write_params_sidecar(path: &Path, params: &LevelParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VFG_MAGIC);
    buf.extend_from_slice(&(params.level as u32).to_le_bytes());
    buf.extend_from_slice(&(params.channels() as u32).to_le_bytes());
    let g = &params.gru;
    let heads = [&params.local_occupancy, &params.local_tsdf, &params.global_tsdf];
    let blocks: Vec<&[f32]> = vec![&g.w_z, &g.b_z, &g.w_r, &g.b_r, &g.w_h, &g.b_h];
    for b in blocks {
        b.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    for h in heads {
        h.weights.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        buf.extend_from_slice(&h.bias.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_params_sidecar(path: &Path) -> Result<LevelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != VFG_MAGIC {
        return Err(Error::format("parameter sidecar", "missing VFG1 header"));
    }
    let level = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 3 * (2 * c * c + c) + 3 * (c + 1);
    let floats: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if (bytes.len() - 12) % 4 != 0 || floats.len() != expected {
        return Err(Error::format(
            "parameter sidecar",
            format!("width {c} needs {expected} floats, found {}", floats.len()),
        ));
    }
    let mut it = floats.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f32>>();
    let w_z = take(2 * c * c);
    let b_z = take(c);
    let w_r = take(2 * c * c);
    let b_r = take(c);
    let w_h = take(2 * c * c);
    let b_h = take(c);
    let mut head = || {
        let weights = take(c);
        LinearHead {
            weights,
            bias: take(1)[0],
        }
    };
    let (local_occupancy, local_tsdf, global_tsdf) = (head(), head(), head());
    let params = LevelParams {
        level: level as u8,
        gru: GruParams {
            channels: c,
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        },
        local_occupancy,
        local_tsdf,
        global_tsdf,
    };
    params.gru.validate()?;
    Ok(params)
}

/// One level of the global volume. Coordinates are world lattice indices;
/// storage is append-only so iteration order follows insertion order.
#[derive(Clone, Debug, Default)]
pub struct GlobalLevel {
    channels: usize,
    index: HashMap<[i32; 3], u32>,
    coords: Vec<[i32; 3]>,
    hidden: Vec<f32>,
    tsdf: Vec<f32>,
}

impl PartialEq for GlobalLevel {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.coords == other.coords
            && self
                .hidden
                .iter()
                .map(|x| x.to_bits())
                .eq(other.hidden.iter().map(|x| x.to_bits()))
            && self
                .tsdf
                .iter()
                .map(|x| x.to_bits())
                .eq(other.tsdf.iter().map(|x| x.to_bits()))
    }
}

impl GlobalLevel {
    pub fn new(channels: usize) -> Self {
        GlobalLevel {
            channels,
            ..Default::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn tsdf_values(&self) -> &[f32] {
        &self.tsdf
    }

    pub fn slot(&self, coord: &[i32; 3]) -> Option<usize> {
        self.index.get(coord).map(|&i| i as usize)
    }

    pub fn tsdf(&self, coord: &[i32; 3]) -> Option<f32> {
        self.slot(coord).map(|i| self.tsdf[i])
    }

    pub fn hidden(&self, coord: &[i32; 3]) -> Option<&[f32]> {
        let c = self.channels;
        self.slot(coord).map(|i| &self.hidden[i * c..(i + 1) * c])
    }

    /// Hidden states for `coords`, zeros where the volume has no entry.
    pub fn gather_hidden(&self, coords: &[[i32; 3]]) -> Vec<f32> {
        let c = self.channels;
        let mut out = vec![0.0f32; coords.len() * c];
        for (o, coord) in out.chunks_mut(c.max(1)).zip(coords) {
            if let Some(h) = self.hidden(coord) {
                o.copy_from_slice(h);
            }
        }
        out
    }

    /// Overwrites existing coordinates and appends new ones.
    pub fn update(&mut self, coords: &[[i32; 3]], hidden: &[f32], tsdf: &[f32]) -> Result<()> {
        let c = self.channels;
        if hidden.len() != coords.len() * c || tsdf.len() != coords.len() {
            return Err(Error::InvalidInput("global update shapes disagree".into()));
        }
        for (i, coord) in coords.iter().enumerate() {
            let h = &hidden[i * c..(i + 1) * c];
            let t = tsdf[i].clamp(-1.0, 1.0);
            match self.index.get(coord) {
                Some(&slot) => {
                    let s = slot as usize;
                    self.hidden[s * c..(s + 1) * c].copy_from_slice(h);
                    self.tsdf[s] = t;
                }
                None => {
                    self.index.insert(*coord, self.coords.len() as u32);
                    self.coords.push(*coord);
                    self.hidden.extend_from_slice(h);
                    self.tsdf.push(t);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Trilinear,
}

/// Value used where a fine voxel has no coarse parent in the global volume.
pub const MISSING_PARENT_TSDF: f32 = 1.0;

/// Coarse TSDF carried to fine coordinates. Returns the values and the number
/// of fine voxels that fell back to [`MISSING_PARENT_TSDF`].
pub fn upsample_tsdf(coarse: &GlobalLevel, fine_coords: &[[i32; 3]], mode: Upsample) -> (Vec<f32>, usize) {
    let missing = std::sync::atomic::AtomicUsize::new(0);
    let vals = fine_coords
        .par_iter()
        .map(|c| match mode {
            Upsample::Nearest => coarse.tsdf(&c.map(|x| x.div_euclid(2))).unwrap_or_else(|| {
                missing.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                MISSING_PARENT_TSDF
            }),
            Upsample::Trilinear => {
                // fine centre in coarse lattice units is (2c + 1) / 4 - 1/2 relative to coarse centres
                let pos = c.map(|x| (2 * x + 1) as f64 / 4.0 - 0.5);
                let base = pos.map(|p| p.floor() as i32);
                let frac = [0, 1, 2].map(|a| pos[a] - base[a] as f64);
                let mut acc = 0.0f64;
                let mut any_missing = false;
                for corner in 0..8 {
                    let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                    let key = [0, 1, 2].map(|a| base[a] + off[a]);
                    let w: f64 = (0..3)
                        .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                        .product();
                    let v = coarse.tsdf(&key).unwrap_or_else(|| {
                        any_missing = true;
                        MISSING_PARENT_TSDF
                    });
                    acc += w * v as f64;
                }
                if any_missing {
                    missing.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                acc as f32
            }
        })
        .collect();
    (vals, missing.into_inner())
}

/// Persistent multi-level volume carried across fragments.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalVolume {
    pub levels: Vec<GlobalLevel>,
}

impl GlobalVolume {
    pub fn new(channels: &[usize]) -> Self {
        GlobalVolume {
            levels: channels.iter().map(|&c| GlobalLevel::new(c)).collect(),
        }
    }

    pub fn level(&self, l: usize) -> &GlobalLevel {
        &self.levels[l - 1]
    }

    pub fn level_mut(&mut self, l: usize) -> &mut GlobalLevel {
        &mut self.levels[l - 1]
    }

    pub fn update_global(&mut self, level: usize, coords: &[[i32; 3]], fused: &[f32], tsdf: &[f32]) -> Result<()> {
        self.level_mut(level).update(coords, fused, tsdf)
    }

    /// Checkpoint bytes: `VFC1`, level count, then per level its number, width,
    /// record count (u64) and `(i32 x3, C f32 hidden, f32 tsdf)` records.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VFC1");
        buf.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for (l, level) in self.levels.iter().enumerate() {
            buf.extend_from_slice(&(l as u32 + 1).to_le_bytes());
            buf.extend_from_slice(&(level.channels as u32).to_le_bytes());
            buf.extend_from_slice(&(level.len() as u64).to_le_bytes());
            let c = level.channels;
            for (i, coord) in level.coords.iter().enumerate() {
                coord.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                level.hidden[i * c..(i + 1) * c]
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                buf.extend_from_slice(&level.tsdf[i].to_le_bytes());
            }
        }
        buf
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != b"VFC1" {
            return Err(bad("missing VFC1 header"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let count = u32_at(take(4)?) as usize;
        let mut levels = Vec::with_capacity(count);
        for l in 0..count {
            if u32_at(take(4)?) as usize != l + 1 {
                return Err(bad("levels out of order"));
            }
            let c = u32_at(take(4)?) as usize;
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let mut level = GlobalLevel::new(c);
            for _ in 0..n {
                let rec = take(12 + 4 * c + 4)?;
                let f = |i: usize| f32::from_le_bytes(rec[i..i + 4].try_into().unwrap());
                let coord = [0, 4, 8].map(|i| i32::from_le_bytes(rec[i..i + 4].try_into().unwrap()));
                let hidden: Vec<f32> = (0..c).map(|k| f(12 + 4 * k)).collect();
                level.update(&[coord], &hidden, &[f(12 + 4 * c)])?;
            }
            levels.push(level);
        }
        Ok(GlobalVolume { levels })
    }
}

/// The five loss terms of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LevelLosses {
    pub visibility: f64,
    pub occupancy: f64,
    pub tsdf: f64,
    pub global_occupancy: f64,
    pub global_tsdf: f64,
}

impl LevelLosses {
    pub fn sum(&self) -> f64 {
        self.visibility + self.occupancy + self.tsdf + self.global_occupancy + self.global_tsdf
    }
}

pub fn total_loss(levels: &[LevelLosses], omega: &[f64]) -> Result<f64> {
    if levels.len() != omega.len() {
        return Err(Error::InvalidInput(format!(
            "{} level losses for {} weights",
            levels.len(),
            omega.len()
        )));
    }
    Ok(levels.iter().zip(omega).map(|(l, w)| w * l.sum()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_hand_example() {
        let p = GruParams::constant(1, 1.0, 0.0);
        let out = gru_fuse(&[0.5], &[0.0], &p).unwrap();
        let z = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((z - 0.62246).abs() < 1e-5);
        assert!((out[0] as f64 - z * 0.5f64.tanh()).abs() < 1e-6);
        // printed to five places the product of the rounded factors reads 0.28766
        assert!((out[0] - 0.287649).abs() < 1e-6);
    }

    #[test]
    fn gru_gate_extremes() {
        let mut p = GruParams::seeded(4, 7);
        let l = [0.3, -0.2, 0.9, 0.1];
        let g = [-0.7, 0.25, 0.5, 0.0];
        p.b_z = vec![-1e4; 4];
        let pass = gru_fuse(&l, &g, &p).unwrap();
        assert_eq!(
            pass.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g.map(f32::to_bits)
        );
        p.b_z = vec![1e4; 4];
        let over = gru_fuse(&l, &g, &p).unwrap();
        let mut h = [0.0f32; 4];
        // candidate alone, recomputed with the update gate removed
        let mut q = p.clone();
        q.w_z = vec![0.0; 32];
        q.b_z = vec![1e4; 4];
        q.step(&l, &g, &mut h);
        assert_eq!(over, h.to_vec());
        assert!(gru_fuse(&l, &g[..3], &p).is_err());
    }

    #[test]
    fn residual_examples() {
        assert_eq!(
            compose_residual(&[0.5], &[-0.2]).unwrap()[0],
            (0.5f64 - 0.2f32 as f64) as f32
        );
        assert!((compose_residual(&[0.5], &[-0.2]).unwrap()[0] - 0.3).abs() < 1e-7);
        assert_eq!(compose_residual(&[0.9], &[0.5]).unwrap(), vec![1.0]);
        let up = [0.25f32, -0.125, 1.0];
        assert_eq!(compose_residual(&up, &[0.0; 3]).unwrap(), up.to_vec());
    }

    #[test]
    fn global_update_semantics() {
        let mut level = GlobalLevel::new(1);
        level
            .update(&[[0, 0, 0], [1, 0, 0]], &[0.1, 0.2], &[0.5, -0.5])
            .unwrap();
        level.update(&[[1, 0, 0], [5, 5, 5]], &[0.3, 0.4], &[0.2, 2.0]).unwrap();
        assert_eq!(level.coords(), &[[0, 0, 0], [1, 0, 0], [5, 5, 5]]);
        assert_eq!(level.tsdf(&[0, 0, 0]), Some(0.5));
        assert_eq!(level.tsdf(&[1, 0, 0]), Some(0.2));
        assert_eq!(level.tsdf(&[5, 5, 5]), Some(1.0));
        assert_eq!(level.gather_hidden(&[[1, 0, 0], [9, 9, 9]]), vec![0.3, 0.0]);
    }

    #[test]
    fn nearest_upsampling_and_missing_parents() {
        let mut coarse = GlobalLevel::new(1);
        coarse
            .update(&[[0, 0, 0], [-1, 0, 0]], &[0.0, 0.0], &[0.25, -0.75])
            .unwrap();
        let (vals, missing) = upsample_tsdf(
            &coarse,
            &[[1, 1, 0], [-1, 0, 1], [-2, 1, 1], [4, 0, 0]],
            Upsample::Nearest,
        );
        assert_eq!(vals, vec![0.25, -0.75, -0.75, 1.0]);
        assert_eq!(missing, 1);
    }

    #[test]
    fn total_loss_examples() {
        let w = [1.0, 0.8, 0.64];
        assert_eq!(total_loss(&[LevelLosses::default(); 3], &w).unwrap(), 0.0);
        let ones = LevelLosses {
            visibility: 1.0,
            occupancy: 1.0,
            tsdf: 1.0,
            global_occupancy: 1.0,
            global_tsdf: 1.0,
        };
        assert!((total_loss(&[ones; 3], &w).unwrap() - 12.2).abs() < 1e-12);
    }

    #[test]
    fn sidecars_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = LevelParams::seeded(2, 3, 11);
        p.global_tsdf.bias = 0.5;
        let path = dir.path().join("level2.vfg");
        write_params_sidecar(&path, &p).unwrap();
        assert_eq!(read_params_sidecar(&path).unwrap(), p);
        let mut vol = GlobalVolume::new(&[2, 1]);
        vol.update_global(1, &[[1, -2, 3]], &[0.5, -0.5], &[0.25]).unwrap();
        vol.update_global(2, &[[0, 0, 0], [7, 7, -7]], &[1.0, 2.0], &[-1.0, 0.0])
            .unwrap();
        let bytes = vol.to_checkpoint();
        assert_eq!(GlobalVolume::from_checkpoint(&bytes).unwrap(), vol);
        assert!(GlobalVolume::from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn seeded_rows_are_orthonormal() {
        let p = GruParams::seeded(3, 1);
        for m in [&p.w_z, &p.w_r, &p.w_h] {
            for a in 0..3 {
                for b in 0..3 {
                    let d: f32 = (0..6).map(|i| m[a * 6 + i] * m[b * 6 + i]).sum();
                    assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
                }
            }
        }
    }
}
