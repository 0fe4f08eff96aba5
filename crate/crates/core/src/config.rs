//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::global_fusion::Upsample;
use crate::sparsifier::Strategy;
use crate::surface::AbsentPolicy;

/// Source of visibility weights or head outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Oracle,
    Heuristic,
    External,
}

impl Mode {
    pub fn parse(field: &str, s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Mode::Oracle),
            "heuristic" => Ok(Mode::Heuristic),
            "external" => Ok(Mode::External),
            other => Err(Error::config(
                field,
                format!("unknown mode `{other}` (oracle, heuristic, external)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Oracle => "oracle",
            Mode::Heuristic => "heuristic",
            Mode::External => "external",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    /// `depth-oracle` for scenes, `depth` for datasets.
    Auto,
    DepthOracle,
    Depth,
    Photometric,
    Constant,
}

impl ProviderKind {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => ProviderKind::Auto,
            "depth-oracle" => ProviderKind::DepthOracle,
            "depth" => ProviderKind::Depth,
            "photometric" => ProviderKind::Photometric,
            "constant" => ProviderKind::Constant,
            other => return Err(Error::config("feature_provider", format!("unknown provider `{other}`"))),
        })
    }

    fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::Auto => "auto",
            ProviderKind::DepthOracle => "depth-oracle",
            ProviderKind::Depth => "depth",
            ProviderKind::Photometric => "photometric",
            ProviderKind::Constant => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub voxel_sizes: Vec<f64>,
    pub n_views: usize,
    pub window: usize,
    pub lambda_multiplier: f64,
    pub d_max: f64,
    pub predictor: Mode,
    pub head: Mode,
    pub tau_vis: f64,
    pub logistic_a: f64,
    pub logistic_b: f64,
    pub loss_weights: Vec<f64>,
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
    pub metric_threshold_cm: f64,
    pub strategy: Strategy,
    pub threshold_theta: f64,
    pub ray_stride: usize,
    pub seed: u64,
    pub feature_channels: Vec<usize>,
    pub feature_provider: ProviderKind,
    pub image_scales: Vec<f64>,
    pub window_compat: bool,
    pub residual_upsample: Upsample,
    pub zero_residual: bool,
    pub mesh_absent: AbsentPolicy,
    pub sample_density: f64,
    pub cull_unseen_reference: bool,
    pub dump_kept_voxels: bool,
    pub external_dir: Option<PathBuf>,
    /// Scale applied to local occupancy of voxels nearest to one scene primitive.
    pub occupancy_attenuation: Option<(usize, f64)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            voxel_sizes: vec![0.16, 0.08, 0.04],
            n_views: 9,
            window: 9,
            lambda_multiplier: 3.0,
            d_max: 3.0,
            predictor: Mode::Oracle,
            head: Mode::Oracle,
            tau_vis: 0.1,
            logistic_a: 10.0,
            logistic_b: 0.5,
            loss_weights: vec![1.0, 0.8, 0.64],
            keyframe_translation: 0.1,
            keyframe_rotation_deg: 15.0,
            metric_threshold_cm: 5.0,
            strategy: Strategy::SlidingWindow,
            threshold_theta: 0.5,
            ray_stride: 1,
            seed: 0,
            feature_channels: vec![24, 16, 8],
            feature_provider: ProviderKind::Auto,
            image_scales: vec![0.25, 0.5, 1.0],
            window_compat: false,
            residual_upsample: Upsample::Nearest,
            zero_residual: false,
            mesh_absent: AbsentPolicy::Skip,
            sample_density: 10_000.0,
            cull_unseen_reference: true,
            dump_kept_voxels: false,
            external_dir: None,
            occupancy_attenuation: None,
        }
    }
}

fn list<T: std::str::FromStr>(field: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|e| Error::config(field, format!("`{t}`: {e}")))
        })
        .collect()
}

fn scalar<T: std::str::FromStr>(field: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse::<T>()
        .map_err(|e| Error::config(field, format!("`{v}`: {e}")))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn levels(&self) -> usize {
        self.voxel_sizes.len()
    }

    /// TSDF truncation at a 1-based level.
    pub fn lambda(&self, level: usize) -> f64 {
        self.lambda_multiplier * self.voxel_sizes[level - 1]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "voxel_sizes" => self.voxel_sizes = list(key, v)?,
            "n_views" => self.n_views = scalar(key, v)?,
            "window" => self.window = scalar(key, v)?,
            "lambda_multiplier" => self.lambda_multiplier = scalar(key, v)?,
            "d_max" => self.d_max = scalar(key, v)?,
            "predictor" => self.predictor = Mode::parse(key, v)?,
            "head" => self.head = Mode::parse(key, v)?,
            "tau_vis" => self.tau_vis = scalar(key, v)?,
            "logistic_a" => self.logistic_a = scalar(key, v)?,
            "logistic_b" => self.logistic_b = scalar(key, v)?,
            "loss_weights" => self.loss_weights = list(key, v)?,
            "keyframe_translation" => self.keyframe_translation = scalar(key, v)?,
            "keyframe_rotation_deg" => self.keyframe_rotation_deg = scalar(key, v)?,
            "metric_threshold_cm" => self.metric_threshold_cm = scalar(key, v)?,
            "strategy" => self.strategy = Strategy::parse(v)?,
            "threshold_theta" => self.threshold_theta = scalar(key, v)?,
            "ray_stride" => self.ray_stride = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "feature_channels" => self.feature_channels = list(key, v)?,
            "feature_provider" => self.feature_provider = ProviderKind::parse(v)?,
            "image_scales" => self.image_scales = list(key, v)?,
            "window_compat" => self.window_compat = scalar(key, v)?,
            "residual_upsample" => {
                self.residual_upsample = match v {
                    "nearest" => Upsample::Nearest,
                    "trilinear" => Upsample::Trilinear,
                    other => return Err(Error::config(key, format!("unknown upsampling `{other}`"))),
                }
            }
            "zero_residual" => self.zero_residual = scalar(key, v)?,
            "mesh_absent" => {
                self.mesh_absent = match v {
                    "skip" => AbsentPolicy::Skip,
                    "empty" => AbsentPolicy::Empty,
                    other => return Err(Error::config(key, format!("unknown policy `{other}`"))),
                }
            }
            "sample_density" => self.sample_density = scalar(key, v)?,
            "cull_unseen_reference" => self.cull_unseen_reference = scalar(key, v)?,
            "dump_kept_voxels" => self.dump_kept_voxels = scalar(key, v)?,
            "external_dir" => self.external_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "occupancy_attenuation" => {
                self.occupancy_attenuation = if v.is_empty() || v == "none" {
                    None
                } else {
                    let (i, f) = v
                        .split_once(':')
                        .ok_or_else(|| Error::config(key, "expected `<primitive index>:<factor>`"))?;
                    Some((scalar(key, i)?, scalar(key, f)?))
                }
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.voxel_sizes.len();
        if levels == 0 {
            return Err(Error::config("voxel_sizes", "at least one level is required"));
        }
        if self.voxel_sizes.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("voxel_sizes", "sizes must be positive"));
        }
        for w in self.voxel_sizes.windows(2) {
            if (w[0] - 2.0 * w[1]).abs() > 1e-12 * w[0] {
                return Err(Error::config(
                    "voxel_sizes",
                    "each level must halve the previous voxel size",
                ));
            }
        }
        for (field, len) in [
            ("feature_channels", self.feature_channels.len()),
            ("image_scales", self.image_scales.len()),
            ("loss_weights", self.loss_weights.len()),
        ] {
            if len != levels {
                return Err(Error::config(field, format!("needs one entry per level ({levels})")));
            }
        }
        if self.feature_channels.iter().any(|&c| c < 3) {
            return Err(Error::config(
                "feature_channels",
                "each level needs at least 3 channels",
            ));
        }
        if self.image_scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::config("image_scales", "scales must lie in (0, 1]"));
        }
        let positive = [
            ("lambda_multiplier", self.lambda_multiplier),
            ("d_max", self.d_max),
            ("keyframe_translation", self.keyframe_translation),
            ("keyframe_rotation_deg", self.keyframe_rotation_deg),
            ("metric_threshold_cm", self.metric_threshold_cm),
            ("sample_density", self.sample_density),
        ];
        for (field, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_views < 2 {
            return Err(Error::config("n_views", "a fragment needs at least 2 keyframes"));
        }
        if self.window < 1 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.ray_stride < 1 {
            return Err(Error::config("ray_stride", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold_theta) {
            return Err(Error::config("threshold_theta", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau_vis) {
            return Err(Error::config("tau_vis", "must lie in [0, 1]"));
        }
        if (self.predictor == Mode::External || self.head == Mode::External) && self.external_dir.is_none() {
            return Err(Error::config("external_dir", "external mode needs a sidecar directory"));
        }
        if let Some((_, f)) = self.occupancy_attenuation {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("occupancy_attenuation", "factor must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("voxel_sizes", join(&self.voxel_sizes));
        kv("n_views", self.n_views.to_string());
        kv("window", self.window.to_string());
        kv("lambda_multiplier", self.lambda_multiplier.to_string());
        kv("d_max", self.d_max.to_string());
        kv("predictor", self.predictor.as_str().into());
        kv("head", self.head.as_str().into());
        kv("tau_vis", self.tau_vis.to_string());
        kv("logistic_a", self.logistic_a.to_string());
        kv("logistic_b", self.logistic_b.to_string());
        kv("loss_weights", join(&self.loss_weights));
        kv("keyframe_translation", self.keyframe_translation.to_string());
        kv("keyframe_rotation_deg", self.keyframe_rotation_deg.to_string());
        kv("metric_threshold_cm", self.metric_threshold_cm.to_string());
        kv("strategy", self.strategy.as_str().into());
        kv("threshold_theta", self.threshold_theta.to_string());
        kv("ray_stride", self.ray_stride.to_string());
        kv("seed", self.seed.to_string());
        kv("feature_channels", join(&self.feature_channels));
        kv("feature_provider", self.feature_provider.as_str().into());
        kv("image_scales", join(&self.image_scales));
        kv("window_compat", self.window_compat.to_string());
        kv(
            "residual_upsample",
            match self.residual_upsample {
                Upsample::Nearest => "nearest",
                Upsample::Trilinear => "trilinear",
            }
            .into(),
        );
        kv("zero_residual", self.zero_residual.to_string());
        kv(
            "mesh_absent",
            match self.mesh_absent {
                AbsentPolicy::Skip => "skip",
                AbsentPolicy::Empty => "empty",
            }
            .into(),
        );
        kv("sample_density", self.sample_density.to_string());
        kv("cull_unseen_reference", self.cull_unseen_reference.to_string());
        kv("dump_kept_voxels", self.dump_kept_voxels.to_string());
        if let Some(d) = &self.external_dir {
            kv("external_dir", d.display().to_string());
        }
        if let Some((i, f)) = self.occupancy_attenuation {
            kv("occupancy_attenuation", format!("{i}:{f}"));
        }
        s
    }
}
