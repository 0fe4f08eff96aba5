//! Fragment-by-fragment reconstruction driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, PipelineConfig, ProviderKind};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, sample_mesh, sample_scene, ReconMetrics};
use crate::features::{ConstantFeatures, DepthFeatures, FeatureProvider, PhotometricFeatures, SceneFeatures};
use crate::fragmenter::{assemble_fragments, load_dataset, select_keyframes, Fragment, FrameRecord};
use crate::geometry::{CameraIntrinsics, CameraPose, FeatureMap};
use crate::global_fusion::{
    compose_residual, gru_fuse, read_params_sidecar, total_loss, upsample_tsdf, GlobalVolume, LevelLosses, LevelParams,
};
use crate::grid::SparseVoxelGrid;
use crate::local_fusion::{
    backproject_features, fuse_features, ground_truth_visibility, loss_occupancy, loss_tsdf, loss_visibility,
    pairwise_similarity, predict_local_heads, predict_visibility, read_visibility_sidecar, LocalHead,
    VisibilityPredictor,
};
use crate::sparsifier::{upsample_voxels, write_keep_dump, RaySparsifier};
use crate::surface::{export_ply, marching_cubes, TriangleMesh};
use crate::synthscene::{gt_tsdf, GroundTruthScene};

/// Where the frames come from.
#[derive(Clone, Debug)]
pub enum Source {
    /// Analytic scene rendered along its own trajectory; also the evaluation reference.
    Scene(GroundTruthScene),
    /// Directory with `intrinsics.txt`, `poses.txt` and per-frame depth/colour PNGs.
    Dataset(PathBuf),
}

impl Source {
    pub fn frames(&self) -> Result<Vec<FrameRecord>> {
        match self {
            Source::Scene(scene) => Ok(scene
                .camera_poses()?
                .into_iter()
                .enumerate()
                .map(|(i, pose)| FrameRecord::new(i as u64, scene.intrinsics, pose))
                .collect()),
            Source::Dataset(dir) => load_dataset(dir),
        }
    }

    pub fn scene(&self) -> Option<&GroundTruthScene> {
        match self {
            Source::Scene(s) => Some(s),
            Source::Dataset(_) => None,
        }
    }
}

/// Wall-clock milliseconds per stage of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub features: f64,
    pub backproject: f64,
    pub visibility: f64,
    pub heads: f64,
    pub sparsify: f64,
    pub global: f64,
}

impl StageTimings {
    const NAMES: [&'static str; 6] = ["features", "backproject", "visibility", "heads", "sparsify", "global"];

    fn values(&self) -> [f64; 6] {
        [
            self.features,
            self.backproject,
            self.visibility,
            self.heads,
            self.sparsify,
            self.global,
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub voxels_before: usize,
    pub voxels_after: usize,
    /// Kept voxels whose coarser parent was never written.
    pub missing_parents: usize,
    pub losses: Option<LevelLosses>,
    pub timings: StageTimings,
    /// Lattice coordinates written to the global volume, in write order.
    #[serde(skip)]
    pub committed: Vec<[i32; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FragmentReport {
    pub index: usize,
    pub frame_ids: Vec<u64>,
    pub levels: Vec<LevelReport>,
    pub total_loss: Option<f64>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Reconstructor {
    config: PipelineConfig,
    scene: Option<Arc<GroundTruthScene>>,
    provider: Box<dyn FeatureProvider>,
    params: Vec<LevelParams>,
    fragments: Vec<Fragment>,
    next: usize,
    global: GlobalVolume,
    reports: Vec<FragmentReport>,
    dump_dir: Option<PathBuf>,
}

impl Reconstructor {
    pub fn new(config: PipelineConfig, source: &Source) -> Result<Self> {
        config.validate()?;
        let scene = source.scene().cloned().map(Arc::new);
        if scene.is_none() {
            if config.predictor == Mode::Oracle {
                return Err(Error::config("predictor", "oracle visibility needs an analytic scene"));
            }
            if config.head == Mode::Oracle {
                return Err(Error::config("head", "oracle heads need an analytic scene"));
            }
            if config.occupancy_attenuation.is_some() {
                return Err(Error::config("occupancy_attenuation", "needs an analytic scene"));
            }
        }
        if let (Some((idx, _)), Some(s)) = (config.occupancy_attenuation, &scene) {
            if idx >= s.primitives.len() {
                return Err(Error::config(
                    "occupancy_attenuation",
                    format!("scene has no primitive {idx}"),
                ));
            }
        }
        let provider: Box<dyn FeatureProvider> = match (config.feature_provider, &scene) {
            (ProviderKind::Auto | ProviderKind::DepthOracle, Some(s)) => Box::new(SceneFeatures {
                scene: s.clone(),
                d_max: config.d_max,
            }),
            (ProviderKind::DepthOracle, None) => {
                return Err(Error::config(
                    "feature_provider",
                    "depth-oracle needs an analytic scene",
                ))
            }
            (ProviderKind::Auto | ProviderKind::Depth, _) => Box::new(DepthFeatures),
            (ProviderKind::Photometric, _) => Box::new(PhotometricFeatures),
            (ProviderKind::Constant, _) => Box::new(ConstantFeatures(1.0)),
        };
        let params = (1..=config.levels())
            .map(|l| {
                let c = config.feature_channels[l - 1];
                match (&config.external_dir, config.head) {
                    (Some(dir), Mode::External) => {
                        let p = read_params_sidecar(&dir.join(format!("level{l}.vfg")))?;
                        if p.level as usize != l || p.channels() != c {
                            return Err(Error::config(
                                "external_dir",
                                format!("level{l}.vfg holds level {} with {} channels", p.level, p.channels()),
                            ));
                        }
                        Ok(p)
                    }
                    _ => Ok(LevelParams::seeded(l as u8, c, config.seed)),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let frames = source.frames()?;
        let ids = select_keyframes(&frames, config.keyframe_translation, config.keyframe_rotation_deg);
        let keyframes: Vec<FrameRecord> = frames.into_iter().filter(|f| ids.contains(&f.frame_id)).collect();
        let fragments = assemble_fragments(&keyframes, config.n_views, &config.voxel_sizes, config.d_max)?;
        log::info!("{} keyframes, {} fragments", keyframes.len(), fragments.len());

        Ok(Reconstructor {
            global: GlobalVolume::new(&config.feature_channels),
            config,
            scene,
            provider,
            params,
            fragments,
            next: 0,
            reports: Vec::new(),
            dump_dir: None,
        })
    }

    /// Writes each level's kept-voxel set to `dir` while integrating.
    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn integrated(&self) -> usize {
        self.next
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.fragments.len()
    }

    pub fn global(&self) -> &GlobalVolume {
        &self.global
    }

    pub fn reports(&self) -> &[FragmentReport] {
        &self.reports
    }

    pub fn integrate_next(&mut self) -> Result<Option<&FragmentReport>> {
        if self.is_done() {
            return Ok(None);
        }
        let fragment = self.fragments[self.next].clone();
        let report = self.integrate(&fragment)?;
        self.next += 1;
        self.reports.push(report);
        Ok(self.reports.last())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.integrate_next()?.is_some() {}
        Ok(())
    }

    fn feature_maps(&self, fragment: &Fragment, k: &[CameraIntrinsics], channels: usize) -> Result<Vec<FeatureMap>> {
        fragment
            .keyframes
            .par_iter()
            .zip(k)
            .map(|(f, k)| self.provider.features(f, k, channels))
            .collect()
    }

    fn integrate(&mut self, fragment: &Fragment) -> Result<FragmentReport> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let scene = self.scene.as_deref();
        let mut reports = Vec::with_capacity(levels);
        let mut grid = SparseVoxelGrid::full(fragment.fbv[0]);
        for l in 1..=levels {
            let spec = fragment.fbv[l - 1];
            let channels = cfg.feature_channels[l - 1];
            let lambda = cfg.lambda(l);
            let mut t = StageTimings::default();
            let mut report = LevelReport {
                level: l,
                voxels_before: grid.len(),
                voxels_after: 0,
                missing_parents: 0,
                losses: None,
                timings: t,
                committed: Vec::new(),
            };
            if grid.is_empty() {
                reports.push(report);
                if l < levels {
                    grid = SparseVoxelGrid::from_indices(fragment.fbv[l], std::iter::empty());
                }
                continue;
            }

            let clock = Instant::now();
            let k_l = fragment
                .keyframes
                .iter()
                .map(|f| f.intrinsics.scaled(cfg.image_scales[l - 1]))
                .collect::<Result<Vec<_>>>()?;
            let cameras: Vec<(CameraIntrinsics, CameraPose)> =
                k_l.iter().zip(&fragment.keyframes).map(|(k, f)| (*k, f.pose)).collect();
            let maps = self.feature_maps(fragment, &k_l, channels)?;
            t.features = ms(clock);

            let clock = Instant::now();
            let fv = backproject_features(&grid, &maps, &cameras)?;
            drop(maps);
            let sv = pairwise_similarity(&fv);
            t.backproject = ms(clock);

            let clock = Instant::now();
            let gt_vis = scene.map(|s| ground_truth_visibility(&grid, &cameras, s, lambda));
            let external_vis;
            let predictor = match cfg.predictor {
                Mode::Oracle => VisibilityPredictor::Oracle(gt_vis.as_ref().expect("checked at construction")),
                Mode::Heuristic => VisibilityPredictor::Heuristic { tau_vis: cfg.tau_vis },
                Mode::External => {
                    let dir = cfg.external_dir.as_ref().expect("validated");
                    let path = dir.join(format!("frag{}_level{l}.vfw", fragment.index));
                    let (lvl, w) = read_visibility_sidecar(&path)?;
                    if lvl as usize != l {
                        return Err(Error::config(
                            "external_dir",
                            format!("{} holds level {lvl}", path.display()),
                        ));
                    }
                    external_vis = w;
                    VisibilityPredictor::External(&external_vis)
                }
            };
            let w = predict_visibility(&sv, &fv.valid, predictor)?;
            let fused = fuse_features(&fv, &w)?;
            drop(fv);
            t.visibility = ms(clock);

            let clock = Instant::now();
            let params = &self.params[l - 1];
            let head = match cfg.head {
                Mode::Oracle => LocalHead::Oracle { scene, lambda },
                Mode::Heuristic => LocalHead::Heuristic {
                    logistic_a: cfg.logistic_a,
                    logistic_b: cfg.logistic_b,
                    lambda,
                    window: cfg.window,
                    stride: cfg.ray_stride,
                    d_max: cfg.d_max,
                },
                Mode::External => LocalHead::External {
                    occupancy: &params.local_occupancy,
                    tsdf: &params.local_tsdf,
                },
            };
            let mut local = predict_local_heads(&fused, &sv, &w, &grid, &cameras, &head)?;
            if let (Some((idx, factor)), Some(s)) = (cfg.occupancy_attenuation, scene) {
                local.occupancy.par_iter_mut().enumerate().for_each(|(i, o)| {
                    if s.sdf_and_primitive(&grid.center(i)).1 == idx {
                        *o = (*o as f64 * factor) as f32;
                    }
                });
            }
            t.heads = ms(clock);

            let clock = Instant::now();
            let sparsifier = RaySparsifier {
                strategy: cfg.strategy,
                window: cfg.window,
                stride: cfg.ray_stride,
                d_max: cfg.d_max,
                theta: cfg.threshold_theta,
                compat: cfg.window_compat,
            };
            let kept = sparsifier.run(&grid, &local.occupancy, &cameras);
            if let Some(dir) = &self.dump_dir {
                write_keep_dump(&dir.join(format!("frag{}_level{l}.keep", fragment.index)), &grid, &kept)?;
            }
            let kept_idx: Vec<usize> = (0..grid.len()).filter(|&i| kept[i]).collect();
            report.voxels_after = kept_idx.len();
            t.sparsify = ms(clock);

            let clock = Instant::now();
            let coords: Vec<[i32; 3]> = kept_idx.iter().map(|&i| grid.lattice(i)).collect();
            let local_feats: Vec<f32> = kept_idx
                .iter()
                .flat_map(|&i| fused.feature(i).iter().copied())
                .collect();
            let hidden = self.global.level(l).gather_hidden(&coords);
            let fused_global = gru_fuse(&local_feats, &hidden, &params.gru)?;
            let (up, missing) = if l == 1 {
                (vec![0.0f32; coords.len()], 0)
            } else {
                upsample_tsdf(self.global.level(l - 1), &coords, cfg.residual_upsample)
            };
            report.missing_parents = missing;
            let gt_kept = scene.map(|s| {
                let kept_grid = SparseVoxelGrid::from_indices(spec, kept_idx.iter().map(|&i| grid.voxels()[i]));
                gt_tsdf(s, &kept_grid, lambda)
            });
            let delta: Vec<f32> = if cfg.zero_residual {
                vec![0.0; coords.len()]
            } else {
                match cfg.head {
                    Mode::Oracle => {
                        let (gt, _) = gt_kept.as_ref().expect("checked at construction");
                        gt.iter()
                            .zip(&up)
                            .map(|(&g, &u)| (g as f64 - u as f64) as f32)
                            .collect()
                    }
                    Mode::Heuristic => kept_idx
                        .iter()
                        .zip(&up)
                        .map(|(&i, &u)| (local.tsdf[i] as f64 - u as f64) as f32)
                        .collect(),
                    Mode::External => fused_global
                        .chunks(channels)
                        .map(|g| (params.global_tsdf.apply(g) as f64).tanh() as f32)
                        .collect(),
                }
            };
            let tsdf = compose_residual(&up, &delta)?;

            if let (Some(s), Some(gt_vis), Some((gt_k, occ_k))) = (scene, &gt_vis, &gt_kept) {
                let (gt_all, occ_all) = gt_tsdf(s, &grid, lambda);
                let global_occ: Vec<f32> = tsdf.iter().map(|v| 1.0 - v.abs()).collect();
                report.losses = Some(LevelLosses {
                    visibility: loss_visibility(&w, gt_vis)?,
                    occupancy: loss_occupancy(&local.occupancy, &occ_all)?,
                    tsdf: loss_tsdf(&local.tsdf, &gt_all)?,
                    global_occupancy: loss_occupancy(&global_occ, occ_k)?,
                    global_tsdf: loss_tsdf(&tsdf, gt_k)?,
                });
            }
            self.global.update_global(l, &coords, &fused_global, &tsdf)?;
            t.global = ms(clock);

            report.timings = t;
            report.committed = coords;
            reports.push(report);
            if l < levels {
                grid = upsample_voxels(&grid, &kept, &fragment.fbv[l])?;
            }
        }
        let total = reports
            .iter()
            .map(|r| r.losses)
            .collect::<Option<Vec<_>>>()
            .map(|ls| total_loss(&ls, &cfg.loss_weights))
            .transpose()?;
        let summary: Vec<String> = reports
            .iter()
            .map(|r| format!("{}->{}", r.voxels_before, r.voxels_after))
            .collect();
        log::info!("fragment {}: voxels {}", fragment.index, summary.join(", "));
        Ok(FragmentReport {
            index: fragment.index,
            frame_ids: fragment.keyframes.iter().map(|f| f.frame_id).collect(),
            levels: reports,
            total_loss: total,
        })
    }

    /// Zero level set of the finest global level.
    pub fn extract_mesh(&self) -> TriangleMesh {
        let l = self.config.levels();
        let level = self.global.level(l);
        marching_cubes(
            level,
            level.coords(),
            self.config.voxel_sizes[l - 1],
            0.0,
            self.config.mesh_absent,
        )
    }

    /// Full-resolution cameras of every keyframe integrated so far.
    pub fn used_cameras(&self) -> Vec<(CameraIntrinsics, CameraPose)> {
        self.fragments[..self.next].iter().flat_map(|f| f.cameras()).collect()
    }

    /// Metrics against the analytic scene; `None` for datasets.
    pub fn metrics(&self, mesh: &TriangleMesh) -> Result<Option<ReconMetrics>> {
        let Some(scene) = &self.scene else {
            return Ok(None);
        };
        let cfg = &self.config;
        let cameras = self.used_cameras();
        let views = cfg.cull_unseen_reference.then_some((cameras.as_slice(), cfg.d_max));
        let gt = sample_scene(scene, cfg.sample_density, cfg.seed, views)?;
        let pred = sample_mesh(mesh, cfg.sample_density, cfg.seed.wrapping_add(1))?;
        compute_metrics(&pred, &gt, cfg.metric_threshold_cm).map(Some)
    }

    /// Tab-separated per-fragment log with a `#` header line.
    pub fn log_text(&self) -> String {
        let mut s = String::from("# fragment\tfirst_frame\tlast_frame");
        let levels = self.config.levels();
        for l in 1..=levels {
            let _ = write!(s, "\tl{l}_before\tl{l}_after\tl{l}_missing_parents");
        }
        for l in 1..=levels {
            for term in ["vis", "occ", "tsdf", "gocc", "gtsdf"] {
                let _ = write!(s, "\tl{l}_loss_{term}");
            }
        }
        s.push_str("\tloss_total");
        for l in 1..=levels {
            for name in StageTimings::NAMES {
                let _ = write!(s, "\tl{l}_ms_{name}");
            }
        }
        s.push('\n');
        for r in &self.reports {
            let _ = write!(
                s,
                "{}\t{}\t{}",
                r.index,
                r.frame_ids.first().copied().unwrap_or(0),
                r.frame_ids.last().copied().unwrap_or(0)
            );
            for lr in &r.levels {
                let _ = write!(s, "\t{}\t{}\t{}", lr.voxels_before, lr.voxels_after, lr.missing_parents);
            }
            for lr in &r.levels {
                match &lr.losses {
                    Some(x) => {
                        for v in [x.visibility, x.occupancy, x.tsdf, x.global_occupancy, x.global_tsdf] {
                            let _ = write!(s, "\t{v:.6}");
                        }
                    }
                    None => s.push_str("\t-\t-\t-\t-\t-"),
                }
            }
            match r.total_loss {
                Some(v) => {
                    let _ = write!(s, "\t{v:.6}");
                }
                None => s.push_str("\t-"),
            }
            for lr in &r.levels {
                for v in lr.timings.values() {
                    let _ = write!(s, "\t{v:.3}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        self.global.to_checkpoint()
    }

    /// Writes `mesh.ply`, `fragments.log` and, with a reference scene, `metrics.json`.
    pub fn write_outputs(&self, dir: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mesh = self.extract_mesh();
        export_ply(&mesh, &dir.join("mesh.ply"))?;
        let log_path = dir.join("fragments.log");
        std::fs::write(&log_path, self.log_text()).map_err(|e| Error::io(&log_path, e))?;
        let metrics = if mesh.is_empty() {
            log::warn!("empty mesh, no metrics written");
            None
        } else {
            self.metrics(&mesh)?
        };
        if let Some(m) = &metrics {
            let path = dir.join("metrics.json");
            std::fs::write(&path, m.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunSummary {
            fragments: self.next,
            vertices: mesh.vertices.len(),
            triangles: mesh.triangles.len(),
            metrics,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fragments: usize,
    pub vertices: usize,
    pub triangles: usize,
    pub metrics: Option<ReconMetrics>,
}

/// Integrates every fragment and writes the outputs to `out`.
pub fn run_pipeline(config: PipelineConfig, source: &Source, out: &Path) -> Result<RunSummary> {
    let mut rec = Reconstructor::new(config, source)?;
    if rec.config().dump_kept_voxels {
        let dir = out.join("kept");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        rec.set_dump_dir(Some(dir));
    }
    rec.run()?;
    rec.write_outputs(out)
}

pub const ABLATION_HEADER: &str =
    "label,strategy,predictor,head,acc_cm,comp_cm,chamfer_cm,prec,recall,fscore,kept_voxels,runtime_ms";

/// One CSV row per labelled configuration. Metric columns are empty without a reference scene.
pub fn ablation_report(runs: &[(String, PipelineConfig)], source: &Source) -> Result<String> {
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for (label, cfg) in runs {
        if label.contains(',') {
            return Err(Error::InvalidInput(format!(
                "ablation label `{label}` contains a comma"
            )));
        }
        let clock = Instant::now();
        let mut rec = Reconstructor::new(cfg.clone(), source)?;
        rec.run()?;
        let mesh = rec.extract_mesh();
        let metrics = if mesh.is_empty() { None } else { rec.metrics(&mesh)? };
        let kept: Vec<String> = (0..cfg.levels())
            .map(|l| {
                rec.reports
                    .iter()
                    .map(|r| r.levels[l].voxels_after)
                    .sum::<usize>()
                    .to_string()
            })
            .collect();
        let m = metrics.map_or_else(
            || ",,,,,".to_string(),
            |m| {
                format!(
                    "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    m.acc, m.comp, m.chamfer, m.prec, m.recall, m.fscore
                )
            },
        );
        let _ = writeln!(
            csv,
            "{label},{},{},{},{m},{},{:.0}",
            cfg.strategy.as_str(),
            cfg.predictor.as_str(),
            cfg.head.as_str(),
            kept.join(" "),
            ms(clock)
        );
    }
    Ok(csv)
}
