//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any hard criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visrecon_core::config::PipelineConfig;
use visrecon_core::evaluation::{compute_metrics, Point, ReconMetrics};
use visrecon_core::geometry::{traverse_ray, CameraIntrinsics, CameraPose, Ray, Vec3, VoxelGridSpec};
use visrecon_core::global_fusion::{gru_fuse, GruParams, MISSING_PARENT_TSDF};
use visrecon_core::grid::SparseVoxelGrid;
use visrecon_core::local_fusion::{
    ground_truth_visibility, loss_occupancy, loss_tsdf, loss_visibility, VisibilityWeights,
};
use visrecon_core::pipeline::{run_pipeline, Reconstructor, Source};
use visrecon_core::sparsifier::{select_window, threshold_sparsify, RaySparsifier, Strategy};
use visrecon_core::synthscene::{gt_tsdf, GroundTruthScene};

mod common;

use common::{box_oracle, brute_window, gru_candidate};

enum Verdict {
    Pass(String),
    Fail(String),
    Warn(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn sliding_window() -> Verdict {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = [0.0f32, 0.25, 0.5, 1.0];
    let mut mismatches = 0;
    for i in 0..10_000 {
        let r = rng.random_range(1..=64);
        let k = rng.random_range(1..=16);
        // half the instances draw from a coarse alphabet so ties are common
        let occ: Vec<f32> = (0..r)
            .map(|_| {
                if i % 2 == 0 {
                    levels[rng.random_range(0..4)]
                } else {
                    rng.random()
                }
            })
            .collect();
        let sel = select_window(&occ, k).unwrap();
        if (sel.start, sel.sum) != brute_window(&occ, k) {
            mismatches += 1;
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 5.0,
        format!("10000 instances, {mismatches} mismatches, {secs:.2} s"),
    )
}

fn ray_traversal() -> Verdict {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for i in 0..10_000 {
        let grid = VoxelGridSpec {
            origin: [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
            voxel_size: rng.random_range(0.05..0.6),
            dims: [
                rng.random_range(1..=10),
                rng.random_range(1..=10),
                rng.random_range(1..=10),
            ],
            level: 1,
        };
        let origin = Vec3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        );
        // most rays aim at a point inside the grid so the comparison is not dominated by misses
        let mut dir = if i % 5 == 0 {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        } else {
            let target =
                Vec3::from_fn(|a, _| grid.origin[a] + rng.random::<f64>() * grid.dims[a] as f64 * grid.voxel_size);
            target - origin
        };
        if i % 10 == 0 {
            dir[rng.random_range(0..3)] = 0.0;
        }
        if dir.norm() < 1e-3 {
            dir = Vec3::new(0.3, -0.5, 0.8);
        }
        let t_min = if i % 3 == 0 { rng.random_range(0.0..2.0) } else { 0.0 };
        let ray = Ray {
            origin,
            direction: dir.normalize(),
            t_min,
            t_max: t_min + rng.random_range(0.1..12.0),
        };
        let got = traverse_ray(&grid, &ray);
        if !got.is_empty() {
            nonempty += 1;
        }
        if got != box_oracle(&grid, &ray) {
            mismatches += 1;
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 30.0,
        format!("10000 rays ({nonempty} hit the grid), {mismatches} mismatches, {secs:.2} s"),
    )
}

fn level_cameras(fragment_cams: &[(CameraIntrinsics, CameraPose)], scale: f64) -> Vec<(CameraIntrinsics, CameraPose)> {
    fragment_cams
        .iter()
        .map(|(k, p)| (k.scaled(scale).unwrap(), *p))
        .collect()
}

fn visibility_oracle() -> Verdict {
    let clock = Instant::now();
    let scene = GroundTruthScene::sphere_orbit();
    let cfg = PipelineConfig::default();
    let rec = Reconstructor::new(cfg.clone(), &Source::Scene(scene.clone())).unwrap();
    let (mut pairs, mut agree) = (0usize, 0usize);
    for fragment in rec.fragments() {
        let grid = SparseVoxelGrid::full(fragment.fbv[0]);
        let cams = level_cameras(&fragment.cameras(), cfg.image_scales[0]);
        let lambda = cfg.lambda(1);
        let w = ground_truth_visibility(&grid, &cams, &scene, lambda);
        let step = 1e-4;
        let margin = 0.5 * grid.spec().voxel_size;
        for d in 0..grid.len() {
            let c = grid.center(d);
            let occupied = scene.sdf(&c).abs() < lambda;
            for (n, (k, pose)) in cams.iter().enumerate() {
                pairs += 1;
                let expected = occupied && {
                    let pc = pose.to_camera(&c);
                    let in_view = pc.z > 0.0 && {
                        let u = k.fx * pc.x / pc.z + k.cx;
                        let v = k.fy * pc.y / pc.z + k.cy;
                        (0.0..k.width as f64).contains(&u) && (0.0..k.height as f64).contains(&v)
                    };
                    in_view && {
                        let eye = pose.center();
                        let dist = (c - eye).norm();
                        let dir = (c - eye) / dist;
                        let reach = dist - margin;
                        let steps = (reach / step).floor().max(0.0) as usize;
                        !(0..=steps).any(|i| scene.sdf(&(eye + dir * (i as f64 * step))) < 0.0)
                    }
                };
                if (w.row(d)[n] == 1.0) == expected {
                    agree += 1;
                }
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let rate = agree as f64 / pairs as f64;
    verdict(
        rate >= 0.999 && secs < 60.0,
        format!(
            "{agree}/{pairs} (voxel, view) pairs agree ({:.4}%), {secs:.1} s",
            rate * 100.0
        ),
    )
}

fn loss_fixed_points() -> Verdict {
    let gt = VisibilityWeights {
        voxels: 2,
        views: 3,
        w: vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    };
    let at_fixed = loss_visibility(&gt.normalized(), &gt).unwrap();
    let single = VisibilityWeights {
        voxels: 1,
        views: 3,
        w: vec![1.0, 1.0, 0.0],
    };
    let pred = VisibilityWeights {
        voxels: 1,
        views: 3,
        w: vec![1.0, 0.0, 0.0],
    };
    let vis = loss_visibility(&pred, &single).unwrap();
    let occ_fixed = loss_occupancy(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap();
    let occ_half = loss_occupancy(&[0.5; 4], &[true, false, false, true]).unwrap();
    let tsdf_fixed = loss_tsdf(&[0.3, -0.7, 1.0], &[0.3, -0.7, 1.0]).unwrap();
    let tsdf_one = loss_tsdf(&[1.0], &[0.0]).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let ok = at_fixed == 0.0
        && occ_fixed <= 1e-6
        && tsdf_fixed == 0.0
        && (vis - 1.0 / 6.0).abs() < 1e-9
        && (occ_half - ln2).abs() < 1e-9
        && (tsdf_one - ln2).abs() < 1e-9;
    verdict(
        ok,
        format!(
            "fixed points ({at_fixed}, {occ_fixed:.1e}, {tsdf_fixed}); examples ({vis:.12}, {occ_half:.12}, {tsdf_one:.12})"
        ),
    )
}

fn residual_identity() -> Verdict {
    let cfg = PipelineConfig {
        zero_residual: true,
        ..PipelineConfig::default()
    };
    let mut rec = Reconstructor::new(cfg, &Source::Scene(GroundTruthScene::room())).unwrap();
    let (mut checked, mut bad) = (0usize, 0usize);
    while let Some(report) = rec.integrate_next().unwrap() {
        let report = report.clone();
        for lr in &report.levels {
            for c in &lr.committed {
                let fine = rec.global().level(lr.level).tsdf(c).unwrap();
                let expected = if lr.level == 1 {
                    0.0
                } else {
                    let parent = c.map(|x| x.div_euclid(2));
                    rec.global()
                        .level(lr.level - 1)
                        .tsdf(&parent)
                        .unwrap_or(MISSING_PARENT_TSDF)
                };
                checked += 1;
                if fine.to_bits() != expected.to_bits() {
                    bad += 1;
                }
            }
        }
    }
    verdict(
        bad == 0 && checked > 0,
        format!("{checked} voxels over {} fragments, {bad} differ", rec.integrated()),
    )
}

fn gru_recurrence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = 8;
    let voxels = 64;
    let local: Vec<f32> = (0..voxels * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let global: Vec<f32> = (0..voxels * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut p = GruParams::seeded(c, 99);
    p.b_r = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.b_h = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();

    p.b_z = vec![-1e4; c];
    let pass = gru_fuse(&local, &global, &p).unwrap();
    let pass_ok = pass.iter().zip(&global).all(|(a, b)| a.to_bits() == b.to_bits());

    p.b_z = vec![1e4; c];
    let over = gru_fuse(&local, &global, &p).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut over_ok = true;
    for v in 0..voxels {
        let (l, g) = (&local[v * c..(v + 1) * c], &global[v * c..(v + 1) * c]);
        for (i, h) in gru_candidate(&p, l, g).into_iter().enumerate() {
            over_ok &= over[v * c + i].to_bits() == (h as f32).to_bits();
        }
    }

    let hand = gru_fuse(&[0.5], &[0.0], &GruParams::constant(1, 1.0, 0.0)).unwrap()[0] as f64;
    let derived = sig(0.5) * 0.5f64.tanh();
    let hand_ok = (hand - derived).abs() < 1e-6;
    verdict(
        pass_ok && over_ok && hand_ok,
        format!(
            "pass-through bitwise {pass_ok}, overwrite bitwise {over_ok}, C=1 example {hand:.7} vs sigma(0.5)*tanh(0.5) = {derived:.7}"
        ),
    )
}

/// Coarse voxels holding the first hit of a pixel ray whose first hit is primitive `prim`.
fn first_hit_voxels(
    scene: &GroundTruthScene,
    grid: &SparseVoxelGrid,
    cams: &[(CameraIntrinsics, CameraPose)],
    d_max: f64,
    prim: usize,
) -> HashSet<usize> {
    let spec = grid.spec();
    let mut out = HashSet::new();
    for (k, pose) in cams {
        for v in 0..k.height {
            for u in 0..k.width {
                let ray = Ray::through_pixel(k, pose, u as f64, v as f64, d_max);
                let Some(t) = scene.trace(&ray) else { continue };
                let p = ray.at(t);
                if scene.sdf_and_primitive(&p).1 != prim {
                    continue;
                }
                let lattice = [0, 1, 2].map(|a| (p[a] / spec.voxel_size).floor() as i32);
                if let Some(i) = spec.from_lattice(lattice).and_then(|idx| grid.index_of(idx)) {
                    out.insert(i);
                }
            }
        }
    }
    out
}

const POLE: usize = 2;

fn thin_structure() -> Verdict {
    let scene = GroundTruthScene::room();
    let cfg = PipelineConfig::default();
    let rec = Reconstructor::new(cfg.clone(), &Source::Scene(scene.clone())).unwrap();
    let (mut total, mut sw, mut tk, mut th) = (0usize, 0usize, 0usize, 0usize);
    for fragment in rec.fragments() {
        let grid = SparseVoxelGrid::full(fragment.fbv[0]);
        let cams = level_cameras(&fragment.cameras(), cfg.image_scales[0]);
        let (_, occupied) = gt_tsdf(&scene, &grid, cfg.lambda(1));
        let occ: Vec<f32> = occupied
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let base = if o { 1.0f64 } else { 0.0 };
                let f = if scene.sdf_and_primitive(&grid.center(i)).1 == POLE {
                    0.4
                } else {
                    1.0
                };
                (base * f) as f32
            })
            .collect();
        let pole = first_hit_voxels(&scene, &grid, &cams, cfg.d_max, POLE);
        let mut s = RaySparsifier::sliding_window(cfg.window, 1, cfg.d_max);
        let sliding = s.run(&grid, &occ, &cams);
        s.strategy = Strategy::TopK;
        let topk = s.run(&grid, &occ, &cams);
        let thresh = threshold_sparsify(&occ, 0.5);
        total += pole.len();
        sw += pole.iter().filter(|&&i| sliding[i]).count();
        tk += pole.iter().filter(|&&i| topk[i]).count();
        th += pole.iter().filter(|&&i| thresh[i]).count();
    }
    let pct = |n: usize| 100.0 * n as f64 / total.max(1) as f64;
    let (psw, ptk, pth) = (pct(sw), pct(tk), pct(th));
    verdict(
        total > 0 && psw >= 90.0 && pth < 20.0 && ptk >= psw - 10.0,
        format!("{total} pole voxels; sliding window {psw:.1}%, top-k {ptk:.1}%, threshold {pth:.1}%"),
    )
}

fn metric_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..0.5),
                ]
            })
            .collect()
    };
    let a = cloud(&mut rng, 500);
    let b = cloud(&mut rng, 700);
    let close = |x: f64, y: f64| (x - y).abs() < 1e-9;

    let id = compute_metrics(&a, &a, 5.0).unwrap();
    let identity =
        id.acc == 0.0 && id.comp == 0.0 && id.chamfer == 0.0 && id.prec == 1.0 && id.recall == 1.0 && id.fscore == 1.0;

    let one = compute_metrics(&[[0.0, 0.0, 0.0]], &[[0.03, 0.0, 0.0]], 5.0).unwrap();
    let single =
        close(one.acc, 3.0) && close(one.comp, 3.0) && one.prec == 1.0 && one.recall == 1.0 && one.fscore == 1.0;

    let ab = compute_metrics(&a, &b, 5.0).unwrap();
    let ba = compute_metrics(&b, &a, 5.0).unwrap();
    let symmetric = close(ab.acc, ba.comp)
        && close(ab.comp, ba.acc)
        && close(ab.prec, ba.recall)
        && close(ab.recall, ba.prec)
        && close(ab.chamfer, ba.chamfer)
        && close(ab.fscore, ba.fscore);

    let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
    let shift = Vec3::new(4.0, -2.5, 1.0);
    let move_cloud = |c: &[Point]| -> Vec<Point> {
        c.iter()
            .map(|p| {
                let q = rot * Vec3::new(p[0], p[1], p[2]) + shift;
                [q.x, q.y, q.z]
            })
            .collect()
    };
    let moved = compute_metrics(&move_cloud(&a), &move_cloud(&b), 5.0).unwrap();
    let same = |m: &ReconMetrics, n: &ReconMetrics| {
        close(m.acc, n.acc)
            && close(m.comp, n.comp)
            && close(m.chamfer, n.chamfer)
            && close(m.prec, n.prec)
            && close(m.recall, n.recall)
            && close(m.fscore, n.fscore)
    };
    let rigid = same(&ab, &moved);
    verdict(
        identity && single && symmetric && rigid,
        format!("identity {identity}, 3 cm pair {single}, symmetry {symmetric}, rigid invariance {rigid}"),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Drops the wall-clock columns so logs of identical runs compare equal.
fn strip_timings(log: &str) -> String {
    let mut lines = log.lines();
    let header = lines.next().unwrap_or("");
    let keep: Vec<bool> = header.split('\t').map(|c| !c.contains("_ms_")).collect();
    std::iter::once(header)
        .chain(lines)
        .map(|l| {
            l.split('\t')
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(c, _)| c)
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

struct RoomRuns {
    metrics: Option<ReconMetrics>,
    secs: f64,
    coarse_ms: Vec<f64>,
    deterministic: bool,
    incremental: bool,
}

fn room_runs(dir: &Path) -> RoomRuns {
    let scene = GroundTruthScene::room();
    let source = Source::Scene(scene);
    let cfg = PipelineConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();

    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    let clock = Instant::now();
    let summary = pool.install(|| run_pipeline(cfg.clone(), &source, &a)).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    run_pipeline(cfg.clone(), &source, &b).unwrap();

    let mut rec = Reconstructor::new(cfg, &source).unwrap();
    let mut coarse_ms = Vec::new();
    while let Some(r) = rec.integrate_next().unwrap() {
        let t = r.levels[0].timings;
        coarse_ms.push(t.features + t.backproject + t.visibility + t.heads + t.sparsify + t.global);
        // consume the partial state the way a streaming client would
        let _ = rec.extract_mesh();
    }
    rec.write_outputs(&c).unwrap();

    let log = |d: &Path| strip_timings(&String::from_utf8(read(&d.join("fragments.log"))).unwrap());
    let deterministic = read(&a.join("mesh.ply")) == read(&b.join("mesh.ply"))
        && read(&a.join("metrics.json")) == read(&b.join("metrics.json"))
        && log(&a) == log(&b);
    let incremental = read(&a.join("mesh.ply")) == read(&c.join("mesh.ply"));
    RoomRuns {
        metrics: summary.metrics,
        secs,
        coarse_ms,
        deterministic,
        incremental,
    }
}

fn end_to_end(runs: &RoomRuns) -> Verdict {
    match &runs.metrics {
        Some(m) => verdict(
            m.chamfer < 4.0 && m.fscore > 0.9 && runs.secs < 600.0,
            format!(
                "chamfer {:.3} cm (acc {:.3}, comp {:.3}), F-score {:.4}, {:.1} s on one worker",
                m.chamfer, m.acc, m.comp, m.fscore, runs.secs
            ),
        ),
        None => Verdict::Fail("no metrics produced".into()),
    }
}

fn determinism(runs: &RoomRuns) -> Verdict {
    verdict(
        runs.deterministic && runs.incremental,
        format!(
            "repeat run identical {}, incremental mesh identical {}",
            runs.deterministic, runs.incremental
        ),
    )
}

fn throughput(runs: &RoomRuns) -> Verdict {
    let worst = runs.coarse_ms.iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "coarse level per fragment: worst {worst:.0} ms over {} fragments (budget 500 ms)",
        runs.coarse_ms.len()
    );
    if worst < 500.0 {
        Verdict::Pass(detail)
    } else {
        Verdict::Warn(detail)
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a filter that names
    // nothing here (e.g. a unit-test name) skips the suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let runs = &room_runs(dir.path());

    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("1 sliding-window selection vs brute force", Box::new(sliding_window)),
        ("2 ray traversal vs box intersection", Box::new(ray_traversal)),
        ("3 visibility vs dense ray march", Box::new(visibility_oracle)),
        ("4 loss fixed points and examples", Box::new(loss_fixed_points)),
        ("5 zero-residual identity on room", Box::new(residual_identity)),
        ("6 GRU gate extremes and C=1 example", Box::new(gru_recurrence)),
        ("7 end-to-end room reconstruction", Box::new(move || end_to_end(runs))),
        ("8 thin pole retention by strategy", Box::new(thin_structure)),
        ("9 metric self-tests", Box::new(metric_suite)),
        ("10 determinism and incrementality", Box::new(move || determinism(runs))),
        ("11 coarse throughput (soft)", Box::new(move || throughput(runs))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|e| Verdict::Fail(format!("panicked: {:?}", e.downcast_ref::<String>())));
        match v {
            Verdict::Pass(d) => println!("PASS  {name}: {d}"),
            Verdict::Warn(d) => println!("WARN  {name}: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}")
            }
        }
    }
    println!("acceptance: {} of {} hard criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
