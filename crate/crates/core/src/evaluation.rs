//! Point-cloud reconstruction metrics with exact nearest-neighbour search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_unchecked, CameraIntrinsics, CameraPose, Ray, Vec3};
use crate::surface::TriangleMesh;
use crate::synthscene::GroundTruthScene;

pub type Point = [f64; 3];

/// Static 3-d tree over a point set; queries are exact.
pub struct KdTree {
    points: Vec<Point>,
    // node i covers perm[lo..hi]; the median sits at the middle and splits on `axis`
    perm: Vec<u32>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Point]) -> Self {
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build_rec(points, &mut perm, &mut axes, 0);
        KdTree {
            points: points.to_vec(),
            perm,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.points.len(), q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &Point, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.perm[mid] as usize;
        let p = &self.points[idx];
        let d2 = dist2(p, q);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build_rec(points: &[Point], perm: &mut [u32], axes: &mut [u8], depth: usize) {
    if perm.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in perm.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i as usize][a]);
            hi[a] = hi[a].max(points[i as usize][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    axes[mid] = axis as u8;
    let (left, right) = perm.split_at_mut(mid);
    let (al, ar) = axes.split_at_mut(mid);
    build_rec(points, left, al, depth + 1);
    build_rec(points, &mut right[1..], &mut ar[1..], depth + 1);
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub acc: f64,
    pub comp: f64,
    pub chamfer: f64,
    pub prec: f64,
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub pred_points: usize,
    pub gt_points: usize,
}

impl ReconMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise") + "\n"
    }
}

/// Nearest-neighbour distances (metres) from every point of `from` to `to`.
pub fn nn_distances(from: &[Point], to: &KdTree) -> Vec<f64> {
    from.par_iter()
        .map(|p| to.nearest(p).map_or(f64::INFINITY, |(_, d2)| d2.sqrt()))
        .collect()
}

/// Accuracy, completeness and chamfer in centimetres; precision, recall and
/// F-score at `threshold_cm`.
pub fn compute_metrics(pred: &[Point], gt: &[Point], threshold_cm: f64) -> Result<ReconMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput(format!(
            "metrics need two non-empty clouds, got {} predicted and {} reference points",
            pred.len(),
            gt.len()
        )));
    }
    let d_pred = nn_distances(pred, &KdTree::build(gt));
    let d_gt = nn_distances(gt, &KdTree::build(pred));
    let mean_cm = |d: &[f64]| 100.0 * d.iter().sum::<f64>() / d.len() as f64;
    let within = |d: &[f64]| d.iter().filter(|&&x| x * 100.0 < threshold_cm).count() as f64 / d.len() as f64;
    let (acc, comp) = (mean_cm(&d_pred), mean_cm(&d_gt));
    let (prec, recall) = (within(&d_pred), within(&d_gt));
    let fscore = if prec + recall > 0.0 {
        2.0 * prec * recall / (prec + recall)
    } else {
        0.0
    };
    Ok(ReconMetrics {
        acc,
        comp,
        chamfer: (acc + comp) / 2.0,
        prec,
        recall,
        fscore,
        threshold: threshold_cm,
        pred_points: pred.len(),
        gt_points: gt.len(),
    })
}

fn triangle_point(a: &Vec3, b: &Vec3, c: &Vec3, rng: &mut impl Rng) -> Point {
    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
    let s = r1.sqrt();
    let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
    [p.x, p.y, p.z]
}

/// Area-weighted uniform samples: each triangle gets `floor(area * density)`
/// points plus one more with probability equal to the fractional part.
pub fn sample_mesh(mesh: &TriangleMesh, density: f64, seed: u64) -> Result<Vec<Point>> {
    if !(density > 0.0) {
        return Err(Error::InvalidInput("sampling density must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| {
            let v = mesh.vertices[i as usize];
            Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
        });
        let expected = 0.5 * (b - a).cross(&(c - a)).norm() * density;
        let mut n = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            n += 1;
        }
        for _ in 0..n {
            out.push(triangle_point(&a, &b, &c, &mut rng));
        }
    }
    Ok(out)
}

/// Area-uniform samples on every primitive of `scene`. With `views`, points
/// that no camera sees within `d_max` are discarded.
pub fn sample_scene(
    scene: &GroundTruthScene,
    density: f64,
    seed: u64,
    views: Option<(&[(CameraIntrinsics, CameraPose)], f64)>,
) -> Result<Vec<Point>> {
    if !(density > 0.0) {
        return Err(Error::InvalidInput("sampling density must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for prim in &scene.primitives {
        let expected = prim.surface_area() * density;
        let mut n = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            n += 1;
        }
        for _ in 0..n {
            let p = prim.sample_surface(&mut rng);
            // points on one primitive can lie inside another; they are not on the union surface
            if scene.sdf(&p) >= -1e-9 {
                pts.push(p);
            }
        }
    }
    let Some((cameras, d_max)) = views else {
        return Ok(pts.into_iter().map(|p| [p.x, p.y, p.z]).collect());
    };
    let keep: Vec<bool> = pts.par_iter().map(|p| seen_by_any(scene, cameras, d_max, p)).collect();
    Ok(pts
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| [p.x, p.y, p.z])
        .collect())
}

/// Surface point visible from at least one camera: in view, within `d_max`, and
/// no surface hit more than a millimetre before it.
pub fn seen_by_any(scene: &GroundTruthScene, cameras: &[(CameraIntrinsics, CameraPose)], d_max: f64, p: &Vec3) -> bool {
    cameras.iter().any(|(k, pose)| {
        let Some((_, depth)) = project_unchecked(k, pose, p).visible() else {
            return false;
        };
        if depth > d_max {
            return false;
        }
        let eye = pose.center();
        let to = p - eye;
        let dist = to.norm();
        let reach = dist - 1e-3;
        reach <= 0.0
            || scene
                .trace(&Ray {
                    origin: eye,
                    direction: to / dist,
                    t_min: 0.0,
                    t_max: reach,
                })
                .is_none()
    })
}

/// What a predicted mesh is scored against.
#[derive(Clone, Debug)]
pub enum Reference {
    Mesh(TriangleMesh),
    Scene(GroundTruthScene),
}

/// Samples both surfaces at `density` points per square metre and scores them.
/// With `cull_d_max`, scene samples are limited to what the scene's own cameras
/// see within that depth.
pub fn evaluate_mesh(
    pred: &TriangleMesh,
    reference: &Reference,
    threshold_cm: f64,
    density: f64,
    seed: u64,
    cull_d_max: Option<f64>,
) -> Result<ReconMetrics> {
    let gt = match reference {
        Reference::Mesh(m) => sample_mesh(m, density, seed)?,
        Reference::Scene(scene) => match cull_d_max {
            Some(d_max) => {
                let cams: Vec<_> = scene
                    .camera_poses()?
                    .into_iter()
                    .map(|p| (scene.intrinsics, p))
                    .collect();
                sample_scene(scene, density, seed, Some((&cams, d_max)))?
            }
            None => sample_scene(scene, density, seed, None)?,
        },
    };
    let samples = sample_mesh(pred, density, seed.wrapping_add(1))?;
    compute_metrics(&samples, &gt, threshold_cm)
}

pub fn mesh_vertices(mesh: &TriangleMesh) -> Vec<Point> {
    mesh.vertices.iter().map(|v| v.map(|x| x as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let tree = KdTree::build(&pts);
        for _ in 0..200 {
            let q: Point = [
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
                rng.random_range(-0.2..1.2),
            ];
            let brute = pts.iter().map(|p| dist2(p, &q)).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest(&q).unwrap().1, brute);
        }
        assert!(KdTree::build(&[]).nearest(&[0.0; 3]).is_none());
    }

    #[test]
    fn metric_examples() {
        let cloud = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        let m = compute_metrics(&cloud, &cloud, 5.0).unwrap();
        assert_eq!((m.acc, m.comp, m.chamfer), (0.0, 0.0, 0.0));
        assert_eq!((m.prec, m.recall, m.fscore), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[[0.0, 0.0, 0.0]], &[[0.03, 0.0, 0.0]], 5.0).unwrap();
        assert!((m.acc - 3.0).abs() < 1e-9 && (m.comp - 3.0).abs() < 1e-9);
        assert_eq!((m.prec, m.recall, m.fscore), (1.0, 1.0, 1.0));
        assert!(compute_metrics(&[], &cloud, 5.0).is_err());
    }

    #[test]
    fn mesh_sampling() {
        let square = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let pts = sample_mesh(&square, 100.0, 1).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts
            .iter()
            .all(|p| p[2] == 0.0 && (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        assert_eq!(sample_mesh(&square, 200.0, 1).unwrap().len(), 200);
        assert_eq!(sample_mesh(&square, 100.0, 1).unwrap(), pts);
        let flat = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(sample_mesh(&flat, 100.0, 1).unwrap().is_empty());
    }

    #[test]
    fn scene_samples_lie_on_surface() {
        let scene = GroundTruthScene::room();
        let pts = sample_scene(&scene, 50.0, 2, None).unwrap();
        assert!(!pts.is_empty());
        for p in &pts {
            assert!(scene.sdf(&Vec3::new(p[0], p[1], p[2])).abs() < 1e-9);
        }
    }
}
