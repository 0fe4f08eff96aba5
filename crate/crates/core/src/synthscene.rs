//! Analytic ground-truth scenes built from SDF primitives.
//!
//! Scenes stand in for captured datasets: they answer exact distance queries,
//! render depth by sphere tracing, and produce ground-truth TSDF, occupancy
//! and per-pixel descriptors for the feature providers.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, FeatureMap, Ray, Vec3};
use crate::grid::SparseVoxelGrid;

pub const HIT_TOLERANCE: f64 = 1e-5;
const MAX_TRACE_STEPS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Solid axis-aligned box.
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Hollow room: free space inside the box, solid everywhere outside it.
    BoxShell {
        center: Vec3,
        half_extents: Vec3,
    },
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    /// Half-space below the plane (opposite the normal) is solid. `extent` bounds the
    /// square patch used when sampling the surface.
    Plane {
        point: Vec3,
        normal: Vec3,
        extent: f64,
    },
}

fn box_sdf(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|v| v.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

fn box_gradient(p: &Vec3, center: &Vec3, half: &Vec3) -> Vec3 {
    let d = p - center;
    let q = d.abs() - half;
    let sign = d.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
    let outside = q.map(|v| v.max(0.0));
    if outside.norm() > 0.0 {
        return outside.component_mul(&sign).normalize();
    }
    let axis = if q.x >= q.y && q.x >= q.z {
        0
    } else if q.y >= q.z {
        1
    } else {
        2
    };
    let mut g = Vec3::zeros();
    g[axis] = sign[axis];
    g
}

fn segment_closest(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let h = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    a + ab * h
}

impl Primitive {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, half_extents } => box_sdf(p, center, half_extents),
            Primitive::BoxShell { center, half_extents } => -box_sdf(p, center, half_extents),
            Primitive::Capsule { a, b, radius } => (p - segment_closest(p, a, b)).norm() - radius,
            Primitive::Plane { point, normal, .. } => (p - point).dot(normal),
        }
    }

    /// Unit outward normal (direction of increasing distance).
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let radial = |d: Vec3| d.try_normalize(1e-15).unwrap_or_else(Vec3::z);
        match self {
            Primitive::Sphere { center, .. } => radial(p - center),
            Primitive::Box { center, half_extents } => box_gradient(p, center, half_extents),
            Primitive::BoxShell { center, half_extents } => -box_gradient(p, center, half_extents),
            Primitive::Capsule { a, b, .. } => radial(p - segment_closest(p, a, b)),
            Primitive::Plane { normal, .. } => *normal,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Box { .. } => "box",
            Primitive::BoxShell { .. } => "box_shell",
            Primitive::Capsule { .. } => "capsule",
            Primitive::Plane { .. } => "plane",
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { half_extents: h, .. } | Primitive::BoxShell { half_extents: h, .. } => {
                8.0 * (h.x * h.y + h.y * h.z + h.x * h.z)
            }
            Primitive::Capsule { a, b, radius } => 2.0 * PI * radius * (b - a).norm() + 4.0 * PI * radius * radius,
            Primitive::Plane { extent, .. } => 4.0 * extent * extent,
        }
    }

    /// Area-uniform point on the primitive's surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        use std::f64::consts::PI;
        let unit_sphere = |rng: &mut dyn rand::RngCore| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        };
        match self {
            Primitive::Sphere { center, radius } => center + unit_sphere(rng) * *radius,
            Primitive::Box {
                center,
                half_extents: h,
            }
            | Primitive::BoxShell {
                center,
                half_extents: h,
            } => {
                let faces = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total = 2.0 * (faces[0] + faces[1] + faces[2]);
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 0;
                let mut side = 1.0;
                'outer: for (a, &area) in faces.iter().enumerate() {
                    for s in [1.0, -1.0] {
                        if pick < area {
                            axis = a;
                            side = s;
                            break 'outer;
                        }
                        pick -= area;
                    }
                }
                let mut p = Vec3::zeros();
                for a in 0..3 {
                    p[a] = if a == axis {
                        side * h[a]
                    } else {
                        rng.random_range(-h[a]..h[a])
                    };
                }
                center + p
            }
            Primitive::Capsule { a, b, radius } => {
                let axis = b - a;
                let len = axis.norm();
                let side = 2.0 * PI * radius * len;
                let caps = 4.0 * PI * radius * radius;
                let dir = axis / len;
                let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let e1 = dir.cross(&helper).normalize();
                let e2 = dir.cross(&e1);
                if rng.random_range(0.0..side + caps) < side {
                    let h: f64 = rng.random_range(0.0..len);
                    let phi: f64 = rng.random_range(0.0..2.0 * PI);
                    a + dir * h + (e1 * phi.cos() + e2 * phi.sin()) * *radius
                } else {
                    let s = unit_sphere(rng);
                    let along = s.dot(&dir);
                    let base = if along >= 0.0 { b } else { a };
                    base + s * *radius
                }
            }
            Primitive::Plane { point, normal, extent } => {
                let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let e1 = normal.cross(&helper).normalize();
                let e2 = normal.cross(&e1);
                point + e1 * rng.random_range(-extent..*extent) + e2 * rng.random_range(-extent..*extent)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CameraTrajectory {
    /// Ring of cameras around `center`, each looking at a point on a ring of
    /// radius `look_radius` at height `look_height` in the same direction.
    Orbit {
        center: Vec3,
        radius: f64,
        look_radius: f64,
        look_height: f64,
        count: usize,
        turns: f64,
    },
    Line {
        start: Vec3,
        end: Vec3,
        target: Vec3,
        count: usize,
    },
    Lemniscate {
        center: Vec3,
        scale: f64,
        target: Vec3,
        count: usize,
    },
}

impl CameraTrajectory {
    pub fn count(&self) -> usize {
        match self {
            CameraTrajectory::Orbit { count, .. }
            | CameraTrajectory::Line { count, .. }
            | CameraTrajectory::Lemniscate { count, .. } => *count,
        }
    }

    pub fn poses(&self) -> Result<Vec<CameraPose>> {
        use std::f64::consts::TAU;
        let up = Vec3::z();
        let n = self.count();
        (0..n)
            .map(|i| match self {
                CameraTrajectory::Orbit {
                    center,
                    radius,
                    look_radius,
                    look_height,
                    turns,
                    ..
                } => {
                    let theta = TAU * turns * i as f64 / n as f64;
                    let dir = Vec3::new(theta.cos(), theta.sin(), 0.0);
                    let eye = center + dir * *radius;
                    let mut target = center + dir * *look_radius;
                    target.z = *look_height;
                    CameraPose::look_at(eye, target, up)
                }
                CameraTrajectory::Line { start, end, target, .. } => {
                    let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    CameraPose::look_at(start + (end - start) * s, *target, up)
                }
                CameraTrajectory::Lemniscate {
                    center, scale, target, ..
                } => {
                    let theta = TAU * i as f64 / n as f64;
                    let eye = center + Vec3::new(theta.sin(), theta.sin() * theta.cos(), 0.0) * *scale;
                    CameraPose::look_at(eye, *target, up)
                }
            })
            .collect()
    }
}

/// Dense `height x width` depth image in metres; `0` marks invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: CameraTrajectory,
}

impl GroundTruthScene {
    /// Room with a sphere on the floor and a thin pole hanging from the ceiling,
    /// seen from a ring of cameras near the walls looking down across the room.
    pub fn room() -> Self {
        GroundTruthScene {
            name: "room".into(),
            primitives: vec![
                Primitive::BoxShell {
                    center: Vec3::new(0.0, 0.0, 1.25),
                    half_extents: Vec3::new(2.0, 2.0, 1.25),
                },
                Primitive::Sphere {
                    center: Vec3::new(-0.9, 0.9, 0.5),
                    radius: 0.5,
                },
                Primitive::Capsule {
                    a: Vec3::new(0.0, 0.0, 1.0),
                    b: Vec3::new(0.0, 0.0, 2.46),
                    radius: 0.04,
                },
            ],
            intrinsics: default_intrinsics(),
            trajectory: CameraTrajectory::Orbit {
                center: Vec3::new(0.0, 0.0, 1.8),
                radius: 1.5,
                look_radius: -1.0,
                look_height: 0.3,
                count: 40,
                turns: 1.0,
            },
        }
    }

    /// Single sphere seen from a ring of inward-looking cameras.
    pub fn sphere_orbit() -> Self {
        GroundTruthScene {
            name: "sphere-orbit".into(),
            primitives: vec![Primitive::Sphere {
                center: Vec3::zeros(),
                radius: 0.5,
            }],
            intrinsics: default_intrinsics(),
            trajectory: CameraTrajectory::Orbit {
                center: Vec3::zeros(),
                radius: 2.0,
                look_radius: 0.0,
                look_height: 0.0,
                count: 9,
                turns: 1.0,
            },
        }
    }

    /// Floor and ceiling half-spaces with a camera sliding between them.
    pub fn two_planes() -> Self {
        GroundTruthScene {
            name: "two-planes".into(),
            primitives: vec![
                Primitive::Plane {
                    point: Vec3::zeros(),
                    normal: Vec3::z(),
                    extent: 3.0,
                },
                Primitive::Plane {
                    point: Vec3::new(0.0, 0.0, 2.5),
                    normal: Vec3::new(0.0, 0.0, -1.0),
                    extent: 3.0,
                },
            ],
            intrinsics: default_intrinsics(),
            trajectory: CameraTrajectory::Line {
                start: Vec3::new(-1.0, 0.0, 1.2),
                end: Vec3::new(1.0, 0.0, 1.2),
                target: Vec3::new(0.0, 2.0, 0.0),
                count: 18,
            },
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "room" => Some(Self::room()),
            "sphere-orbit" => Some(Self::sphere_orbit()),
            "two-planes" => Some(Self::two_planes()),
            _ => None,
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.sdf_and_primitive(p).0
    }

    /// Distance plus the index of the primitive that attains it.
    pub fn sdf_and_primitive(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let (_, i) = self.sdf_and_primitive(p);
        self.primitives[i].gradient(p)
    }

    /// Sphere-traces a ray; returns the first hit distance within the segment.
    pub fn trace(&self, ray: &Ray) -> Option<f64> {
        let mut t = ray.t_min;
        for _ in 0..MAX_TRACE_STEPS {
            if t > ray.t_max {
                return None;
            }
            let d = self.sdf(&ray.at(t));
            if d < HIT_TOLERANCE {
                return Some(t);
            }
            t += d;
        }
        None
    }

    pub fn camera_poses(&self) -> Result<Vec<CameraPose>> {
        self.trajectory.poses()
    }

    /// Writes the scene in the key-value scene format.
    pub fn to_text(&self) -> String {
        let v = |p: &Vec3| format!("{},{},{}", p.x, p.y, p.z);
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        for prim in &self.primitives {
            let body = match prim {
                Primitive::Sphere { center, radius } => format!("center={} radius={}", v(center), radius),
                Primitive::Box { center, half_extents } | Primitive::BoxShell { center, half_extents } => {
                    format!("center={} half_extents={}", v(center), v(half_extents))
                }
                Primitive::Capsule { a, b, radius } => format!("a={} b={} radius={}", v(a), v(b), radius),
                Primitive::Plane { point, normal, extent } => {
                    format!("point={} normal={} extent={}", v(point), v(normal), extent)
                }
            };
            let _ = writeln!(s, "primitive = {} {}", prim.kind(), body);
        }
        let k = &self.intrinsics;
        let _ = writeln!(
            s,
            "intrinsics = {} {} {} {} {} {}",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        let traj = match &self.trajectory {
            CameraTrajectory::Orbit {
                center,
                radius,
                look_radius,
                look_height,
                count,
                turns,
            } => format!(
                "orbit center={} radius={} look_radius={} look_height={} count={} turns={}",
                v(center),
                radius,
                look_radius,
                look_height,
                count,
                turns
            ),
            CameraTrajectory::Line {
                start,
                end,
                target,
                count,
            } => {
                format!(
                    "line start={} end={} target={} count={}",
                    v(start),
                    v(end),
                    v(target),
                    count
                )
            }
            CameraTrajectory::Lemniscate {
                center,
                scale,
                target,
                count,
            } => format!(
                "lemniscate center={} scale={} target={} count={}",
                v(center),
                scale,
                v(target),
                count
            ),
        };
        let _ = writeln!(s, "trajectory = {traj}");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("scene");
        let mut primitives = Vec::new();
        let mut intrinsics = None;
        let mut trajectory = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::format("scene file", format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = value.to_string(),
                "primitive" => primitives.push(parse_primitive(value).map_err(err)?),
                "trajectory" => trajectory = Some(parse_trajectory(value).map_err(err)?),
                "intrinsics" => {
                    let nums: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad intrinsics: {e}"))))
                        .collect::<Result<_>>()?;
                    if nums.len() != 6 {
                        return Err(err("intrinsics needs fx fy cx cy width height".into()));
                    }
                    intrinsics = Some(CameraIntrinsics::new(
                        nums[0],
                        nums[1],
                        nums[2],
                        nums[3],
                        nums[4] as usize,
                        nums[5] as usize,
                    )?);
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if primitives.is_empty() {
            return Err(Error::format("scene file", "no primitives"));
        }
        Ok(GroundTruthScene {
            name,
            primitives,
            intrinsics: intrinsics.unwrap_or_else(default_intrinsics),
            trajectory: trajectory.ok_or_else(|| Error::format("scene file", "missing trajectory"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 240.0,
        fy: 240.0,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
    }
}

struct Params<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Params<'a> {
    fn parse(tokens: impl Iterator<Item = &'a str>) -> std::result::Result<Self, String> {
        let pairs = tokens
            .map(|t| {
                t.split_once('=')
                    .ok_or_else(|| format!("expected key=value, got `{t}`"))
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Params { pairs })
    }

    fn raw(&self, key: &str) -> std::result::Result<&'a str, String> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("missing `{key}`"))
    }

    fn num(&self, key: &str) -> std::result::Result<f64, String> {
        self.raw(key)?.parse().map_err(|e| format!("`{key}`: {e}"))
    }

    fn num_or(&self, key: &str, default: f64) -> std::result::Result<f64, String> {
        if self.pairs.iter().any(|(k, _)| *k == key) {
            self.num(key)
        } else {
            Ok(default)
        }
    }

    fn vec3(&self, key: &str) -> std::result::Result<Vec3, String> {
        let parts: Vec<f64> = self
            .raw(key)?
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{key}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts.as_slice() {
            [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
            _ => Err(format!("`{key}` needs three comma-separated numbers")),
        }
    }
}

fn parse_primitive(value: &str) -> std::result::Result<Primitive, String> {
    let mut tokens = value.split_whitespace();
    let kind = tokens.next().ok_or("empty primitive")?;
    let p = Params::parse(tokens)?;
    let positive = |v: f64, what: &str| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(format!("`{what}` must be positive"))
        }
    };
    Ok(match kind {
        "sphere" => Primitive::Sphere {
            center: p.vec3("center")?,
            radius: positive(p.num("radius")?, "radius")?,
        },
        "box" | "box_shell" => {
            let center = p.vec3("center")?;
            let half_extents = p.vec3("half_extents")?;
            if half_extents.iter().any(|h| *h <= 0.0) {
                return Err("`half_extents` must be positive".into());
            }
            if kind == "box" {
                Primitive::Box { center, half_extents }
            } else {
                Primitive::BoxShell { center, half_extents }
            }
        }
        "capsule" => {
            let (a, b) = (p.vec3("a")?, p.vec3("b")?);
            if (b - a).norm() == 0.0 {
                return Err("capsule endpoints coincide".into());
            }
            Primitive::Capsule {
                a,
                b,
                radius: positive(p.num("radius")?, "radius")?,
            }
        }
        "plane" => Primitive::Plane {
            point: p.vec3("point")?,
            normal: p.vec3("normal")?.try_normalize(1e-12).ok_or("zero plane normal")?,
            extent: positive(p.num_or("extent", 5.0)?, "extent")?,
        },
        other => return Err(format!("unknown primitive `{other}`")),
    })
}

fn parse_trajectory(value: &str) -> std::result::Result<CameraTrajectory, String> {
    let mut tokens = value.split_whitespace();
    let kind = tokens.next().ok_or("empty trajectory")?;
    let p = Params::parse(tokens)?;
    let count = p.num("count")?;
    if count < 1.0 || count.fract() != 0.0 {
        return Err("`count` must be a positive integer".into());
    }
    let count = count as usize;
    Ok(match kind {
        "orbit" => CameraTrajectory::Orbit {
            center: p.vec3("center")?,
            radius: p.num("radius")?,
            look_radius: p.num_or("look_radius", 0.0)?,
            look_height: p.num_or("look_height", p.vec3("center")?.z)?,
            count,
            turns: p.num_or("turns", 1.0)?,
        },
        "line" => CameraTrajectory::Line {
            start: p.vec3("start")?,
            end: p.vec3("end")?,
            target: p.vec3("target")?,
            count,
        },
        "lemniscate" => CameraTrajectory::Lemniscate {
            center: p.vec3("center")?,
            scale: p.num("scale")?,
            target: p.vec3("target")?,
            count,
        },
        other => return Err(format!("unknown trajectory `{other}`")),
    })
}

/// Sphere-traced depth image; pixels that miss within depth `d_max` are `0`.
pub fn render_depth(scene: &GroundTruthScene, k: &CameraIntrinsics, pose: &CameraPose, d_max: f64) -> DepthMap {
    let mut depth = vec![0.0f32; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = Ray::through_pixel(k, pose, u as f64, v as f64, d_max);
            if let Some(t) = scene.trace(&ray) {
                // t_max = d_max * |dir_cam|, so the z-depth is t / |dir_cam|
                depth[v * k.width + u] = (t * d_max / ray.t_max) as f32;
            }
        }
    }
    DepthMap {
        width: k.width,
        height: k.height,
        depth,
    }
}

/// Ground-truth TSDF (`sdf / lambda` clamped to `[-1, 1]`) and occupancy (`|sdf| < lambda`).
pub fn gt_tsdf(scene: &GroundTruthScene, grid: &SparseVoxelGrid, lambda: f64) -> (Vec<f32>, Vec<bool>) {
    (0..grid.len())
        .map(|i| {
            let sdf = scene.sdf(&grid.center(i));
            ((sdf / lambda).clamp(-1.0, 1.0) as f32, sdf.abs() < lambda)
        })
        .unzip()
}

/// Fixed descriptor basis shared by every view, so a surface point gets the
/// same code no matter which camera sees it.
pub struct DescriptorBasis {
    channels: usize,
    waves: Vec<(Vec3, f64)>,
}

const DESCRIPTOR_SEED: u64 = 0x5eed_f00d;
const DESCRIPTOR_WAVELENGTH: f64 = 0.4;

impl DescriptorBasis {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 3 {
            return Err(Error::InvalidInput(format!(
                "descriptors need at least 3 channels, got {channels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(DESCRIPTOR_SEED);
        let freq = std::f64::consts::TAU / DESCRIPTOR_WAVELENGTH;
        let waves = (1..channels)
            .map(|_| {
                let dir = loop {
                    let d = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if let Some(n) = d.try_normalize(0.1) {
                        break n;
                    }
                };
                (dir * freq, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Ok(DescriptorBasis { channels, waves })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel 0 is reserved for background; surface codes keep it at zero.
    pub fn surface(&self, point: &Vec3, normal: &Vec3, out: &mut [f32]) {
        out[0] = 0.0;
        for (c, (w, phase)) in self.waves.iter().enumerate() {
            let mut v = (w.dot(point) + phase).sin();
            if c < 3 {
                v += 0.5 * normal[c];
            }
            out[c + 1] = v as f32;
        }
    }

    pub fn background(&self, out: &mut [f32]) {
        out.fill(0.0);
        out[0] = 1.0;
    }
}

/// Per-pixel descriptor of the first surface hit, or the background code on a miss.
pub fn synth_features(
    scene: &GroundTruthScene,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    basis: &DescriptorBasis,
    d_max: f64,
) -> FeatureMap {
    let mut map = FeatureMap::zeros(k.width, k.height, basis.channels());
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = Ray::through_pixel(k, pose, u as f64, v as f64, d_max);
            let out = map.pixel_mut(u, v);
            match scene.trace(&ray) {
                Some(t) => {
                    let p = ray.at(t);
                    basis.surface(&p, &scene.normal(&p), out);
                }
                None => basis.background(out),
            }
        }
    }
    map
}
