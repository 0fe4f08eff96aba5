//! Camera models, projection, fragment bounding volumes and ray/grid traversal.
//!
//! Cameras follow the usual computer-vision convention: `x` right, `y` down,
//! `z` forward. Poses map world coordinates into the camera frame. Pixel
//! coordinates address pixel centres, so the top-left pixel is `(0, 0)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for a feature map resampled by `scale` relative to this image.
    ///
    /// Pixel centres sit at integer coordinates, so the principal point maps as
    /// `(c + 0.5) * scale - 0.5`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        let width = ((self.width as f64) * scale).round().max(1.0) as usize;
        let height = ((self.height as f64) * scale).round().max(1.0) as usize;
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let clamp = |c: f64, n: usize| c.clamp(0.0, n as f64 - 1e-9);
        CameraIntrinsics::new(
            self.fx * sx,
            self.fy * sy,
            clamp((self.cx + 0.5) * sx - 0.5, width),
            clamp((self.cy + 0.5) * sy - 0.5, height),
            width,
            height,
        )
    }

    /// Viewing direction (unnormalised, `z = 1`) through a pixel.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World to camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = CameraPose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("pose contains non-finite values".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        let det_err = (self.rotation.determinant() - 1.0).abs();
        if ortho_err > ORTHONORMAL_TOL || det_err > ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper rotation (orthogonality error {ortho_err:.2e}, det error {det_err:.2e})"
            )));
        }
        Ok(())
    }

    /// Builds a world-to-camera pose from a row-major camera-to-world 4x4 matrix.
    pub fn from_camera_to_world(m: &Matrix4<f64>) -> Result<Self> {
        let r_cw: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t_cw: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        let rotation = r_cw.transpose();
        CameraPose::new(rotation, -(rotation * t_cw))
    }

    pub fn to_camera_to_world(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        let r_cw = self.rotation.transpose();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_cw);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center());
        m
    }

    /// Camera looking from `eye` towards `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at target coincides with eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at up vector parallel to view".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        CameraPose::new(rotation, -(rotation * eye))
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, camera: &Vec3) -> Vec3 {
        self.rotation.transpose() * (camera - self.translation)
    }

    /// Relative rotation angle in degrees between two poses.
    pub fn rotation_angle_to(&self, other: &CameraPose) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos().to_degrees()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { pixel: [f64; 2], depth: f64 },
    OutOfView,
}

impl Projection {
    pub fn visible(self) -> Option<([f64; 2], f64)> {
        match self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            Projection::OutOfView => None,
        }
    }
}

/// Pinhole projection of a world point.
pub fn project_point(intrinsics: &CameraIntrinsics, pose: &CameraPose, point: &Vec3) -> Result<Projection> {
    if point.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("cannot project a NaN point".into()));
    }
    Ok(project_unchecked(intrinsics, pose, point))
}

#[inline]
pub(crate) fn project_unchecked(k: &CameraIntrinsics, pose: &CameraPose, point: &Vec3) -> Projection {
    let p = pose.to_camera(point);
    if !(p.z > 0.0) {
        return Projection::OutOfView;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    if u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64 {
        Projection::Visible {
            pixel: [u, v],
            depth: p.z,
        }
    } else {
        Projection::OutOfView
    }
}

/// Inverse of [`project_point`]: world point at `depth` along the pixel's ray.
pub fn unproject(intrinsics: &CameraIntrinsics, pose: &CameraPose, pixel: [f64; 2], depth: f64) -> Vec3 {
    let cam = intrinsics.pixel_direction(pixel[0], pixel[1]) * depth;
    pose.to_world(&cam)
}

/// Dense `height x width x channels` feature grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        FeatureMap {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let start = (v * self.width + u) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let start = (v * self.width + u) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}

/// Bilinear interpolation of a feature map at a sub-pixel location.
pub fn bilinear_sample(map: &FeatureMap, pixel: [f64; 2]) -> Result<Vec<f32>> {
    let mut out = vec![0.0; map.channels];
    bilinear_sample_into(map, pixel, &mut out)?;
    Ok(out)
}

pub fn bilinear_sample_into(map: &FeatureMap, pixel: [f64; 2], out: &mut [f32]) -> Result<()> {
    let [u, v] = pixel;
    let max_u = map.width as f64 - 1.0;
    let max_v = map.height as f64 - 1.0;
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) || map.width == 0 || map.height == 0 {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: map.width,
            height: map.height,
        });
    }
    let u0 = (u.floor() as usize).min(map.width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(map.height.saturating_sub(2));
    let u1 = (u0 + 1).min(map.width - 1);
    let v1 = (v0 + 1).min(map.height - 1);
    let fu = (u - u0 as f64) as f32;
    let fv = (v - v0 as f64) as f32;
    let (a, b, c, d) = (
        map.pixel(u0, v0),
        map.pixel(u1, v0),
        map.pixel(u0, v1),
        map.pixel(u1, v1),
    );
    for (i, o) in out.iter_mut().enumerate() {
        let top = a[i] + (b[i] - a[i]) * fu;
        let bottom = c[i] + (d[i] - c[i]) * fu;
        *o = top + (bottom - top) * fv;
    }
    Ok(())
}

/// Axis-aligned voxel grid. Voxel `v` has its centre at `origin + (v + 0.5) * voxel_size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub level: u8,
}

impl VoxelGridSpec {
    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// World coordinate of the `k`-th voxel boundary along `axis`.
    #[inline]
    pub fn boundary(&self, axis: usize, k: i64) -> f64 {
        self.origin[axis] + k as f64 * self.voxel_size
    }

    #[inline]
    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.boundary(a, self.dims[a] as i64))
    }

    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    /// Integer offset of this grid's origin in the world-anchored lattice of its voxel size.
    pub fn lattice_offset(&self) -> [i32; 3] {
        self.origin.map(|o| (o / self.voxel_size).round() as i32)
    }

    /// World-anchored voxel coordinate of a local index.
    #[inline]
    pub fn to_lattice(&self, idx: [usize; 3]) -> [i32; 3] {
        let off = self.lattice_offset();
        [off[0] + idx[0] as i32, off[1] + idx[1] as i32, off[2] + idx[2] as i32]
    }

    pub fn from_lattice(&self, coord: [i32; 3]) -> Option<[usize; 3]> {
        let off = self.lattice_offset();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let local = coord[a] as i64 - off[a] as i64;
            if local < 0 || local >= self.dims[a] as i64 {
                return None;
            }
            idx[a] = local as usize;
        }
        Some(idx)
    }

    /// The next finer level: same extent, half the voxel size.
    pub fn refined(&self) -> VoxelGridSpec {
        VoxelGridSpec {
            origin: self.origin,
            voxel_size: self.voxel_size / 2.0,
            dims: self.dims.map(|d| d * 2),
            level: self.level + 1,
        }
    }

    pub fn is_finer_child_of(&self, coarse: &VoxelGridSpec) -> bool {
        self.origin == coarse.origin
            && (self.voxel_size * 2.0 - coarse.voxel_size).abs() <= 1e-12 * coarse.voxel_size
            && self.dims == coarse.dims.map(|d| d * 2)
    }
}

/// Ray segment `origin + t * direction` for `t` in `[t_min, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_min: f64, t_max: f64) -> Result<Self> {
        if origin.iter().chain(direction.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ray contains non-finite values".into()));
        }
        if (direction.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput("ray direction must be unit length".into()));
        }
        if !(t_min >= 0.0 && t_min < t_max) {
            return Err(Error::InvalidInput(format!(
                "ray segment requires 0 <= t_min < t_max, got [{t_min}, {t_max}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            t_min,
            t_max,
        })
    }

    /// Ray through a pixel centre, truncated at camera depth `d_max`.
    pub fn through_pixel(k: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64, d_max: f64) -> Ray {
        let dir_cam = k.pixel_direction(u, v);
        let norm = dir_cam.norm();
        Ray {
            origin: pose.center(),
            direction: pose.rotation.transpose() * (dir_cam / norm),
            t_min: 0.0,
            t_max: d_max * norm,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned grid enclosing the view frustums (camera centre plus the four
/// far-plane corners at depth `d_max`) of every camera, padded by one voxel and
/// snapped to the lattice of `voxel_size`.
pub fn compute_fbv(cameras: &[(CameraIntrinsics, CameraPose)], d_max: f64, voxel_size: f64) -> Result<VoxelGridSpec> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput(
            "fragment bounding volume needs at least one camera".into(),
        ));
    }
    if !(d_max > 0.0) || !(voxel_size > 0.0) {
        return Err(Error::InvalidInput("d_max and voxel_size must be positive".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (k, pose) in cameras {
        let w = k.width as f64;
        let h = k.height as f64;
        let corners = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]];
        let mut pts = vec![pose.center()];
        for [u, v] in corners {
            pts.push(pose.to_world(&(k.pixel_direction(u, v) * d_max)));
        }
        for p in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let lo_idx = lo.map(|v| (v / voxel_size).floor() as i64 - 1);
    let hi_idx = hi.map(|v| (v / voxel_size).ceil() as i64 + 1);
    Ok(VoxelGridSpec {
        origin: lo_idx.map(|i| i as f64 * voxel_size),
        voxel_size,
        dims: [0, 1, 2].map(|a| (hi_idx[a] - lo_idx[a]) as usize),
        level: 1,
    })
}

/// Ordered voxels pierced by a ray segment, nearest first.
pub fn traverse_ray(grid: &VoxelGridSpec, ray: &Ray) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    traverse_ray_visit(grid, ray, |idx, _| out.push(idx));
    out
}

/// Incremental grid stepping; `visit` receives each voxel with its entry distance.
///
/// Boundary crossings are always evaluated as `(boundary - origin) / direction`
/// from the lattice, never accumulated, so entry distances are reproducible.
/// When two axes cross at the same distance the lower axis advances first.
pub fn traverse_ray_visit(grid: &VoxelGridSpec, ray: &Ray, mut visit: impl FnMut([usize; 3], f64)) {
    let o = ray.origin;
    let d = ray.direction;
    let mut t0 = ray.t_min;
    let mut t1 = ray.t_max;
    for a in 0..3 {
        let lo = grid.boundary(a, 0);
        let hi = grid.boundary(a, grid.dims[a] as i64);
        if d[a] == 0.0 {
            if o[a] < lo || o[a] >= hi {
                return;
            }
            continue;
        }
        let ta = (lo - o[a]) / d[a];
        let tb = (hi - o[a]) / d[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if !(t0 < t1) {
        return;
    }

    let mut idx = [0i64; 3];
    for a in 0..3 {
        let n = grid.dims[a] as i64;
        let p = if d[a] == 0.0 { o[a] } else { o[a] + t0 * d[a] };
        let mut i = (((p - grid.origin[a]) / grid.voxel_size).floor() as i64).clamp(0, n - 1);
        if d[a] == 0.0 {
            while i + 1 < n && grid.boundary(a, i + 1) <= o[a] {
                i += 1;
            }
            while i > 0 && grid.boundary(a, i) > o[a] {
                i -= 1;
            }
        } else if d[a] > 0.0 {
            loop {
                if i + 1 < n && (grid.boundary(a, i + 1) - o[a]) / d[a] <= t0 {
                    i += 1;
                } else if i > 0 && (grid.boundary(a, i) - o[a]) / d[a] > t0 {
                    i -= 1;
                } else {
                    break;
                }
            }
        } else {
            loop {
                if i > 0 && (grid.boundary(a, i) - o[a]) / d[a] <= t0 {
                    i -= 1;
                } else if i + 1 < n && (grid.boundary(a, i + 1) - o[a]) / d[a] > t0 {
                    i += 1;
                } else {
                    break;
                }
            }
        }
        idx[a] = i;
    }

    let mut t_enter = t0;
    loop {
        visit([idx[0] as usize, idx[1] as usize, idx[2] as usize], t_enter);
        let mut axis = usize::MAX;
        let mut t_next = f64::INFINITY;
        for a in 0..3 {
            let t = if d[a] > 0.0 {
                (grid.boundary(a, idx[a] + 1) - o[a]) / d[a]
            } else if d[a] < 0.0 {
                (grid.boundary(a, idx[a]) - o[a]) / d[a]
            } else {
                continue;
            };
            if t < t_next {
                t_next = t;
                axis = a;
            }
        }
        if axis == usize::MAX || t_next >= t1 {
            break;
        }
        idx[axis] += if d[axis] > 0.0 { 1 } else { -1 };
        if idx[axis] < 0 || idx[axis] >= grid.dims[axis] as i64 {
            break;
        }
        t_enter = t_next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let p = project_point(&cam100(), &CameraPose::identity(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(
            p,
            Projection::Visible {
                pixel: [50.0, 50.0],
                depth: 1.0
            }
        );
        let p = project_point(&cam100(), &CameraPose::identity(), &Vec3::new(0.5, 0.0, 1.0)).unwrap();
        // u = 100 is outside [0, 100), a right-edge point is out of view
        assert_eq!(p, Projection::OutOfView);
        let wide = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let p = project_point(&wide, &CameraPose::identity(), &Vec3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(
            p,
            Projection::Visible {
                pixel: [100.0, 50.0],
                depth: 1.0
            }
        );
    }

    #[test]
    fn behind_camera_and_nan() {
        let p = project_point(&cam100(), &CameraPose::identity(), &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(p, Projection::OutOfView);
        assert!(matches!(
            project_point(&cam100(), &CameraPose::identity(), &Vec3::new(f64::NAN, 0.0, 1.0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 0.0, 4, 4).is_err());
        let k = CameraIntrinsics::new(240.0, 240.0, 159.5, 119.5, 320, 240).unwrap();
        let s = k.scaled(0.25).unwrap();
        assert_eq!((s.width, s.height), (80, 60));
        assert!((s.cx - 39.5).abs() < 1e-12 && (s.fx - 60.0).abs() < 1e-12);
    }

    #[test]
    fn pose_validation_and_look_at() {
        let bad = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(bad, Vec3::zeros()).is_err());
        let pose = CameraPose::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 5.0, 3.0), Vec3::z()).unwrap();
        let p = pose.to_camera(&Vec3::new(1.0, 5.0, 3.0));
        assert!((p - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        // world up is image-up, i.e. negative camera y
        let up = pose.to_camera(&Vec3::new(1.0, 5.0, 4.0));
        assert!(up.y < 0.0);
        let m = pose.to_camera_to_world();
        let back = CameraPose::from_camera_to_world(&m).unwrap();
        assert!((back.rotation - pose.rotation).abs().max() < 1e-12);
        assert!((back.translation - pose.translation).norm() < 1e-12);
    }

    #[test]
    fn bilinear_node_midpoint_and_bounds() {
        let mut map = FeatureMap::zeros(8, 10, 2);
        for v in 0..10 {
            for u in 0..8 {
                map.pixel_mut(u, v).copy_from_slice(&[u as f32, (10 * v) as f32]);
            }
        }
        assert_eq!(bilinear_sample(&map, [3.0, 7.0]).unwrap(), vec![3.0, 70.0]);
        assert_eq!(bilinear_sample(&map, [3.5, 7.0]).unwrap(), vec![3.5, 70.0]);
        assert_eq!(bilinear_sample(&map, [7.0, 9.0]).unwrap(), vec![7.0, 90.0]);
        assert!(matches!(
            bilinear_sample(&map, [7.5, 0.0]),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(bilinear_sample(&map, [-0.1, 0.0]).is_err());
        let c = FeatureMap::constant(5, 5, &[0.25, -2.0]);
        assert_eq!(bilinear_sample(&c, [1.3, 3.9]).unwrap(), vec![0.25, -2.0]);
    }

    #[test]
    fn fbv_single_camera() {
        let fbv = compute_fbv(&[(cam100(), CameraPose::identity())], 3.0, 0.16).unwrap();
        let hi = fbv.max_corner();
        assert!(fbv.origin[0] <= -1.5 && fbv.origin[1] <= -1.5 && fbv.origin[2] <= 0.0);
        assert!(hi[0] >= 1.5 && hi[1] >= 1.5 && hi[2] >= 3.0);
        // one voxel of padding beyond the snapped hull
        assert!((fbv.origin[0] - -1.76).abs() < 1e-9);
        assert!((fbv.origin[2] - -0.16).abs() < 1e-9);
        for a in 0..3 {
            let r = fbv.origin[a] / 0.16;
            assert!((r - r.round()).abs() < 1e-9);
        }
        let twice = compute_fbv(&[(cam100(), CameraPose::identity()); 2], 3.0, 0.16).unwrap();
        assert_eq!(fbv, twice);
        assert!(compute_fbv(&[], 3.0, 0.16).is_err());
    }

    #[test]
    fn axis_aligned_traversal() {
        let grid = VoxelGridSpec {
            origin: [0.0; 3],
            voxel_size: 1.0,
            dims: [4, 1, 1],
            level: 1,
        };
        let ray = Ray::new(Vec3::new(-0.5, 0.5, 0.5), Vec3::x(), 0.0, 10.0).unwrap();
        assert_eq!(
            traverse_ray(&grid, &ray),
            vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]
        );
        let miss = Ray::new(Vec3::new(-0.5, 2.5, 0.5), Vec3::x(), 0.0, 10.0).unwrap();
        assert!(traverse_ray(&grid, &miss).is_empty());
        let back = Ray::new(Vec3::new(4.5, 0.5, 0.5), -Vec3::x(), 0.0, 5.0).unwrap();
        assert_eq!(
            traverse_ray(&grid, &back),
            vec![[3, 0, 0], [2, 0, 0], [1, 0, 0], [0, 0, 0]]
        );
        let short = Ray::new(Vec3::new(-0.5, 0.5, 0.5), Vec3::x(), 1.0, 2.0).unwrap();
        assert_eq!(traverse_ray(&grid, &short), vec![[0, 0, 0], [1, 0, 0]]);
    }

    #[test]
    fn ray_validation() {
        assert!(Ray::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0), 0.0, 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), 1.0, 1.0).is_err());
        assert!(Ray::new(Vec3::zeros(), Vec3::x(), -1.0, 1.0).is_err());
    }
}
