//! Per-view 2-d feature maps at a level's image resolution.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fragmenter::{read_depth_png, FrameRecord};
use crate::geometry::{unproject, CameraIntrinsics, FeatureMap, Vec3};
use crate::synthscene::{synth_features, DescriptorBasis, GroundTruthScene};

pub trait FeatureProvider: Send + Sync {
    /// Feature map for `frame` rendered with the level-rescaled intrinsics `k`.
    fn features(&self, frame: &FrameRecord, k: &CameraIntrinsics, channels: usize) -> Result<FeatureMap>;

    fn name(&self) -> &'static str;
}

/// Same vector at every pixel.
pub struct ConstantFeatures(pub f32);

impl FeatureProvider for ConstantFeatures {
    fn features(&self, _: &FrameRecord, k: &CameraIntrinsics, channels: usize) -> Result<FeatureMap> {
        Ok(FeatureMap::constant(k.width, k.height, &vec![self.0; channels]))
    }

    fn name(&self) -> &'static str {
        "constant"
    }
}

/// Descriptors of the first surface hit, traced against an analytic scene.
pub struct SceneFeatures {
    pub scene: Arc<GroundTruthScene>,
    pub d_max: f64,
}

impl FeatureProvider for SceneFeatures {
    fn features(&self, frame: &FrameRecord, k: &CameraIntrinsics, channels: usize) -> Result<FeatureMap> {
        let basis = DescriptorBasis::new(channels)?;
        Ok(synth_features(&self.scene, k, &frame.pose, &basis, self.d_max))
    }

    fn name(&self) -> &'static str {
        "depth-oracle"
    }
}

/// Descriptors of points unprojected from the frame's depth image, with
/// normals from depth differences. Used for datasets without an analytic scene.
pub struct DepthFeatures;

impl FeatureProvider for DepthFeatures {
    fn features(&self, frame: &FrameRecord, k: &CameraIntrinsics, channels: usize) -> Result<FeatureMap> {
        let path = frame
            .depth_path
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("frame {} has no depth image", frame.frame_id)))?;
        let depth = read_depth_png(path)?;
        let full = &frame.intrinsics;
        if depth.width != full.width || depth.height != full.height {
            return Err(Error::InvalidInput(format!(
                "depth image of frame {} has the wrong size",
                frame.frame_id
            )));
        }
        let basis = DescriptorBasis::new(channels)?;
        let sx = full.width as f64 / k.width as f64;
        let sy = full.height as f64 / k.height as f64;
        let point_at = |u: usize, v: usize| -> Option<Vec3> {
            let z = depth.at(u, v) as f64;
            (z > 0.0).then(|| unproject(full, &frame.pose, [u as f64, v as f64], z))
        };
        let mut map = FeatureMap::zeros(k.width, k.height, channels);
        for v in 0..k.height {
            for u in 0..k.width {
                let fu = (((u as f64 + 0.5) * sx - 0.5).round() as usize).min(full.width - 1);
                let fv = (((v as f64 + 0.5) * sy - 0.5).round() as usize).min(full.height - 1);
                let out = map.pixel_mut(u, v);
                let Some(p) = point_at(fu, fv) else {
                    basis.background(out);
                    continue;
                };
                let du = if fu + 1 < full.width {
                    point_at(fu + 1, fv).map(|q| q - p)
                } else {
                    point_at(fu - 1, fv).map(|q| p - q)
                };
                let dv = if fv + 1 < full.height {
                    point_at(fu, fv + 1).map(|q| q - p)
                } else {
                    point_at(fu, fv - 1).map(|q| p - q)
                };
                let toward_camera = frame.pose.center() - p;
                let normal = match (du, dv) {
                    (Some(a), Some(b)) => a.cross(&b).try_normalize(1e-12),
                    _ => None,
                }
                .map(|n| if n.dot(&toward_camera) < 0.0 { -n } else { n })
                .unwrap_or_else(|| toward_camera.normalize());
                basis.surface(&p, &normal, out);
            }
        }
        Ok(map)
    }

    fn name(&self) -> &'static str {
        "depth"
    }
}

/// Grayscale patch descriptors from the frame's colour image: each channel is
/// the intensity at a fixed offset minus the patch mean.
pub struct PhotometricFeatures;

const PATCH_OFFSETS: [[i32; 2]; 25] = {
    let mut out = [[0; 2]; 25];
    let mut i = 0;
    while i < 25 {
        out[i] = [(i % 5) as i32 - 2, (i / 5) as i32 - 2];
        i += 1;
    }
    out
};

impl FeatureProvider for PhotometricFeatures {
    fn features(&self, frame: &FrameRecord, k: &CameraIntrinsics, channels: usize) -> Result<FeatureMap> {
        let path = frame
            .image_path
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("frame {} has no colour image", frame.frame_id)))?;
        let img = image::open(path)
            .map_err(|e| Error::format("colour image", format!("{}: {e}", path.display())))?
            .resize_exact(k.width as u32, k.height as u32, image::imageops::FilterType::Triangle)
            .into_luma8();
        let at = |u: i32, v: i32| {
            let u = u.clamp(0, k.width as i32 - 1) as u32;
            let v = v.clamp(0, k.height as i32 - 1) as u32;
            img.get_pixel(u, v).0[0] as f32 / 255.0
        };
        let mut map = FeatureMap::zeros(k.width, k.height, channels);
        for v in 0..k.height as i32 {
            for u in 0..k.width as i32 {
                let patch: Vec<f32> = PATCH_OFFSETS.iter().map(|o| at(u + o[0], v + o[1])).collect();
                let mean = patch.iter().sum::<f32>() / patch.len() as f32;
                let out = map.pixel_mut(u as usize, v as usize);
                for (c, o) in out.iter_mut().enumerate() {
                    *o = patch[c % patch.len()] - mean;
                }
            }
        }
        Ok(map)
    }

    fn name(&self) -> &'static str {
        "photometric"
    }
}
