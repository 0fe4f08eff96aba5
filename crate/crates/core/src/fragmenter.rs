//! Keyframe selection, fragment assembly and the on-disk dataset layout.
//!
//! A dataset directory holds `intrinsics.txt` (`fx fy cx cy width height`),
//! `poses.txt` (frame id followed by a row-major 4x4 camera-to-world matrix
//! per line), `depth/<id>.png` (16-bit millimetres, 0 = invalid) and an
//! optional `color/<id>.png`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::{compute_fbv, CameraIntrinsics, CameraPose, VoxelGridSpec};
use crate::synthscene::{render_depth, DepthMap, GroundTruthScene};

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub image_path: Option<PathBuf>,
    pub depth_path: Option<PathBuf>,
}

impl FrameRecord {
    pub fn new(frame_id: u64, intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        FrameRecord {
            frame_id,
            intrinsics,
            pose,
            image_path: None,
            depth_path: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fragment {
    pub index: usize,
    pub keyframes: Vec<FrameRecord>,
    /// Bounding grid per level, coarse to fine.
    pub fbv: Vec<VoxelGridSpec>,
}

impl Fragment {
    pub fn build(index: usize, keyframes: Vec<FrameRecord>, voxel_sizes: &[f64], d_max: f64) -> Result<Self> {
        let cameras: Vec<_> = keyframes.iter().map(|f| (f.intrinsics, f.pose)).collect();
        let coarse = compute_fbv(&cameras, d_max, voxel_sizes[0])?;
        let mut fbv = vec![coarse];
        for _ in 1..voxel_sizes.len() {
            let next = fbv.last().unwrap().refined();
            fbv.push(next);
        }
        Ok(Fragment { index, keyframes, fbv })
    }

    pub fn cameras(&self) -> Vec<(CameraIntrinsics, CameraPose)> {
        self.keyframes.iter().map(|f| (f.intrinsics, f.pose)).collect()
    }
}

/// Frame ids of the keyframes: the first frame, then every frame that moved more
/// than `t_thresh` metres or rotated more than `r_thresh` degrees since the last pick.
pub fn select_keyframes(frames: &[FrameRecord], t_thresh: f64, r_thresh: f64) -> Vec<u64> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let mut picked = vec![first.frame_id];
    let mut last = &first.pose;
    for frame in &frames[1..] {
        let moved = (frame.pose.center() - last.center()).norm();
        let turned = frame.pose.rotation_angle_to(last);
        if moved > t_thresh || turned > r_thresh {
            picked.push(frame.frame_id);
            last = &frame.pose;
        }
    }
    picked
}

/// Splits keyframes into consecutive, non-overlapping groups of `n`; a short tail is dropped.
pub fn assemble_fragments(
    keyframes: &[FrameRecord],
    n: usize,
    voxel_sizes: &[f64],
    d_max: f64,
) -> Result<Vec<Fragment>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "fragments need at least 2 keyframes, got N = {n}"
        )));
    }
    if keyframes.len() < n {
        return Err(Error::EmptyResult(format!(
            "{} keyframes available, a fragment needs {n}",
            keyframes.len()
        )));
    }
    let dropped = keyframes.len() % n;
    if dropped > 0 {
        log::info!("dropping {dropped} trailing keyframes that do not fill a fragment");
    }
    keyframes
        .chunks_exact(n)
        .enumerate()
        .map(|(t, chunk)| Fragment::build(t, chunk.to_vec(), voxel_sizes, d_max))
        .collect()
}

/// Reads a dataset directory into frame records sorted by frame id.
pub fn load_dataset(dir: &Path) -> Result<Vec<FrameRecord>> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    };
    let intr: Vec<f64> = read("intrinsics.txt")?
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("intrinsics.txt", e.to_string()))?;
    if intr.len() != 6 {
        return Err(Error::format("intrinsics.txt", "expected fx fy cx cy width height"));
    }
    let k = CameraIntrinsics::new(intr[0], intr[1], intr[2], intr[3], intr[4] as usize, intr[5] as usize)?;

    let mut frames = Vec::new();
    for (lineno, line) in read("poses.txt")?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::format("poses.txt", format!("line {}: {m}", lineno + 1));
        let mut tokens = line.split_whitespace();
        let id: u64 = tokens
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| err(format!("frame id: {e}")))?;
        let vals: Vec<f64> = tokens
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        if vals.len() != 16 {
            return Err(err(format!("expected 16 matrix entries, got {}", vals.len())));
        }
        let pose = CameraPose::from_camera_to_world(&Matrix4::from_row_slice(&vals)).map_err(|e| err(e.to_string()))?;
        let mut frame = FrameRecord::new(id, k, pose);
        let depth = dir.join("depth").join(format!("{id}.png"));
        if depth.exists() {
            frame.depth_path = Some(depth);
        }
        let color = dir.join("color").join(format!("{id}.png"));
        if color.exists() {
            frame.image_path = Some(color);
        }
        frames.push(frame);
    }
    frames.sort_by_key(|f| f.frame_id);
    if frames.windows(2).any(|w| w[0].frame_id == w[1].frame_id) {
        return Err(Error::format("poses.txt", "duplicate frame id"));
    }
    if frames.is_empty() {
        return Err(Error::EmptyResult(format!("no frames in {}", dir.display())));
    }
    Ok(frames)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)
        .map_err(|e| Error::format("depth image", format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(DepthMap {
        width: w as usize,
        height: h as usize,
        depth: img.pixels().map(|p| p.0[0] as f32 / 1000.0).collect(),
    })
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let px: Vec<u16> = depth
        .depth
        .iter()
        .map(|d| (d * 1000.0).round().clamp(0.0, u16::MAX as f32) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width as u32, depth.height as u32, px)
        .ok_or_else(|| Error::InvalidInput("depth buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::format("depth image", format!("{}: {e}", path.display())))
}

/// Renders every trajectory frame of `scene` into the dataset layout under `dir`.
pub fn write_scene_dataset(scene: &GroundTruthScene, dir: &Path, d_max: f64) -> Result<usize> {
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let k = &scene.intrinsics;
    let intr_path = dir.join("intrinsics.txt");
    fs::write(
        &intr_path,
        format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )
    .map_err(|e| Error::io(&intr_path, e))?;
    let poses = scene.camera_poses()?;
    let pose_path = dir.join("poses.txt");
    let mut out = fs::File::create(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
    for (id, pose) in poses.iter().enumerate() {
        let m = pose.to_camera_to_world();
        let row: Vec<String> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:e}", m[(r, c)]))
            .collect();
        writeln!(out, "{id} {}", row.join(" ")).map_err(|e| Error::io(&pose_path, e))?;
        write_depth_png(
            &depth_dir.join(format!("{id}.png")),
            &render_depth(scene, k, pose, d_max),
        )?;
    }
    Ok(poses.len())
}
