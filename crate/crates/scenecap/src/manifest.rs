//! Observation manifest (`sequence.json`) and the per-frame files it lists.
//!
//! Joint order everywhere is the 24-joint SMPL convention: pelvis, left hip,
//! right hip, spine1, left knee, right knee, spine2, left ankle, right ankle,
//! spine3, left foot, right foot, neck, left collar, right collar, head,
//! left shoulder, right shoulder, left elbow, right elbow, left wrist, right
//! wrist, left hand, right hand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scenecap_core::body::NUM_JOINTS;
use scenecap_core::camera::CameraIntrinsics;
use scenecap_core::math::Vec3;
use scenecap_core::observations::{labels_from_masks, masks_from_labels, FrameObservations, JointDetection, PoseEstimate};
use scenecap_core::scene::DisparityPolarity;

use crate::error::{read_json, write_json, CliError, Result};
use crate::formats::{pfm, png_io};

pub const SEQUENCE_FILE: &str = "sequence.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub camera: CameraIntrinsics,
    pub num_frames: usize,
    #[serde(default = "default_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub disparity_polarity: DisparityPolarity,
    /// Paths relative to the manifest's directory.
    pub frames: Vec<FrameFiles>,
}

fn default_rate() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub disparity: String,
    /// 8-bit label image: 0 background, `k` instance `k - 1`, 255 void.
    pub masks: String,
    pub joints: String,
    pub poses: String,
}

/// One entry of `smpl_t.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// 24 axis-angle triplets, flattened.
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints2d: Option<Vec<[f64; 2]>>,
}

impl From<&PoseEstimate> for PoseRecord {
    fn from(p: &PoseEstimate) -> Self {
        PoseRecord {
            theta: p.theta.iter().flat_map(|w| w.0).collect(),
            beta: p.beta.clone(),
            joints2d: p.joints2d.clone(),
        }
    }
}

impl PoseRecord {
    fn into_estimate(self) -> std::result::Result<PoseEstimate, String> {
        if self.theta.len() != 3 * NUM_JOINTS {
            return Err(format!("theta has {} values, expected {}", self.theta.len(), 3 * NUM_JOINTS));
        }
        Ok(PoseEstimate {
            theta: self.theta.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            beta: self.beta,
            joints2d: self.joints2d,
        })
    }
}

fn frame_files(t: usize) -> FrameFiles {
    FrameFiles {
        disparity: format!("frames/disparity_{t:04}.pfm"),
        masks: format!("frames/masks_{t:04}.png"),
        joints: format!("frames/joints_{t:04}.json"),
        poses: format!("frames/smpl_{t:04}.json"),
    }
}

/// Writes every frame and `sequence.json` into `dir`; returns the manifest
/// path.
pub fn write_sequence(dir: &Path, camera: CameraIntrinsics, frame_rate: f64, frames: &[FrameObservations]) -> Result<PathBuf> {
    crate::error::create_dir(&dir.join("frames"))?;
    let mut files = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let ff = frame_files(t);
        pfm::save(&dir.join(&ff.disparity), &f.disparity)?;
        png_io::save_labels(&dir.join(&ff.masks), &labels_from_masks(&f.person_masks, &f.background))?;
        write_json(&dir.join(&ff.joints), &f.detections)?;
        let poses: Vec<PoseRecord> = f.poses.iter().map(PoseRecord::from).collect();
        write_json(&dir.join(&ff.poses), &poses)?;
        files.push(ff);
    }
    let m = SequenceManifest {
        camera,
        num_frames: frames.len(),
        frame_rate,
        disparity_polarity: DisparityPolarity::OneIsNear,
        frames: files,
    };
    let path = dir.join(SEQUENCE_FILE);
    write_json(&path, &m)?;
    Ok(path)
}

/// Accepts the manifest itself or the directory holding it.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SEQUENCE_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and validates a manifest and all of its frames.
pub fn load_sequence(path: &Path) -> Result<(SequenceManifest, Vec<FrameObservations>)> {
    let path = resolve_manifest(path);
    if !path.is_file() {
        return Err(CliError::usage(format!("{}: manifest not found", path.display())));
    }
    let m: SequenceManifest = read_json(&path)?;
    m.camera.validate().map_err(|e| CliError::invalid("manifest camera", e))?;
    if m.num_frames != m.frames.len() || m.frames.is_empty() {
        return Err(CliError::input(&path, format!("declares {} frames but lists {}", m.num_frames, m.frames.len())));
    }
    if !(m.frame_rate > 0.0) {
        return Err(CliError::input(&path, "frame_rate must be positive"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(m.frames.len());
    for (t, ff) in m.frames.iter().enumerate() {
        let mut disparity = pfm::load(&base.join(&ff.disparity))?;
        disparity.data_mut().iter_mut().for_each(|d| *d = m.disparity_polarity.normalize(*d));
        let labels = png_io::load_labels(&base.join(&ff.masks))?;
        let (person_masks, background) = masks_from_labels(&labels);
        let detections: Vec<JointDetection> = read_json(&base.join(&ff.joints))?;
        let records: Vec<PoseRecord> = read_json(&base.join(&ff.poses))?;
        let poses = records
            .into_iter()
            .map(|r| r.into_estimate().map_err(|e| CliError::input(&base.join(&ff.poses), e)))
            .collect::<Result<Vec<_>>>()?;
        let frame = FrameObservations {
            disparity,
            detections,
            poses,
            person_masks,
            background,
        };
        frame
            .validate(&m.camera)
            .map_err(|e| CliError::invalid(&format!("frame {t}"), e))?;
        frames.push(frame);
    }
    Ok((m, frames))
}
