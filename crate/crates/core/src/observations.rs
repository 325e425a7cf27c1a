//! Per-frame observations and their association across modalities and time.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::assignment::hungarian;
use crate::body::{BodyModel, NUM_JOINTS};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math::{round, sqrt, Vec3};

/// Cost assigned to pose/skeleton pairs that share no confident joint.
const NO_OVERLAP_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JointDetection {
    /// Pixel coordinates, one per joint.
    pub joints: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub track_id: Option<u32>,
}

impl JointDetection {
    /// Root pixel: joint 0 when confident, else the mean of confident joints.
    pub fn root_pixel(&self, threshold: f64) -> Option<[f64; 2]> {
        if self.confidence.first().is_some_and(|c| *c > threshold) {
            return Some(self.joints[0]);
        }
        let mut acc = [0.0, 0.0];
        let mut n = 0.0;
        for (j, c) in self.joints.iter().zip(&self.confidence) {
            if *c > threshold {
                acc[0] += j[0];
                acc[1] += j[1];
                n += 1.0;
            }
        }
        (n > 0.0).then(|| [acc[0] / n, acc[1] / n])
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoseEstimate {
    pub theta: Vec<Vec3>,
    pub beta: Vec<f64>,
    /// Image-plane joints predicted alongside the pose, when the source
    /// provides them.
    #[cfg_attr(feature = "serde", serde(default))]
    pub joints2d: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone)]
pub struct FrameObservations {
    /// Normalized disparity in `[0, 1]`.
    pub disparity: Grid<f64>,
    pub detections: Vec<JointDetection>,
    pub poses: Vec<PoseEstimate>,
    pub person_masks: Vec<Mask>,
    pub background: Mask,
}

impl FrameObservations {
    pub fn validate(&self, cam: &CameraIntrinsics) -> Result<()> {
        let (w, h) = (cam.width, cam.height);
        if self.disparity.width() != w || self.disparity.height() != h {
            return Err(Error::param("disparity", "dimensions must match the camera"));
        }
        if self.disparity.data().iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::param("disparity", "values must lie in [0, 1]"));
        }
        if self.background.width() != w || self.background.height() != h {
            return Err(Error::param("background mask", "dimensions must match the camera"));
        }
        if self.person_masks.iter().any(|m| m.width() != w || m.height() != h) {
            return Err(Error::param("person mask", "dimensions must match the camera"));
        }
        for d in &self.detections {
            if d.joints.len() != d.confidence.len() {
                return Err(Error::dim("joint confidences", d.joints.len(), d.confidence.len()));
            }
            if d.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::param("joint confidence", "must lie in [0, 1]"));
            }
            if d.joints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("2D joints"));
            }
        }
        for p in &self.poses {
            if p.theta.len() != NUM_JOINTS {
                return Err(Error::dim("pose estimate joints", NUM_JOINTS, p.theta.len()));
            }
            if p.theta.iter().flat_map(|w| w.0).chain(p.beta.iter().copied()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pose estimate"));
            }
        }
        Ok(())
    }
}

/// Splits a label image into per-instance masks and the background.
/// Label 0 is background, `1..=254` are instances (mask `label - 1`), 255
/// is void and belongs to neither.
pub fn masks_from_labels(labels: &Grid<u8>) -> (Vec<Mask>, Mask) {
    let max = labels.data().iter().filter(|l| **l != 255).copied().max().unwrap_or(0) as usize;
    let masks = (1..=max).map(|l| labels.map(|v| *v as usize == l)).collect();
    (masks, labels.map(|v| *v == 0))
}

/// Inverse of [`masks_from_labels`]; overlapping pixels go to the lower
/// instance.
pub fn labels_from_masks(masks: &[Mask], background: &Mask) -> Grid<u8> {
    let mut out = background.map(|b| if *b { 0u8 } else { 255 });
    for (i, m) in masks.iter().enumerate().rev() {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            if *v {
                *o = (i + 1).min(254) as u8;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ObservationConfig {
    /// Joints at or below this confidence are ignored for matching and voting.
    pub confidence_threshold: f64,
    /// Frame-to-frame gate on root displacement, as a fraction of the image
    /// diagonal.
    pub gate_fraction: f64,
    /// Tracker-built tracks with fewer frames are dropped.
    pub min_track_len: usize,
    pub person_erosion: usize,
    pub background_opening: usize,
    /// Supervise silhouettes with the eroded masks instead of the masks as
    /// loaded. Erosion trims thin limbs and biases the silhouette fit inward.
    pub erode_silhouette_masks: bool,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            confidence_threshold: 0.3,
            gate_fraction: 0.1,
            min_track_len: 5,
            person_erosion: 3,
            background_opening: 5,
            erode_silhouette_masks: false,
        }
    }
}

/// Erodes person masks, opens the background and removes from the
/// background every pixel claimed by a person.
pub fn postprocess_masks(frame: &mut FrameObservations, cfg: &ObservationConfig) {
    let mut bg = frame.background.opening(cfg.background_opening);
    for m in &frame.person_masks {
        for (b, p) in bg.data_mut().iter_mut().zip(m.data()) {
            *b &= !*p;
        }
    }
    frame.background = bg;
    for m in frame.person_masks.iter_mut() {
        *m = m.erode(cfg.person_erosion);
    }
}

/// Arithmetic mean of the shape vectors; errors on an empty set.
pub fn average_shape(values: &[&[f64]]) -> Result<Vec<f64>> {
    let first = values.first().ok_or(Error::Empty("shape estimates"))?;
    let mut acc = vec![0.0; first.len()];
    for v in values {
        if v.len() != acc.len() {
            return Err(Error::dim("shape estimate", acc.len(), v.len()));
        }
        for (a, b) in acc.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = values.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Winning mask per skeleton. Votes are the masks containing each confident
/// in-bounds joint; ties go to the larger confidence mass, then the lower
/// mask index. A mask claimed by several skeletons goes to the strongest
/// claim (more votes, then more confidence, then lower skeleton index).
pub fn assign_ids_by_mask(frame: &FrameObservations, cfg: &ObservationConfig) -> Vec<Option<usize>> {
    let mut claims: Vec<(usize, usize, f64)> = Vec::new(); // (skeleton, mask, conf)
    let mut votes_of: Vec<Option<(usize, f64)>> = Vec::new();
    for (s, det) in frame.detections.iter().enumerate() {
        let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for (j, c) in det.joints.iter().zip(&det.confidence) {
            if *c <= cfg.confidence_threshold {
                continue;
            }
            let (x, y) = (round(j[0]), round(j[1]));
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            for (m, mask) in frame.person_masks.iter().enumerate() {
                if x < mask.width() && y < mask.height() && *mask.get(x, y) {
                    let e = tally.entry(m).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += c;
                }
            }
        }
        let best = tally.iter().fold(None::<(usize, usize, f64)>, |acc, (&m, &(n, c))| match acc {
            Some((_, bn, bc)) if bn > n || (bn == n && bc >= c) => acc,
            _ => Some((m, n, c)),
        });
        votes_of.push(best.map(|(_, n, c)| (n, c)));
        if let Some((m, _, c)) = best {
            claims.push((s, m, c));
        }
    }
    claims.sort_by(|a, b| {
        let (na, nb) = (votes_of[a.0].unwrap().0, votes_of[b.0].unwrap().0);
        nb.cmp(&na).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0))
    });
    let mut out = vec![None; frame.detections.len()];
    let mut taken = vec![false; frame.person_masks.len()];
    for (s, m, _) in claims {
        if !taken[m] {
            taken[m] = true;
            out[s] = Some(m);
        }
    }
    out
}

/// Axis-aligned pixel bounding box `[x0, y0, x1, y1]`.
fn bbox(points: impl Iterator<Item = [f64; 2]>) -> Option<[f64; 4]> {
    let mut b: Option<[f64; 4]> = None;
    for p in points {
        let e = b.get_or_insert([p[0], p[1], p[0], p[1]]);
        e[0] = e[0].min(p[0]);
        e[1] = e[1].min(p[1]);
        e[2] = e[2].max(p[0]);
        e[3] = e[3].max(p[1]);
    }
    b
}

fn mask_bbox(mask: &Mask) -> Option<[f64; 4]> {
    let w = mask.width();
    bbox(
        mask.data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| [(i % w) as f64, (i / w) as f64]),
    )
}

/// Orthographic placement of 3D joints into a target pixel box: uniform
/// scale from the geometric mean of the extent ratios, centers aligned.
fn orthographic_fit(joints: &[Vec3], target: [f64; 4]) -> Vec<[f64; 2]> {
    let src = bbox(joints.iter().map(|j| [j.x(), j.y()])).unwrap();
    let (sw, sh) = (src[2] - src[0], src[3] - src[1]);
    let (tw, th) = (target[2] - target[0], target[3] - target[1]);
    let scale = if sw > 0.0 && sh > 0.0 && tw > 0.0 && th > 0.0 {
        sqrt((tw / sw) * (th / sh))
    } else if sh > 0.0 {
        th.max(1.0) / sh
    } else {
        1.0
    };
    let sc = [(src[0] + src[2]) * 0.5, (src[1] + src[3]) * 0.5];
    let tc = [(target[0] + target[2]) * 0.5, (target[1] + target[3]) * 0.5];
    joints
        .iter()
        .map(|j| [(j.x() - sc[0]) * scale + tc[0], (j.y() - sc[1]) * scale + tc[1]])
        .collect()
}

/// Mean pixel distance over joints the detection is confident about.
fn pairing_cost(pred: &[[f64; 2]], det: &JointDetection, threshold: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, q), c) in pred.iter().zip(&det.joints).zip(&det.confidence) {
        if *c > threshold {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            sum += sqrt(dx * dx + dy * dy);
            n += 1;
        }
    }
    if n == 0 {
        NO_OVERLAP_COST
    } else {
        sum / n as f64
    }
}

/// Cost matrix (poses x skeletons) used by [`match_pose_to_joints`].
pub fn pairing_costs(
    frame: &FrameObservations,
    model: Option<&BodyModel>,
    mask_ids: &[Option<usize>],
    cfg: &ObservationConfig,
) -> Result<Vec<f64>> {
    let (np, nd) = (frame.poses.len(), frame.detections.len());
    let mut cost = vec![0.0; np * nd];
    for (i, pose) in frame.poses.iter().enumerate() {
        let joints3d = match (&pose.joints2d, model) {
            (Some(_), _) => None,
            (None, Some(m)) => Some(m.regress_joints(&m.skin(&pose.theta, &pose.beta)?.vertices)?),
            (None, None) => {
                return Err(Error::param(
                    "pose estimate",
                    "needs projected joints or a body model for the orthographic fallback",
                ))
            }
        };
        for (j, det) in frame.detections.iter().enumerate() {
            let c = match (&pose.joints2d, &joints3d) {
                (Some(p2), _) => pairing_cost(p2, det, cfg.confidence_threshold),
                (None, Some(j3)) => {
                    let target = mask_ids
                        .get(j)
                        .copied()
                        .flatten()
                        .and_then(|m| mask_bbox(&frame.person_masks[m]))
                        .or_else(|| {
                            bbox(
                                det.joints
                                    .iter()
                                    .zip(&det.confidence)
                                    .filter(|(_, c)| **c > cfg.confidence_threshold)
                                    .map(|(p, _)| *p),
                            )
                        });
                    match target {
                        Some(t) => pairing_cost(&orthographic_fit(j3, t), det, cfg.confidence_threshold),
                        None => NO_OVERLAP_COST,
                    }
                }
                _ => unreachable!(),
            };
            cost[i * nd + j] = c;
        }
    }
    Ok(cost)
}

/// Minimum-cost `(pose, skeleton)` pairing. Returns an empty pairing when
/// either modality is empty.
pub fn match_pose_to_joints(
    frame: &FrameObservations,
    model: Option<&BodyModel>,
    mask_ids: &[Option<usize>],
    cfg: &ObservationConfig,
) -> Result<Vec<(usize, usize)>> {
    if frame.poses.is_empty() || frame.detections.is_empty() {
        return Ok(Vec::new());
    }
    let cost = pairing_costs(frame, model, mask_ids, cfg)?;
    Ok(hungarian(&cost, frame.poses.len(), frame.detections.len())?.pairs)
}

/// Indices of one person's observations in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrackEntry {
    pub joints: usize,
    pub pose: Option<usize>,
    pub mask: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrackedSequence {
    pub frames: Vec<FrameObservations>,
    /// `tracks[n][t]`.
    pub tracks: Vec<Vec<Option<TrackEntry>>>,
    pub track_ids: Vec<u32>,
    pub beta_avg: Vec<Vec<f64>>,
    /// Frames missing one of the modalities entirely.
    pub partial_frames: Vec<usize>,
    /// Per frame, the instance masks used as silhouette targets (same
    /// indexing as `frames[t].person_masks`).
    pub silhouette_masks: Vec<Vec<Mask>>,
}

impl TrackedSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
    pub fn num_persons(&self) -> usize {
        self.tracks.len()
    }
    pub fn entry(&self, t: usize, n: usize) -> Option<&TrackEntry> {
        self.tracks[n][t].as_ref()
    }
    pub fn detection(&self, t: usize, n: usize) -> Option<&JointDetection> {
        self.entry(t, n).map(|e| &self.frames[t].detections[e.joints])
    }
    pub fn pose(&self, t: usize, n: usize) -> Option<&PoseEstimate> {
        self.entry(t, n).and_then(|e| e.pose).map(|p| &self.frames[t].poses[p])
    }
    pub fn mask(&self, t: usize, n: usize) -> Option<&Mask> {
        self.entry(t, n).and_then(|e| e.mask).map(|m| &self.frames[t].person_masks[m])
    }
    pub fn silhouette_mask(&self, t: usize, n: usize) -> Option<&Mask> {
        self.entry(t, n).and_then(|e| e.mask).map(|m| &self.silhouette_masks[t][m])
    }
    pub fn presence(&self) -> Vec<Vec<bool>> {
        (0..self.num_frames())
            .map(|t| (0..self.num_persons()).map(|n| self.tracks[n][t].is_some()).collect())
            .collect()
    }
}

/// Post-processes masks, pairs modalities within each frame and links
/// skeletons over time. Detections carrying track ids are grouped by id;
/// otherwise a gated root-distance tracker assigns identities.
pub fn assemble(
    mut frames: Vec<FrameObservations>,
    cam: &CameraIntrinsics,
    model: Option<&BodyModel>,
    num_betas: usize,
    cfg: &ObservationConfig,
) -> Result<TrackedSequence> {
    if frames.is_empty() {
        return Err(Error::Empty("observation frames"));
    }
    let mut silhouette_masks = Vec::with_capacity(frames.len());
    for f in frames.iter_mut() {
        f.validate(cam)?;
        let raw = f.person_masks.clone();
        postprocess_masks(f, cfg);
        silhouette_masks.push(if cfg.erode_silhouette_masks { f.person_masks.clone() } else { raw });
    }
    let mut per_frame: Vec<Vec<TrackEntry>> = Vec::with_capacity(frames.len());
    let mut partial = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        if f.poses.is_empty() || f.detections.is_empty() || f.person_masks.is_empty() {
            partial.push(t);
        }
        let mask_ids = assign_ids_by_mask(f, cfg);
        let pairs = match_pose_to_joints(f, model, &mask_ids, cfg)?;
        let mut entries: Vec<TrackEntry> = (0..f.detections.len())
            .map(|j| TrackEntry {
                joints: j,
                pose: None,
                mask: mask_ids[j],
            })
            .collect();
        for (p, j) in pairs {
            entries[j].pose = Some(p);
        }
        per_frame.push(entries);
    }

    let t_len = frames.len();
    let all_have_ids = frames.iter().all(|f| f.detections.iter().all(|d| d.track_id.is_some()));
    let (tracks, ids) = if all_have_ids {
        let mut by_id: BTreeMap<u32, Vec<Option<TrackEntry>>> = BTreeMap::new();
        for (t, entries) in per_frame.iter().enumerate() {
            for e in entries {
                let id = frames[t].detections[e.joints].track_id.unwrap();
                let row = by_id.entry(id).or_insert_with(|| vec![None; t_len]);
                if row[t].is_some() {
                    return Err(Error::param("track id", "repeated within a frame"));
                }
                row[t] = Some(*e);
            }
        }
        let ids = by_id.keys().copied().collect();
        (by_id.into_values().collect::<Vec<_>>(), ids)
    } else {
        let gate = cfg.gate_fraction * cam.diagonal();
        let mut tracks: Vec<Vec<Option<TrackEntry>>> = Vec::new();
        let mut last_root: Vec<[f64; 2]> = Vec::new();
        for (t, entries) in per_frame.iter().enumerate() {
            let roots: Vec<Option<[f64; 2]>> = entries
                .iter()
                .map(|e| frames[t].detections[e.joints].root_pixel(cfg.confidence_threshold))
                .collect();
            let cand: Vec<usize> = (0..entries.len()).filter(|&i| roots[i].is_some()).collect();
            let mut cost = vec![0.0; last_root.len() * cand.len()];
            for (a, r) in last_root.iter().enumerate() {
                for (b, &i) in cand.iter().enumerate() {
                    let q = roots[i].unwrap();
                    cost[a * cand.len() + b] = sqrt((r[0] - q[0]) * (r[0] - q[0]) + (r[1] - q[1]) * (r[1] - q[1]));
                }
            }
            let mut used = vec![false; cand.len()];
            for (a, b) in hungarian(&cost, last_root.len(), cand.len())?.pairs {
                if cost[a * cand.len() + b] <= gate {
                    used[b] = true;
                    tracks[a][t] = Some(entries[cand[b]]);
                    last_root[a] = roots[cand[b]].unwrap();
                }
            }
            for (b, &i) in cand.iter().enumerate() {
                if !used[b] {
                    let mut row = vec![None; t_len];
                    row[t] = Some(entries[i]);
                    tracks.push(row);
                    last_root.push(roots[i].unwrap());
                }
            }
        }
        let kept: Vec<_> = tracks
            .into_iter()
            .filter(|row| row.iter().flatten().count() >= cfg.min_track_len)
            .collect();
        let ids = (0..kept.len() as u32).collect();
        (kept, ids)
    };
    if tracks.is_empty() {
        return Err(Error::Degenerate("no person tracks in the observations".into()));
    }

    let mut beta_avg = Vec::with_capacity(tracks.len());
    for row in &tracks {
        let betas: Vec<&[f64]> = row
            .iter()
            .enumerate()
            .filter_map(|(t, e)| e.and_then(|e| e.pose).map(|p| frames[t].poses[p].beta.as_slice()))
            .collect();
        beta_avg.push(if betas.is_empty() { vec![0.0; num_betas] } else { average_shape(&betas)? });
    }
    Ok(TrackedSequence {
        frames,
        tracks,
        track_ids: ids,
        beta_avg,
        partial_frames: partial,
        silhouette_masks,
    })
}
