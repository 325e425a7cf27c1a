//! Energy terms of the two-stage objective and their gradients.
//!
//! Stage I couples bodies and per-frame depth conversion through depth
//! consistency, 2D joints, silhouettes, pose/shape priors and scale/speed
//! regularizers. Stage II adds scene contact, foot slip and temporal
//! smoothness against filtered vertex trajectories.
//!
//! Gradients are returned with respect to the raw optimization vector (see
//! [`Layout`]), in which scale and near/far depth are stored in log form.

mod filter;
pub mod gradcheck;

use alloc::vec;
use alloc::vec::Vec;

pub use filter::{filter_vertices, one_euro_filter, OneEuroConfig};

use crate::body::{BodyModel, PersonParams, Skinned, NUM_JOINTS};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math::{exp, ln, sign0, Fnv, Vec3};
use crate::observations::TrackedSequence;
use crate::par;
use crate::raster::{render, render_backward, visibility_masks, MeshTopology, RasterConfig, Render};
use crate::scene::{FrameDepthParams, ScenePointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Depth,
    Joints,
    Silhouette,
    Smpl,
    Scale,
    Speed,
    Contact,
    Slip,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    I,
    II,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::Depth,
        Term::Joints,
        Term::Silhouette,
        Term::Smpl,
        Term::Scale,
        Term::Speed,
        Term::Contact,
        Term::Slip,
        Term::Temporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Depth => "e_depth",
            Term::Joints => "e_joints",
            Term::Silhouette => "e_silhouette",
            Term::Smpl => "e_smpl",
            Term::Scale => "e_scale",
            Term::Speed => "e_speed",
            Term::Contact => "e_contact",
            Term::Slip => "e_slip",
            Term::Temporal => "e_temporal",
        }
    }

    /// Accepts the term name with or without its `e_` prefix.
    pub fn parse(s: &str) -> Option<Term> {
        let s = s.trim();
        let s = s.strip_prefix("e_").unwrap_or(s);
        Term::ALL.into_iter().find(|t| &t.name()[2..] == s)
    }

    pub fn stage(self) -> Stage {
        match self {
            Term::Contact | Term::Slip | Term::Temporal => Stage::II,
            _ => Stage::I,
        }
    }

    /// Terms evaluated on the rendered depth/silhouette.
    pub fn uses_raster(self) -> bool {
        matches!(self, Term::Depth | Term::Silhouette)
    }
}

/// Set of enabled terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSet(u16);

impl TermSet {
    pub fn all() -> Self {
        TermSet((1 << Term::ALL.len()) - 1)
    }
    pub fn none() -> Self {
        TermSet(0)
    }
    pub fn only(t: Term) -> Self {
        TermSet(1 << t as u16)
    }
    pub fn with(self, t: Term) -> Self {
        TermSet(self.0 | 1 << t as u16)
    }
    pub fn without(self, t: Term) -> Self {
        TermSet(self.0 & !(1 << t as u16))
    }
    pub fn contains(self, t: Term) -> bool {
        self.0 & (1 << t as u16) != 0
    }
    pub fn iter(self) -> impl Iterator<Item = Term> {
        Term::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl Default for TermSet {
    fn default() -> Self {
        TermSet::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EnergyWeights {
    pub depth: f64,
    pub joints: f64,
    pub silhouette: f64,
    pub smpl: f64,
    pub scale: f64,
    pub speed: f64,
    pub contact: f64,
    pub slip: f64,
    pub temporal: f64,
    /// Contact and slip only act below this distance (meters).
    pub contact_threshold: f64,
    /// Apply the scale weight to the group-mean penalty as well.
    pub scale_weight_on_mean: bool,
    /// Huber width replacing the L1 kinks; `None` keeps plain L1 with a
    /// zero subgradient at the kink.
    pub l1_smoothing: Option<f64>,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            depth: 0.05,
            joints: 1.0,
            silhouette: 0.1,
            smpl: 0.002,
            scale: 1e-4,
            speed: 0.05,
            contact: 0.001,
            slip: 0.01,
            temporal: 0.002,
            contact_threshold: 0.20,
            scale_weight_on_mean: false,
            l1_smoothing: None,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.depth,
            self.joints,
            self.silhouette,
            self.smpl,
            self.scale,
            self.speed,
            self.contact,
            self.slip,
            self.temporal,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("weights", "must be finite and non-negative"));
        }
        if !(self.contact_threshold > 0.0) {
            return Err(Error::param("contact_threshold", "must be positive"));
        }
        if self.l1_smoothing.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::param("l1_smoothing", "must be positive"));
        }
        Ok(())
    }

    pub fn all_zero() -> Self {
        EnergyWeights {
            depth: 0.0,
            joints: 0.0,
            silhouette: 0.0,
            smpl: 0.0,
            scale: 0.0,
            speed: 0.0,
            contact: 0.0,
            slip: 0.0,
            temporal: 0.0,
            ..EnergyWeights::default()
        }
    }
}

/// Group of a raw coordinate, used for per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Theta,
    Beta,
    Gamma,
    Scale,
    Depth,
}

/// Placement of every free variable in the raw optimization vector.
/// Per person: `theta[t][k][c]`, `beta[b]`, `gamma[t][c] / s`, `log s`;
/// then per frame `log z_near`, `log (z_far - z_near)`.
///
/// Storing the translation divided by the scale makes a step in `log s`
/// alone slide the person along the camera rays, which leaves the 2D
/// projection unchanged and decouples depth from image evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub persons: usize,
    pub frames: usize,
    pub betas: usize,
}

impl Layout {
    pub fn person_block(&self) -> usize {
        self.frames * NUM_JOINTS * 3 + self.betas + self.frames * 3 + 1
    }
    pub fn len(&self) -> usize {
        self.persons * self.person_block() + 2 * self.frames
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn theta(&self, n: usize, t: usize, k: usize) -> usize {
        n * self.person_block() + (t * NUM_JOINTS + k) * 3
    }
    pub fn beta(&self, n: usize) -> usize {
        n * self.person_block() + self.frames * NUM_JOINTS * 3
    }
    pub fn gamma(&self, n: usize, t: usize) -> usize {
        self.beta(n) + self.betas + t * 3
    }
    pub fn log_scale(&self, n: usize) -> usize {
        self.beta(n) + self.betas + self.frames * 3
    }
    pub fn log_near(&self, t: usize) -> usize {
        self.persons * self.person_block() + 2 * t
    }
    pub fn log_gap(&self, t: usize) -> usize {
        self.log_near(t) + 1
    }

    pub fn group(&self, i: usize) -> Group {
        let pb = self.person_block();
        if i >= self.persons * pb {
            return Group::Depth;
        }
        let r = i % pb;
        let th = self.frames * NUM_JOINTS * 3;
        if r < th {
            Group::Theta
        } else if r < th + self.betas {
            Group::Beta
        } else if r < th + self.betas + self.frames * 3 {
            Group::Gamma
        } else {
            Group::Scale
        }
    }
}

/// Every optimized quantity of a sequence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimState {
    pub persons: Vec<PersonParams>,
    pub depth: Vec<FrameDepthParams>,
    /// `presence[t][n]`.
    pub presence: Vec<Vec<bool>>,
}

impl OptimState {
    pub fn layout(&self) -> Layout {
        Layout {
            persons: self.persons.len(),
            frames: self.depth.len(),
            betas: self.persons.first().map_or(0, |p| p.beta.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.depth.len();
        if self.presence.len() != t {
            return Err(Error::dim("presence frames", t, self.presence.len()));
        }
        for p in &self.persons {
            p.validate()?;
            if p.num_frames() != t {
                return Err(Error::dim("person frames", t, p.num_frames()));
            }
        }
        for row in &self.presence {
            if row.len() != self.persons.len() {
                return Err(Error::dim("presence persons", self.persons.len(), row.len()));
            }
        }
        for d in &self.depth {
            d.validate()?;
        }
        Ok(())
    }

    pub fn to_raw(&self) -> Vec<f64> {
        let l = self.layout();
        let mut x = vec![0.0; l.len()];
        for (n, p) in self.persons.iter().enumerate() {
            for (t, th) in p.theta.iter().enumerate() {
                for (k, w) in th.iter().enumerate() {
                    x[l.theta(n, t, k)..l.theta(n, t, k) + 3].copy_from_slice(&w.0);
                }
                x[l.gamma(n, t)..l.gamma(n, t) + 3].copy_from_slice(&(p.gamma[t] * (1.0 / p.scale)).0);
            }
            x[l.beta(n)..l.beta(n) + l.betas].copy_from_slice(&p.beta);
            x[l.log_scale(n)] = ln(p.scale);
        }
        for (t, d) in self.depth.iter().enumerate() {
            x[l.log_near(t)] = ln(d.z_near);
            x[l.log_gap(t)] = ln(d.z_far - d.z_near);
        }
        x
    }

    /// Rebuilds a state from a raw vector. Positivity and ordering hold by
    /// construction unless the exponentials under- or overflow, which is
    /// reported as an error.
    pub fn from_raw(layout: Layout, raw: &[f64], presence: Vec<Vec<bool>>) -> Result<OptimState> {
        if raw.len() != layout.len() {
            return Err(Error::dim("raw state", layout.len(), raw.len()));
        }
        let v3 = |i: usize| Vec3::new(raw[i], raw[i + 1], raw[i + 2]);
        let persons = (0..layout.persons)
            .map(|n| {
                let scale = exp(raw[layout.log_scale(n)]);
                PersonParams {
                    theta: (0..layout.frames)
                        .map(|t| (0..NUM_JOINTS).map(|k| v3(layout.theta(n, t, k))).collect())
                        .collect(),
                    beta: raw[layout.beta(n)..layout.beta(n) + layout.betas].to_vec(),
                    gamma: (0..layout.frames).map(|t| v3(layout.gamma(n, t)) * scale).collect(),
                    scale,
                }
            })
            .collect();
        let depth = (0..layout.frames)
            .map(|t| {
                let z_near = exp(raw[layout.log_near(t)]);
                FrameDepthParams {
                    z_near,
                    z_far: z_near + exp(raw[layout.log_gap(t)]),
                }
            })
            .collect();
        let s = OptimState {
            persons,
            depth,
            presence,
        };
        s.check_positive()?;
        Ok(s)
    }

    /// Positivity of scales and strict near/far ordering.
    pub fn check_positive(&self) -> Result<()> {
        for p in &self.persons {
            if !(p.scale > 0.0 && p.scale.is_finite()) {
                return Err(Error::Degenerate("person scale left the positive range".into()));
            }
        }
        for d in &self.depth {
            if !(d.z_near > 0.0 && d.z_far > d.z_near && d.z_far.is_finite()) {
                return Err(Error::Degenerate("depth parameters lost positivity or ordering".into()));
            }
        }
        Ok(())
    }

    pub fn present(&self, t: usize, n: usize) -> bool {
        self.presence[t][n]
    }
}

/// Configuration shared by all evaluations of one problem.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ProblemConfig {
    pub raster: RasterConfig,
    /// Integer downsampling of the raster terms.
    pub downsample: usize,
    /// Unit vector pointing toward the ground in camera coordinates.
    pub down_axis: Vec3,
    pub frame_rate: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            raster: RasterConfig::default(),
            downsample: 2,
            down_axis: Vec3::new(0.0, 1.0, 0.0),
            frame_rate: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointObs {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

/// Observations of one person in one frame, in evaluation-ready form.
#[derive(Debug, Clone)]
pub struct PersonObs {
    pub joints: Option<JointObs>,
    pub theta_hat: Option<Vec<Vec3>>,
    /// Normalized disparity of every pixel under the full-resolution mask.
    pub mask_disparity: Vec<f64>,
    /// Mask at raster resolution, `None` when empty.
    pub mask_raster: Option<Mask>,
    /// Silhouette target at raster resolution, `None` when empty.
    pub silhouette_raster: Option<Mask>,
}

/// Fixed inputs of an optimization: model, cameras and per-(t, n)
/// observations.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub model: &'a BodyModel,
    pub seq: &'a TrackedSequence,
    pub topology: MeshTopology,
    pub cam: CameraIntrinsics,
    pub raster_cam: CameraIntrinsics,
    pub config: ProblemConfig,
    /// `obs[t][n]`.
    pub obs: Vec<Vec<Option<PersonObs>>>,
    pub beta_hat: Vec<Vec<f64>>,
    pub presence: Vec<Vec<bool>>,
    pub frames: usize,
    pub persons: usize,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a BodyModel, seq: &'a TrackedSequence, cam: CameraIntrinsics, config: ProblemConfig) -> Result<Self> {
        cam.validate()?;
        if config.downsample == 0 {
            return Err(Error::param("downsample", "must be at least 1"));
        }
        let dn = config.down_axis.norm();
        if !(dn > 0.0) {
            return Err(Error::param("down_axis", "must be non-zero"));
        }
        let config = ProblemConfig {
            down_axis: config.down_axis * (1.0 / dn),
            ..config
        };
        let raster_cam = cam.downsampled(config.downsample);
        let (frames, persons) = (seq.num_frames(), seq.num_persons());
        let mut obs = Vec::with_capacity(frames);
        for t in 0..frames {
            let f = &seq.frames[t];
            let mut row = Vec::with_capacity(persons);
            for n in 0..persons {
                let Some(_) = seq.entry(t, n) else {
                    row.push(None);
                    continue;
                };
                let joints = seq.detection(t, n).map(|d| JointObs {
                    points: d.joints.clone(),
                    confidence: d.confidence.clone(),
                });
                if let Some(j) = &joints {
                    if j.points.len() != model.num_eval_joints() {
                        return Err(Error::dim("2D joints", model.num_eval_joints(), j.points.len()));
                    }
                }
                let (mask_disparity, mask_raster, silhouette_raster) = match seq.mask(t, n) {
                    Some(m) => {
                        let d: Vec<f64> = m
                            .data()
                            .iter()
                            .zip(f.disparity.data())
                            .filter(|(b, _)| **b)
                            .map(|(_, d)| *d)
                            .collect();
                        let mr = m.downsample_binary(config.downsample);
                        let sr = seq.silhouette_mask(t, n).unwrap_or(m).downsample_binary(config.downsample);
                        (d, (mr.count() > 0).then_some(mr), (sr.count() > 0).then_some(sr))
                    }
                    None => (Vec::new(), None, None),
                };
                row.push(Some(PersonObs {
                    joints,
                    theta_hat: seq.pose(t, n).map(|p| p.theta.clone()),
                    mask_disparity,
                    mask_raster,
                    silhouette_raster,
                }));
            }
            obs.push(row);
        }
        for b in &seq.beta_avg {
            if b.len() != model.num_betas() {
                return Err(Error::dim("shape estimate", model.num_betas(), b.len()));
            }
        }
        Ok(Problem {
            model,
            seq,
            topology: MeshTopology::new(model.faces()),
            cam,
            raster_cam,
            config,
            obs,
            beta_hat: seq.beta_avg.clone(),
            presence: seq.presence(),
            frames,
            persons,
        })
    }

    /// Frames in which at least one person is present.
    pub fn active_frames(&self) -> Vec<usize> {
        (0..self.frames).filter(|&t| self.presence[t].iter().any(|p| *p)).collect()
    }

    fn check_state(&self, st: &OptimState) -> Result<()> {
        st.validate()?;
        if st.persons.len() != self.persons || st.depth.len() != self.frames {
            return Err(Error::param("state", "does not match the problem dimensions"));
        }
        if st.presence != self.presence {
            return Err(Error::param("state", "presence differs from the observations"));
        }
        if st.persons.iter().any(|p| p.beta.len() != self.model.num_betas()) {
            return Err(Error::dim("beta", self.model.num_betas(), st.persons[0].beta.len()));
        }
        Ok(())
    }
}

/// Posed mesh of one person in one frame.
#[derive(Debug, Clone)]
pub struct Posed {
    pub skinned: Skinned,
    /// `s * V + gamma`.
    pub world: Vec<Vec3>,
}

/// Skins every present `(t, n)`; indexed `t * persons + n`.
pub fn pose_all(model: &BodyModel, st: &OptimState) -> Result<Vec<Option<Posed>>> {
    let nn = st.persons.len();
    par::map(st.depth.len() * nn, |i| {
        let (t, n) = (i / nn, i % nn);
        if !st.presence[t][n] {
            return Ok(None);
        }
        let p = &st.persons[n];
        let skinned = model.skin(&p.theta[t], &p.beta)?;
        let world = skinned.vertices.iter().map(|v| *v * p.scale + p.gamma[t]).collect();
        Ok(Some(Posed { skinned, world }))
    })
    .into_iter()
    .collect()
}

/// Evaluation joints of every present `(t, n)`, `[t][n]`.
pub fn joints_all(model: &BodyModel, st: &OptimState) -> Result<Vec<Vec<Option<Vec<Vec3>>>>> {
    let nn = st.persons.len();
    let posed = pose_all(model, st)?;
    let mut out = vec![vec![None; nn]; st.depth.len()];
    for (i, p) in posed.into_iter().enumerate() {
        if let Some(p) = p {
            out[i / nn][i % nn] = Some(model.regress_joints(&p.world)?);
        }
    }
    Ok(out)
}

/// Temporally filtered live meshes, held fixed between refreshes.
#[derive(Debug, Clone)]
pub struct FilteredTargets {
    /// `v_bar[t][n]`.
    pub v_bar: Vec<Vec<Option<Vec<Vec3>>>>,
}

/// Filters each person's mesh trajectory over runs of consecutive present
/// frames.
pub fn compute_targets(model: &BodyModel, st: &OptimState, rate: f64, cfg: &OneEuroConfig) -> Result<FilteredTargets> {
    let (tn, nn) = (st.depth.len(), st.persons.len());
    let posed = pose_all(model, st)?;
    let mut v_bar = vec![vec![None; nn]; tn];
    for n in 0..nn {
        let mut t = 0;
        while t < tn {
            if !st.presence[t][n] {
                t += 1;
                continue;
            }
            let start = t;
            while t < tn && st.presence[t][n] {
                t += 1;
            }
            let run: Vec<&[Vec3]> = (start..t)
                .map(|u| posed[u * nn + n].as_ref().unwrap().world.as_slice())
                .collect();
            for (i, f) in filter_vertices(&run, rate, cfg)?.into_iter().enumerate() {
                v_bar[start + i][n] = Some(f);
            }
        }
    }
    Ok(FilteredTargets { v_bar })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TermValues {
    pub depth: f64,
    pub joints: f64,
    pub silhouette: f64,
    pub smpl: f64,
    pub scale: f64,
    pub speed: f64,
    pub contact: f64,
    pub slip: f64,
    pub temporal: f64,
}

impl TermValues {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Depth => self.depth,
            Term::Joints => self.joints,
            Term::Silhouette => self.silhouette,
            Term::Smpl => self.smpl,
            Term::Scale => self.scale,
            Term::Speed => self.speed,
            Term::Contact => self.contact,
            Term::Slip => self.slip,
            Term::Temporal => self.temporal,
        }
    }
    /// Adds `v` to the slot of `t`.
    pub fn add(&mut self, t: Term, v: f64) {
        *self.slot(t) += v;
    }
    fn slot(&mut self, t: Term) -> &mut f64 {
        match t {
            Term::Depth => &mut self.depth,
            Term::Joints => &mut self.joints,
            Term::Silhouette => &mut self.silhouette,
            Term::Smpl => &mut self.smpl,
            Term::Scale => &mut self.scale,
            Term::Speed => &mut self.speed,
            Term::Contact => &mut self.contact,
            Term::Slip => &mut self.slip,
            Term::Temporal => &mut self.temporal,
        }
    }
    pub fn stage_one(&self) -> f64 {
        self.depth + self.joints + self.silhouette + self.smpl + self.scale + self.speed
    }
    pub fn stage_two(&self) -> f64 {
        self.contact + self.slip + self.temporal
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Diagnostics {
    /// Depth terms whose observed mask missed the render, evaluated on the
    /// render's own coverage instead.
    pub depth_fallbacks: usize,
    /// Depth/silhouette terms skipped because nothing was rendered.
    pub empty_renders: usize,
    /// Joints excluded for lying behind the camera.
    pub joints_behind: usize,
    /// `(t, n)` within the contact threshold.
    pub contacts: usize,
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub terms: TermValues,
    pub stage_one: f64,
    pub stage_two: f64,
    pub total: f64,
    /// Gradient of `total` with respect to the raw vector.
    pub gradient: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Fingerprint of every discrete decision of the evaluation (z-buffer
    /// winners, lowest vertices, nearest points, contact gates, L1 signs).
    pub signature: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub stage: Stage,
    pub terms: TermSet,
    /// Frames on which raster terms are evaluated; `None` means all.
    pub raster_frames: Option<&'a [usize]>,
    pub cloud: Option<&'a ScenePointCloud>,
    pub targets: Option<&'a FilteredTargets>,
}

impl<'a> EvalOptions<'a> {
    pub fn stage_one() -> Self {
        EvalOptions {
            stage: Stage::I,
            terms: TermSet::all(),
            raster_frames: None,
            cloud: None,
            targets: None,
        }
    }
}

/// L1 penalty (or its Huber smoothing) and derivative.
#[inline]
pub fn l1(x: f64, smoothing: Option<f64>) -> (f64, f64) {
    match smoothing {
        Some(d) if x.abs() <= d => (x * x / (2.0 * d), x / d),
        Some(d) => (x.abs() - 0.5 * d, sign0(x)),
        None => (x.abs(), sign0(x)),
    }
}

/// Mean log-depth over a mask. Non-positive depths are clamped to 1e-4 m;
/// returns `None` for an empty mask, else the mean and the clamp count.
pub fn masked_log_depth_mean(depth: &Grid<f64>, mask: &Mask) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut clamped = 0usize;
    for (d, m) in depth.data().iter().zip(mask.data()) {
        if *m {
            let d = if *d > 0.0 {
                *d
            } else {
                clamped += 1;
                1e-4
            };
            sum += ln(d);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, clamped))
}

/// Scale prior and its gradient with respect to each scale.
pub fn scale_energy(scales: &[f64], w: &EnergyWeights) -> (f64, Vec<f64>) {
    let sq: f64 = scales.iter().map(|s| (s - 1.0) * (s - 1.0)).sum();
    let mean: f64 = scales.iter().map(|s| s - 1.0).sum();
    let wm = if w.scale_weight_on_mean { w.scale } else { 1.0 };
    let e = w.scale * sq + wm * mean * mean;
    let g = scales.iter().map(|s| 2.0 * w.scale * (s - 1.0) + 2.0 * wm * mean).collect();
    (e, g)
}

/// Unweighted root-speed penalty over a track with gaps, and its gradient.
pub fn speed_energy(gammas: &[Option<Vec3>]) -> (f64, Vec<Vec3>) {
    let mut e = 0.0;
    let mut g = vec![Vec3::ZERO; gammas.len()];
    for t in 1..gammas.len() {
        if let (Some(a), Some(b)) = (gammas[t - 1], gammas[t]) {
            let d = b - a;
            e += d.norm_sq();
            g[t] += d * 2.0;
            g[t - 1] -= d * 2.0;
        }
    }
    (e, g)
}

/// Lowest vertex of a mesh along `down` (largest projection; ties to the
/// lower index) and its pairing with the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactProbe {
    pub vertex: usize,
    pub position: Vec3,
    pub point: usize,
    /// Vertex minus nearest scene point.
    pub offset: Vec3,
    /// L1 length of `offset`.
    pub distance: f64,
}

pub fn lowest_vertex(mesh: &[Vec3], down: Vec3) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, v) in mesh.iter().enumerate() {
        let h = v.dot(&down);
        if h > bv {
            bv = h;
            best = i;
        }
    }
    best
}

pub fn contact_probe(mesh: &[Vec3], down: Vec3, cloud: &ScenePointCloud) -> ContactProbe {
    let vertex = lowest_vertex(mesh, down);
    let position = mesh[vertex];
    let (point, p, _) = cloud.nearest_point(&position);
    let offset = position - p;
    ContactProbe {
        vertex,
        position,
        point,
        offset,
        distance: offset.l1(),
    }
}

struct FrameRaster {
    depth: f64,
    silhouette: f64,
    g_near: f64,
    g_far: f64,
    grads: Vec<(usize, Vec<Vec3>)>,
    signature: u64,
    fallbacks: usize,
    empty: usize,
}

fn raster_frame(
    p: &Problem,
    st: &OptimState,
    posed: &[Option<Posed>],
    w: &EnergyWeights,
    t: usize,
    want_depth: bool,
    want_sil: bool,
) -> FrameRaster {
    let nn = p.persons;
    let cfg = &p.config.raster;
    let faces = p.model.faces();
    let mut out = FrameRaster {
        depth: 0.0,
        silhouette: 0.0,
        g_near: 0.0,
        g_far: 0.0,
        grads: Vec::new(),
        signature: 0,
        fallbacks: 0,
        empty: 0,
    };
    let mut sig = Fnv::new();
    let members: Vec<usize> = (0..nn).filter(|&n| posed[t * nn + n].is_some()).collect();
    let renders: Vec<Render> = members
        .iter()
        .map(|&n| render(&p.raster_cam, &posed[t * nn + n].as_ref().unwrap().world, faces, &p.topology, cfg))
        .collect();
    let owners = {
        let depths: Vec<&Grid<f64>> = renders.iter().map(|r| &r.depth).collect();
        visibility_masks(&depths)
    };
    let dp = st.depth[t];
    for (i, &n) in members.iter().enumerate() {
        let Some(obs) = p.obs[t][n].as_ref() else { continue };
        let Some(mask) = obs.mask_raster.as_ref() else { continue };
        let r = &renders[i];
        sig.push(r.signature());
        let (w_px, h_px) = (r.depth.width(), r.depth.height());
        let mut gd: Option<Grid<f64>> = None;
        let mut gs: Option<Grid<f64>> = None;

        if want_depth && !obs.mask_disparity.is_empty() {
            let mut sel: Vec<usize> = (0..w_px * h_px)
                .filter(|&k| mask.data()[k] && r.depth.data()[k] > 0.0)
                .collect();
            if sel.is_empty() {
                sel = (0..w_px * h_px).filter(|&k| r.depth.data()[k] > 0.0).collect();
                if !sel.is_empty() {
                    out.fallbacks += 1;
                }
            }
            if sel.is_empty() {
                out.empty += 1;
            } else {
                let inv = 1.0 / sel.len() as f64;
                let m_left = sel.iter().map(|&k| ln(r.depth.data()[k])).sum::<f64>() * inv;
                let inv_r = 1.0 / obs.mask_disparity.len() as f64;
                let (mut m_right, mut dn, mut df) = (0.0, 0.0, 0.0);
                for &d in &obs.mask_disparity {
                    let z = dp.depth(d);
                    let (gn, gf) = dp.depth_gradient(d);
                    m_right += ln(z);
                    dn += gn / z;
                    df += gf / z;
                }
                m_right *= inv_r;
                let res = m_left - m_right;
                out.depth += w.depth * res * res;
                let c = 2.0 * w.depth * res;
                out.g_near -= c * dn * inv_r;
                out.g_far -= c * df * inv_r;
                let mut g = Grid::new(w_px, h_px, 0.0);
                for &k in &sel {
                    g.data_mut()[k] = c * inv / r.depth.data()[k];
                }
                gd = Some(g);
            }
        }

        if let (true, Some(sil)) = (want_sil, obs.silhouette_raster.as_ref()) {
            let inv = 1.0 / sil.count() as f64;
            let mut g = Grid::new(w_px, h_px, 0.0);
            let mut e = 0.0;
            for k in 0..w_px * h_px {
                let hidden = owners.iter().enumerate().any(|(j, o)| j != i && o.data()[k]);
                if hidden {
                    continue;
                }
                let target = if sil.data()[k] { 1.0 } else { 0.0 };
                let res = r.silhouette.data()[k] - target;
                e += res * res;
                g.data_mut()[k] = 2.0 * w.silhouette * inv * res;
            }
            out.silhouette += w.silhouette * inv * e;
            gs = Some(g);
        }

        if gd.is_some() || gs.is_some() {
            let world = &posed[t * nn + n].as_ref().unwrap().world;
            let mut gv = vec![Vec3::ZERO; world.len()];
            render_backward(r, world, faces, cfg, gd.as_ref(), gs.as_ref(), &mut gv);
            out.grads.push((n, gv));
        }
    }
    out.signature = sig.0;
    out
}

/// Evaluates the enabled terms of `stage` and the gradient of their sum.
pub fn evaluate(p: &Problem, st: &OptimState, w: &EnergyWeights, o: &EvalOptions) -> Result<EnergyReport> {
    p.check_state(st)?;
    w.validate()?;
    let (tn, nn) = (p.frames, p.persons);
    let layout = st.layout();
    let active = |t: Term| o.terms.contains(t) && (t.stage() == Stage::I || o.stage == Stage::II);
    let contact_on = (active(Term::Contact) || active(Term::Slip)) && o.cloud.is_some();
    let temporal_on = active(Term::Temporal) && o.targets.is_some();
    let need_mesh = active(Term::Depth) || active(Term::Joints) || active(Term::Silhouette) || contact_on || temporal_on;

    let posed = if need_mesh { pose_all(p.model, st)? } else { vec![None; tn * nn] };
    let vn = p.model.num_vertices();
    let mut gw: Vec<Vec<Vec3>> = vec![Vec::new(); tn * nn];
    fn gw_at(gw: &mut [Vec<Vec3>], i: usize, vn: usize) -> &mut Vec<Vec3> {
        if gw[i].is_empty() {
            gw[i] = vec![Vec3::ZERO; vn];
        }
        &mut gw[i]
    }
    // Natural-parameter gradient in raw layout: the scale slot holds dE/ds
    // and the depth slots hold dE/dz_near, dE/dz_far until the final
    // conversion.
    let mut g = vec![0.0; layout.len()];
    let mut terms = TermValues::default();
    let mut diag = Diagnostics::default();
    let mut sig = Fnv::new();
    let l1s = w.l1_smoothing;

    if active(Term::Joints) {
        let diagonal = p.cam.diagonal();
        let per: Vec<Result<Option<(f64, Vec<Vec3>, usize, u64)>>> = par::map(tn * nn, |i| {
            let (t, n) = (i / nn, i % nn);
            let (Some(posed), Some(obs)) = (posed[i].as_ref(), p.obs[t][n].as_ref()) else { return Ok(None) };
            let Some(j2) = obs.joints.as_ref() else { return Ok(None) };
            let joints = p.model.regress_joints(&posed.world)?;
            let mut gj = vec![Vec3::ZERO; joints.len()];
            let mut e = 0.0;
            let mut behind = 0;
            let mut s = Fnv::new();
            for (k, jt) in joints.iter().enumerate() {
                let c = j2.confidence[k];
                if c <= 0.0 {
                    continue;
                }
                match p.cam.project_with_jacobian(jt) {
                    None => {
                        behind += 1;
                        s.push(k as u64);
                    }
                    Some((uv, jac)) => {
                        let r0 = (uv[0] - j2.points[k][0]) / diagonal;
                        let r1 = (uv[1] - j2.points[k][1]) / diagonal;
                        e += c * (r0 * r0 + r1 * r1);
                        let f = 2.0 * c * w.joints / diagonal;
                        gj[k] = (jac[0] * r0 + jac[1] * r1) * f;
                    }
                }
            }
            let mut gv = vec![Vec3::ZERO; vn];
            p.model.regress_joints_backward(&gj, &mut gv);
            Ok(Some((w.joints * e, gv, behind, s.0)))
        });
        for (i, r) in per.into_iter().enumerate() {
            if let Some((e, gv, behind, s)) = r? {
                terms.joints += e;
                diag.joints_behind += behind;
                sig.push(s);
                for (a, b) in gw_at(&mut gw, i, vn).iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
    }

    if active(Term::Depth) || active(Term::Silhouette) {
        let frames: Vec<usize> = match o.raster_frames {
            Some(f) => f.to_vec(),
            None => (0..tn).collect(),
        };
        if frames.iter().any(|&t| t >= tn) {
            return Err(Error::param("raster frames", "index out of range"));
        }
        let results = par::map(frames.len(), |i| {
            raster_frame(p, st, &posed, w, frames[i], active(Term::Depth), active(Term::Silhouette))
        });
        for (&t, r) in frames.iter().zip(results) {
            terms.depth += r.depth;
            terms.silhouette += r.silhouette;
            g[layout.log_near(t)] += r.g_near;
            g[layout.log_gap(t)] += r.g_far;
            diag.depth_fallbacks += r.fallbacks;
            diag.empty_renders += r.empty;
            sig.push(r.signature);
            for (n, gv) in r.grads {
                for (a, b) in gw_at(&mut gw, t * nn + n, vn).iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
    }

    if active(Term::Smpl) {
        let mut e = 0.0;
        for t in 0..tn {
            for n in 0..nn {
                let Some(th) = p.obs[t][n].as_ref().and_then(|o| o.theta_hat.as_ref()) else { continue };
                let person = &st.persons[n];
                for k in 0..NUM_JOINTS {
                    for c in 0..3 {
                        let (v, d) = l1(person.theta[t][k].0[c] - th[k].0[c], l1s);
                        e += v;
                        sig.push(d.to_bits());
                        g[layout.theta(n, t, k) + c] += w.smpl * d;
                    }
                }
                for (b, (x, xh)) in person.beta.iter().zip(&p.beta_hat[n]).enumerate() {
                    let (v, d) = l1(x - xh, l1s);
                    e += v;
                    sig.push(d.to_bits());
                    g[layout.beta(n) + b] += w.smpl * d;
                }
            }
        }
        terms.smpl = w.smpl * e;
    }

    if active(Term::Scale) && nn > 0 {
        let scales: Vec<f64> = st.persons.iter().map(|p| p.scale).collect();
        let (e, gs) = scale_energy(&scales, w);
        terms.scale = e;
        for (n, v) in gs.into_iter().enumerate() {
            g[layout.log_scale(n)] += v;
        }
    }

    if active(Term::Speed) {
        let mut e = 0.0;
        for n in 0..nn {
            let track: Vec<Option<Vec3>> = (0..tn).map(|t| st.presence[t][n].then(|| st.persons[n].gamma[t])).collect();
            let (v, gs) = speed_energy(&track);
            e += v;
            for (t, gv) in gs.into_iter().enumerate() {
                for c in 0..3 {
                    g[layout.gamma(n, t) + c] += w.speed * gv.0[c];
                }
            }
        }
        terms.speed = w.speed * e;
    }

    if contact_on {
        let cloud = o.cloud.unwrap();
        let down = p.config.down_axis;
        let probes: Vec<Option<ContactProbe>> = par::map(tn * nn, |i| posed[i].as_ref().map(|ps| contact_probe(&ps.world, down, cloud)));
        let thr = w.contact_threshold;
        for pr in probes.iter().flatten() {
            sig.push(pr.vertex as u64);
            sig.push(pr.point as u64);
            sig.push((pr.distance < thr) as u64);
        }
        if active(Term::Contact) {
            let mut e = 0.0;
            for (i, pr) in probes.iter().enumerate() {
                let Some(pr) = pr else { continue };
                if pr.distance >= thr {
                    continue;
                }
                diag.contacts += 1;
                let mut gv = Vec3::ZERO;
                for c in 0..3 {
                    let (v, d) = l1(pr.offset.0[c], l1s);
                    e += v;
                    gv.0[c] = w.contact * d;
                    sig.push(d.to_bits());
                }
                gw_at(&mut gw, i, vn)[pr.vertex] += gv;
            }
            terms.contact = w.contact * e;
        }
        if active(Term::Slip) {
            let mut e = 0.0;
            for n in 0..nn {
                for t in 1..tn {
                    let (Some(a), Some(b)) = (probes[(t - 1) * nn + n], probes[t * nn + n]) else { continue };
                    if a.distance >= thr || b.distance >= thr {
                        continue;
                    }
                    let delta = b.position - a.position;
                    let mut gv = Vec3::ZERO;
                    for c in 0..3 {
                        let (v, d) = l1(delta.0[c], l1s);
                        e += v;
                        gv.0[c] = w.slip * d;
                        sig.push(d.to_bits());
                    }
                    gw_at(&mut gw, t * nn + n, vn)[b.vertex] += gv;
                    gw_at(&mut gw, (t - 1) * nn + n, vn)[a.vertex] -= gv;
                }
            }
            terms.slip = w.slip * e;
        }
    }

    if temporal_on {
        let targets = o.targets.unwrap();
        if targets.v_bar.len() != tn {
            return Err(Error::dim("filtered targets", tn, targets.v_bar.len()));
        }
        let mut e = 0.0;
        for n in 0..nn {
            for t in 1..tn {
                let (Some(a), Some(b)) = (posed[(t - 1) * nn + n].as_ref(), posed[t * nn + n].as_ref()) else { continue };
                let (Some(ta), Some(tb)) = (targets.v_bar[t - 1][n].as_ref(), targets.v_bar[t][n].as_ref()) else { continue };
                let mut gb = vec![Vec3::ZERO; vn];
                for v in 0..vn {
                    let r = (b.world[v] - a.world[v]) - (tb[v] - ta[v]);
                    e += r.norm_sq();
                    gb[v] = r * (2.0 * w.temporal);
                }
                for (x, y) in gw_at(&mut gw, t * nn + n, vn).iter_mut().zip(&gb) {
                    *x += *y;
                }
                for (x, y) in gw_at(&mut gw, (t - 1) * nn + n, vn).iter_mut().zip(&gb) {
                    *x -= *y;
                }
            }
        }
        terms.temporal = w.temporal * e;
    }

    // Vertex gradients into body parameters.
    let back: Vec<Result<Option<(Vec<Vec3>, Vec<f64>, f64, Vec3)>>> = par::map(tn * nn, |i| {
        if gw[i].is_empty() {
            return Ok(None);
        }
        let n = i % nn;
        let ps = posed[i].as_ref().unwrap();
        let s = st.persons[n].scale;
        let mut g_scale = 0.0;
        let mut g_gamma = Vec3::ZERO;
        let gv: Vec<Vec3> = gw[i]
            .iter()
            .zip(&ps.skinned.vertices)
            .map(|(gwv, v)| {
                g_scale += gwv.dot(v);
                g_gamma += *gwv;
                *gwv * s
            })
            .collect();
        let mut gt = vec![Vec3::ZERO; NUM_JOINTS];
        let mut gb = vec![0.0; layout.betas];
        p.model.skin_backward(&ps.skinned, &gv, &mut gt, &mut gb)?;
        Ok(Some((gt, gb, g_scale, g_gamma)))
    });
    for (i, r) in back.into_iter().enumerate() {
        let Some((gt, gb, gs, gg)) = r? else { continue };
        let (t, n) = (i / nn, i % nn);
        for (k, v) in gt.iter().enumerate() {
            for c in 0..3 {
                g[layout.theta(n, t, k) + c] += v.0[c];
            }
        }
        for (b, v) in gb.iter().enumerate() {
            g[layout.beta(n) + b] += v;
        }
        g[layout.log_scale(n)] += gs;
        for c in 0..3 {
            g[layout.gamma(n, t) + c] += gg.0[c];
        }
    }

    // Chain rule into raw storage: gamma is stored divided by the scale.
    for (n, person) in st.persons.iter().enumerate() {
        let mut gs = g[layout.log_scale(n)] * person.scale;
        for (t, gm) in person.gamma.iter().enumerate() {
            let i = layout.gamma(n, t);
            for c in 0..3 {
                gs += g[i + c] * gm.0[c];
                g[i + c] *= person.scale;
            }
        }
        g[layout.log_scale(n)] = gs;
    }
    for (t, d) in st.depth.iter().enumerate() {
        let (gn, gf) = (g[layout.log_near(t)], g[layout.log_gap(t)]);
        g[layout.log_near(t)] = (gn + gf) * d.z_near;
        g[layout.log_gap(t)] = gf * (d.z_far - d.z_near);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("energy gradient"));
    }

    let stage_one = terms.stage_one();
    let stage_two = if o.stage == Stage::II { terms.stage_two() } else { 0.0 };
    Ok(EnergyReport {
        terms,
        stage_one,
        stage_two,
        total: stage_one + stage_two,
        gradient: g,
        diagnostics: diag,
        signature: sig.0,
    })
}

/// Value of a single term under otherwise identical options.
pub fn term_value(p: &Problem, st: &OptimState, w: &EnergyWeights, o: &EvalOptions, term: Term) -> Result<f64> {
    let opts = EvalOptions {
        terms: TermSet::only(term),
        ..*o
    };
    Ok(evaluate(p, st, w, &opts)?.terms.get(term))
}
