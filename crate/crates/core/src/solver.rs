//! Two-stage RMSprop minimization with mini-batched raster terms.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::body::PersonParams;
use crate::energy::{
    compute_targets, evaluate, EnergyWeights, EvalOptions, Group, OneEuroConfig, OptimState, Problem, Stage,
    TermSet, TermValues,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math::{exp, powi, Vec3};
use crate::scene::{aggregate_background, build_point_cloud, median, CloudConfig, FrameDepthParams, ScenePointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SolverConfig {
    pub lr0: f64,
    /// Per-iteration learning-rate decay factor.
    pub decay: f64,
    /// Squared-gradient averaging factor.
    pub alpha: f64,
    pub momentum: f64,
    pub eps: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_frames: usize,
    pub seed: u64,
    /// Stage-II iterations between recomputations of the filtered targets.
    pub target_refresh: usize,
    pub lr_theta: f64,
    pub lr_beta: f64,
    pub lr_gamma: f64,
    pub lr_scale: f64,
    pub lr_depth: f64,
    /// Evaluate the full-batch energy every this many iterations (0: never).
    pub full_eval_every: usize,
    pub filter: OneEuroConfig,
    pub cloud: CloudConfig,
    pub init_z_near: f64,
    pub init_z_far: f64,
    pub init_depth: DepthInit,
}

/// How [`initialize`] picks the starting depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DepthInit {
    /// `init_z_near`/`init_z_far` everywhere; roots at the median converted
    /// depth under their mask.
    Fixed,
    /// Roots at the depth where a unit-scale body matches the spread of its
    /// 2D joints; per-frame near/far fitted to those depths.
    #[default]
    BodySize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lr0: 0.01,
            decay: 0.99,
            alpha: 0.5,
            momentum: 0.9,
            eps: 1e-8,
            stage1_iters: 30,
            stage2_iters: 200,
            batch_frames: 10,
            seed: 0,
            target_refresh: 50,
            lr_theta: 1.0,
            lr_beta: 0.1,
            lr_gamma: 1.0,
            lr_scale: 0.1,
            lr_depth: 1.0,
            full_eval_every: 0,
            filter: OneEuroConfig::default(),
            cloud: CloudConfig::default(),
            init_z_near: 0.3,
            init_z_far: 10.0,
            init_depth: DepthInit::BodySize,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::param("lr0", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::param("decay", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("alpha/momentum", "must lie in [0, 1)"));
        }
        if self.batch_frames == 0 {
            return Err(Error::param("batch_frames", "must be at least 1"));
        }
        if self.target_refresh == 0 {
            return Err(Error::param("target_refresh", "must be at least 1"));
        }
        let m = [self.lr_theta, self.lr_beta, self.lr_gamma, self.lr_scale, self.lr_depth];
        if m.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("learning-rate multipliers", "must be non-negative"));
        }
        FrameDepthParams::new(self.init_z_near, self.init_z_far)?;
        Ok(())
    }

    /// Learning rate of global iteration `k`.
    pub fn learning_rate(&self, k: usize) -> f64 {
        self.lr0 * powi(self.decay, k as i32)
    }

    fn group_rate(&self, g: Group) -> f64 {
        match g {
            Group::Theta => self.lr_theta,
            Group::Beta => self.lr_beta,
            Group::Gamma => self.lr_gamma,
            Group::Scale => self.lr_scale,
            Group::Depth => self.lr_depth,
        }
    }
}

/// RMSprop with momentum.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub alpha: f64,
    pub momentum: f64,
    pub eps: f64,
    pub square_avg: Vec<f64>,
    pub buffer: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize, alpha: f64, momentum: f64, eps: f64) -> Self {
        RmsProp {
            alpha,
            momentum,
            eps,
            square_avg: vec![0.0; len],
            buffer: vec![0.0; len],
        }
    }

    /// `v <- a v + (1 - a) g^2; b <- m b + g / sqrt(v + eps); x <- x - lr b`,
    /// with a per-coordinate learning rate. Returns `false` and leaves
    /// everything untouched when the gradient is not finite.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) -> bool {
        if grad.iter().any(|g| !g.is_finite()) {
            return false;
        }
        for i in 0..x.len() {
            let g = grad[i];
            self.square_avg[i] = self.alpha * self.square_avg[i] + (1.0 - self.alpha) * g * g;
            self.buffer[i] = self.momentum * self.buffer[i] + g / crate::math::sqrt(self.square_avg[i] + self.eps);
            x[i] -= lr[i] * self.buffer[i];
        }
        true
    }
}

/// Maps unconstrained reals to `(s, z_near, z_far)` with `s > 0` and
/// `0 < z_near < z_far` (strict in floating point while the gap stays above
/// the rounding step of `z_near`).
pub fn constrain_positive(raw_scale: f64, raw_near: f64, raw_gap: f64) -> (f64, f64, f64) {
    let z_near = exp(raw_near);
    (exp(raw_scale), z_near, z_near + exp(raw_gap))
}

/// Observation-driven starting point: estimated poses and averaged shapes,
/// unit scale, and each root on the ray of its detected root pixel. The
/// depth along that ray and the per-frame near/far values follow
/// `cfg.init_depth`.
pub fn initialize(p: &Problem, cfg: &SolverConfig) -> Result<OptimState> {
    let fixed = FrameDepthParams::new(cfg.init_z_near, cfg.init_z_far)?;
    let thr = 0.3;
    let mut persons = Vec::with_capacity(p.persons);
    // (t, median disparity, depth) of every body-size estimate.
    let mut samples: Vec<(usize, f64, f64)> = Vec::new();
    for n in 0..p.persons {
        let beta = p.beta_hat[n].clone();
        let root_rest = p.model.rest_joints(&beta)?[0];
        let theta: Vec<Option<Vec<Vec3>>> =
            (0..p.frames).map(|t| p.obs[t][n].as_ref().and_then(|o| o.theta_hat.clone())).collect();
        let theta = fill_nearest(&theta).unwrap_or_else(|| vec![vec![Vec3::ZERO; crate::body::NUM_JOINTS]; p.frames]);
        let mut gamma: Vec<Option<Vec3>> = Vec::with_capacity(p.frames);
        for (t, th) in theta.iter().enumerate() {
            let obs = p.obs[t][n].as_ref();
            let det = p.seq.detection(t, n);
            let g = match (obs, det.and_then(|d| d.root_pixel(thr))) {
                (Some(o), Some(pix)) => {
                    let z = match cfg.init_depth {
                        DepthInit::Fixed if !o.mask_disparity.is_empty() => {
                            let mut depths: Vec<f64> = o.mask_disparity.iter().map(|d| fixed.depth(*d)).collect();
                            Some(median(&mut depths))
                        }
                        DepthInit::Fixed => None,
                        DepthInit::BodySize => {
                            let z = body_size_depth(p, th, &beta, det.unwrap(), thr)?;
                            if let Some(z) = z {
                                if !o.mask_disparity.is_empty() {
                                    let mut d = o.mask_disparity.clone();
                                    samples.push((t, median(&mut d), z));
                                }
                            }
                            z
                        }
                    };
                    match z {
                        Some(z) => Some(p.cam.back_project(pix[0], pix[1], z)? - root_rest),
                        None => None,
                    }
                }
                _ => None,
            };
            gamma.push(g);
        }
        let default_gamma = p.cam.back_project(p.cam.cx, p.cam.cy, 3.0)? - root_rest;
        persons.push(PersonParams {
            theta,
            beta,
            gamma: fill_nearest(&gamma).unwrap_or_else(|| vec![default_gamma; p.frames]),
            scale: 1.0,
        });
    }
    let depth = match cfg.init_depth {
        DepthInit::Fixed => vec![fixed; p.frames],
        DepthInit::BodySize => fit_depth_params(&samples, p.frames, &fixed),
    };
    let state = OptimState {
        persons,
        depth,
        presence: p.presence.clone(),
    };
    state.validate()?;
    Ok(state)
}

/// Depth at which the unit-scale posed body reproduces the spread of the
/// confident 2D joints (weak perspective). `None` with fewer than three
/// confident joints or a degenerate spread.
fn body_size_depth(
    p: &Problem,
    theta: &[Vec3],
    beta: &[f64],
    det: &crate::observations::JointDetection,
    thr: f64,
) -> Result<Option<f64>> {
    let sk = p.model.skin(theta, beta)?;
    let joints = p.model.regress_joints(&sk.vertices)?;
    let idx: Vec<usize> = (0..joints.len().min(det.joints.len())).filter(|&k| det.confidence[k] > thr).collect();
    if idx.len() < 3 {
        return Ok(None);
    }
    let m = idx.len() as f64;
    let norm: Vec<[f64; 2]> = idx
        .iter()
        .map(|&k| [(det.joints[k][0] - p.cam.cx) / p.cam.fx, (det.joints[k][1] - p.cam.cy) / p.cam.fy])
        .collect();
    let c2 = norm.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0] / m, a[1] + v[1] / m]);
    let s2 = norm.iter().map(|v| (v[0] - c2[0]) * (v[0] - c2[0]) + (v[1] - c2[1]) * (v[1] - c2[1])).sum::<f64>();
    let c3 = idx.iter().fold([0.0, 0.0], |a, &k| [a[0] + joints[k].x() / m, a[1] + joints[k].y() / m]);
    let s3 = idx
        .iter()
        .map(|&k| (joints[k].x() - c3[0]) * (joints[k].x() - c3[0]) + (joints[k].y() - c3[1]) * (joints[k].y() - c3[1]))
        .sum::<f64>();
    if !(s2 > 1e-12) || !(s3 > 1e-12) {
        return Ok(None);
    }
    let z = crate::math::sqrt(s3 / s2);
    Ok(z.is_finite().then_some(z))
}

/// Fits inverse depth as an affine function of disparity, `1/z = a d + b`,
/// to all samples, then rescales it per frame. Falls back to the shape of
/// `fixed` when the samples cannot determine the offset.
fn fit_depth_params(samples: &[(usize, f64, f64)], frames: usize, fixed: &FrameDepthParams) -> Vec<FrameDepthParams> {
    if samples.is_empty() {
        return vec![*fixed; frames];
    }
    let m = samples.len() as f64;
    let (md, my) = samples.iter().fold((0.0, 0.0), |(a, b), (_, d, z)| (a + d / m, b + 1.0 / z / m));
    let sdd = samples.iter().map(|(_, d, _)| (d - md) * (d - md)).sum::<f64>();
    let sdy = samples.iter().map(|(_, d, z)| (d - md) * (1.0 / z - my)).sum::<f64>();
    let mut ab = None;
    if samples.len() >= 2 && sdd > 1e-6 {
        let a = sdy / sdd;
        let b = my - a * md;
        if a > 0.0 && b > 0.0 {
            ab = Some((a, b));
        }
    }
    let (a, b) = ab.unwrap_or_else(|| {
        // Keep the default near/far ratio; match the overall level.
        let r = (1.0 / fixed.z_far) / (1.0 / fixed.z_near - 1.0 / fixed.z_far);
        let num = samples.iter().map(|(_, d, z)| (d + r) / z).sum::<f64>();
        let den = samples.iter().map(|(_, d, _)| (d + r) * (d + r)).sum::<f64>();
        let a = num / den;
        (a, a * r)
    });
    (0..frames)
        .map(|t| {
            let logs: Vec<f64> = samples
                .iter()
                .filter(|s| s.0 == t)
                .map(|(_, d, z)| crate::math::ln(1.0 / z) - crate::math::ln(a * d + b))
                .collect();
            let k = if logs.is_empty() { 1.0 } else { exp(logs.iter().sum::<f64>() / logs.len() as f64) };
            let (at, bt) = (k * a, k * b);
            FrameDepthParams::new(1.0 / (at + bt), 1.0 / bt).unwrap_or(*fixed)
        })
        .collect()
}

/// Fills gaps with the nearest known value (earlier wins ties).
fn fill_nearest<T: Clone>(xs: &[Option<T>]) -> Option<Vec<T>> {
    let known: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].is_some()).collect();
    if known.is_empty() {
        return None;
    }
    Some(
        (0..xs.len())
            .map(|i| {
                let j = *known.iter().min_by_key(|&&k| (k.abs_diff(i), k)).unwrap();
                xs[j].clone().unwrap()
            })
            .collect(),
    )
}

/// Static background depth under the given depth parameters and its point
/// cloud.
pub fn build_scene(p: &Problem, st: &OptimState, cloud: &CloudConfig) -> Result<(Grid<f64>, ScenePointCloud)> {
    let depths: Vec<Grid<f64>> = p
        .seq
        .frames
        .iter()
        .zip(&st.depth)
        .map(|(f, d)| f.disparity.map(|v| d.depth(*v)))
        .collect();
    let bgs: Vec<Mask> = p.seq.frames.iter().map(|f| f.background.clone()).collect();
    let stat = aggregate_background(&depths, &bgs)?;
    let pc = build_point_cloud(&stat, &p.cam, cloud)?;
    Ok((stat, pc))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceEntry {
    pub iter: usize,
    pub stage: u8,
    pub lr: f64,
    pub terms: TermValues,
    pub total: f64,
    pub batch: Vec<usize>,
    pub skipped: bool,
    /// Full-batch energy, when requested for this iteration.
    pub full_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: OptimState,
    pub trace: Vec<TraceEntry>,
    pub static_depth: Option<Grid<f64>>,
    pub cloud: Option<ScenePointCloud>,
    pub events: Vec<String>,
}

/// Seeded frame sampler: uniform without replacement within an epoch.
#[derive(Debug, Clone)]
pub struct Batcher {
    frames: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(frames: Vec<usize>, size: usize, seed: u64) -> Self {
        Batcher {
            order: Vec::new(),
            pos: 0,
            size,
            frames,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.frames.len() <= self.size {
            return self.frames.clone();
        }
        if self.pos >= self.order.len() {
            self.order = self.frames.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let mut b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b.sort_unstable();
        b
    }
}

/// Runs both stages from `init`. `observe` sees every trace entry as soon as
/// it is produced.
pub fn run(
    p: &Problem,
    init: OptimState,
    weights: &EnergyWeights,
    cfg: &SolverConfig,
    terms: TermSet,
    mut observe: impl FnMut(&TraceEntry),
) -> Result<RunOutput> {
    cfg.validate()?;
    weights.validate()?;
    init.validate()?;
    if p.persons == 0 {
        return Err(Error::Degenerate("no person tracks to optimize".into()));
    }
    let active = p.active_frames();
    if active.is_empty() {
        return Err(Error::Degenerate("no frame contains a tracked person".into()));
    }
    let needs_cloud = cfg.stage2_iters > 0 && (terms.contains(crate::energy::Term::Contact) || terms.contains(crate::energy::Term::Slip));
    if needs_cloud && p.seq.frames.iter().all(|f| f.background.count() == 0) {
        return Err(Error::Degenerate("no background pixels: the scene point cloud would be empty".into()));
    }

    let layout = init.layout();
    let presence = init.presence.clone();
    let mut x = init.to_raw();
    let rates: Vec<f64> = (0..layout.len()).map(|i| cfg.group_rate(layout.group(i))).collect();
    let mut opt = RmsProp::new(layout.len(), cfg.alpha, cfg.momentum, cfg.eps);
    let mut batcher = Batcher::new(active, cfg.batch_frames, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);
    let mut events = Vec::new();
    let mut penalty = 1.0;
    let mut static_depth = None;
    let mut cloud: Option<ScenePointCloud> = None;
    let mut targets = None;
    let mut lr = vec![0.0; layout.len()];

    for k in 0..cfg.stage1_iters + cfg.stage2_iters {
        let stage = if k < cfg.stage1_iters { Stage::I } else { Stage::II };
        let state = OptimState::from_raw(layout, &x, presence.clone())?;
        if stage == Stage::II {
            let k2 = k - cfg.stage1_iters;
            if k2 == 0 && needs_cloud {
                let (d, c) = build_scene(p, &state, &cfg.cloud)?;
                static_depth = Some(d);
                cloud = Some(c);
            }
            if k2.is_multiple_of(cfg.target_refresh) && terms.contains(crate::energy::Term::Temporal) {
                targets = Some(compute_targets(p.model, &state, p.config.frame_rate, &cfg.filter)?);
            }
        }
        let batch = batcher.next_batch();
        let opts = EvalOptions {
            stage,
            terms,
            raster_frames: Some(&batch),
            cloud: cloud.as_ref(),
            targets: targets.as_ref(),
        };
        let step_lr = cfg.learning_rate(k) * penalty;
        let report = match evaluate(p, &state, weights, &opts) {
            Ok(r) => Some(r),
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        let mut skipped = true;
        if let Some(r) = &report {
            for (l, m) in lr.iter_mut().zip(&rates) {
                *l = step_lr * m;
            }
            skipped = !opt.step(&mut x, &r.gradient, &lr);
        }
        if skipped {
            penalty *= 0.5;
            events.push(format!("iteration {k}: non-finite gradient, step skipped and learning rate halved"));
        }
        // Positivity and ordering of the constrained variables.
        OptimState::from_raw(layout, &x, presence.clone())?.check_positive()?;

        let full_total = if cfg.full_eval_every > 0 && k % cfg.full_eval_every == 0 {
            let full = EvalOptions {
                raster_frames: None,
                ..opts
            };
            Some(evaluate(p, &state, weights, &full)?.total)
        } else {
            None
        };
        let entry = TraceEntry {
            iter: k,
            stage: if stage == Stage::I { 1 } else { 2 },
            lr: step_lr,
            terms: report.as_ref().map(|r| r.terms).unwrap_or_default(),
            total: report.as_ref().map_or(f64::NAN, |r| r.total),
            batch,
            skipped,
            full_total,
        };
        observe(&entry);
        trace.push(entry);
    }
    let state = OptimState::from_raw(layout, &x, presence)?;
    Ok(RunOutput {
        state,
        trace,
        static_depth,
        cloud,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_zero_gradient_is_noop() {
        let mut opt = RmsProp::new(3, 0.5, 0.9, 1e-8);
        let mut x = vec![1.0, -2.0, 3.0];
        assert!(opt.step(&mut x, &[0.0; 3], &[0.01; 3]));
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn rmsprop_descends_and_converges() {
        let mut opt = RmsProp::new(2, 0.5, 0.9, 1e-8);
        let mut x = vec![1.0, -0.5];
        let g = [2.0, -1.0];
        opt.step(&mut x, &g, &[0.01; 2]);
        assert!(x[0] < 1.0 && x[1] > -0.5);

        let cfg = SolverConfig::default();
        let mut opt = RmsProp::new(2, cfg.alpha, cfg.momentum, cfg.eps);
        let mut x = vec![3.0, -4.0];
        let start = crate::math::sqrt(x[0] * x[0] + x[1] * x[1]);
        for k in 0..200 {
            let g = [2.0 * x[0], 2.0 * x[1]];
            let lr = cfg.learning_rate(k) * 10.0;
            opt.step(&mut x, &g, &[lr; 2]);
        }
        let end = crate::math::sqrt(x[0] * x[0] + x[1] * x[1]);
        assert!(end * 100.0 <= start, "{end}");
    }

    #[test]
    fn rmsprop_rejects_non_finite() {
        let mut opt = RmsProp::new(1, 0.5, 0.9, 1e-8);
        let mut x = vec![1.0];
        assert!(!opt.step(&mut x, &[f64::NAN], &[0.1]));
        assert_eq!(x, vec![1.0]);
        assert_eq!(opt.square_avg, vec![0.0]);
    }

    #[test]
    fn positivity_construction() {
        assert_eq!(constrain_positive(0.0, 0.0, 0.0), (1.0, 1.0, 2.0));
        for r in [-8.0, -1.0, 0.5, 3.0, 8.0] {
            let (s, n, f) = constrain_positive(r, -r, r * 0.5);
            assert!(s > 0.0 && n > 0.0 && f > n);
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = SolverConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.01);
        assert!((cfg.learning_rate(100) - 0.01 * powi(0.99, 100)).abs() == 0.0);
    }

    #[test]
    fn batcher_covers_epoch() {
        let mut b = Batcher::new((0..25).collect(), 10, 3);
        let mut seen = Vec::new();
        seen.extend(b.next_batch());
        seen.extend(b.next_batch());
        seen.extend(b.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
        let mut c = Batcher::new((0..25).collect(), 10, 3);
        let mut d = Batcher::new((0..25).collect(), 10, 3);
        for _ in 0..7 {
            assert_eq!(c.next_batch(), d.next_batch());
        }
        assert_eq!(Batcher::new(vec![1, 4], 10, 0).next_batch(), vec![1, 4]);
    }

    #[test]
    fn fill_gaps() {
        assert_eq!(fill_nearest(&[None, Some(1), None, None, Some(4)]), Some(vec![1, 1, 1, 4, 4]));
        assert_eq!(fill_nearest::<u8>(&[None, None]), None);
    }
}
