//! Central finite-difference verification of [`evaluate`] gradients.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{evaluate, EnergyWeights, EvalOptions, OptimState, Problem};
use crate::error::Result;
use crate::math::sqrt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step in raw coordinates.
    pub step: f64,
    pub rel_tol: f64,
    /// Random unit directions probed.
    pub directions: usize,
    /// Random single coordinates probed.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            directions: 4,
            coordinates: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    /// Raw coordinate index, or `None` for a random direction.
    pub coordinate: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
    /// A discrete decision changed inside the stencil; not judged.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.probes.iter().filter(|p| !p.skipped).count()
    }
    pub fn skipped(&self) -> usize {
        self.probes.len() - self.checked()
    }
    pub fn failures(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.skipped && !p.passed)
    }
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
    /// Largest relative error among judged probes.
    pub fn worst(&self) -> f64 {
        self.probes.iter().filter(|p| !p.skipped).map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of the energy selected by `o` against
/// central differences along random directions and coordinates.
///
/// A probe passes when the relative error is below `rel_tol`, or when the
/// absolute disagreement is within the round-off floor of the difference
/// quotient, `4 eps max|E(x +- h u)| / h`. Probes whose stencil changes any
/// discrete decision (signature mismatch) are skipped.
pub fn check_gradient(
    p: &Problem,
    st: &OptimState,
    w: &EnergyWeights,
    o: &EvalOptions,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = evaluate(p, st, w, o)?;
    let layout = st.layout();
    let x = st.to_raw();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs: Vec<(Option<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..cfg.directions {
        let mut u: Vec<f64> = (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = sqrt(u.iter().map(|v| v * v).sum::<f64>());
        u.iter_mut().for_each(|v| *v /= n);
        dirs.push((None, u));
    }
    for _ in 0..cfg.coordinates {
        let i = rng.random_range(0..x.len());
        let mut u = alloc::vec![0.0; x.len()];
        u[i] = 1.0;
        dirs.push((Some(i), u));
    }

    let mut report = GradCheckReport::default();
    for (coordinate, u) in dirs {
        let eval_at = |sign: f64| -> Result<(f64, u64)> {
            let xs: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + sign * cfg.step * b).collect();
            let s = OptimState::from_raw(layout, &xs, st.presence.clone())?;
            let r = evaluate(p, &s, w, o)?;
            Ok((r.total, r.signature))
        };
        let (lp, sp) = eval_at(1.0)?;
        let (lm, sm) = eval_at(-1.0)?;
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let analytic: f64 = base.gradient.iter().zip(&u).map(|(g, d)| g * d).sum();
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { diff / scale } else { 0.0 };
        let floor = 4.0 * f64::EPSILON * lp.abs().max(lm.abs()) / cfg.step;
        let skipped = sp != base.signature || sm != base.signature;
        report.probes.push(Probe {
            coordinate,
            analytic,
            numeric,
            rel_err,
            passed: rel_err < cfg.rel_tol || diff <= floor,
            skipped,
        });
    }
    Ok(report)
}
