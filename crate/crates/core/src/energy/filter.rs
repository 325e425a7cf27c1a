//! Speed-adaptive low-pass filtering (1€ filter) of vertex trajectories.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct OneEuroConfig {
    /// Cutoff at zero speed, in Hz.
    pub min_cutoff: f64,
    /// Cutoff increase per unit of filtered speed.
    pub beta: f64,
    /// Cutoff used to smooth the derivative, in Hz.
    pub d_cutoff: f64,
    /// Samples of point-reflected pre-roll (`2 x_0 - x_k`) run through the
    /// filter before the first sample, so a trajectory already in motion
    /// does not start with a lagging, decelerated output. 0 disables it.
    pub warmup: usize,
}

impl Default for OneEuroConfig {
    fn default() -> Self {
        OneEuroConfig {
            min_cutoff: 1.0,
            beta: 0.007,
            d_cutoff: 1.0,
            warmup: 15,
        }
    }
}

#[inline]
fn smoothing(cutoff: f64, rate: f64) -> f64 {
    1.0 / (1.0 + rate / (2.0 * PI * cutoff))
}

/// Filters several scalar channels sampled at `rate` Hz. `samples[t][c]`.
pub fn one_euro_filter(samples: &[Vec<f64>], rate: f64, cfg: &OneEuroConfig) -> Result<Vec<Vec<f64>>> {
    if !(rate > 0.0) || !(cfg.min_cutoff > 0.0) || !(cfg.d_cutoff > 0.0) || cfg.beta < 0.0 {
        return Err(Error::param("one euro filter", "rate and cutoffs must be positive, beta non-negative"));
    }
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter input"));
    }
    let channels = first.len();
    if samples.iter().any(|s| s.len() != channels) {
        return Err(Error::dim("filter channels", channels, samples.iter().map(|s| s.len()).max().unwrap()));
    }
    let a_d = smoothing(cfg.d_cutoff, rate);
    let pre = cfg.warmup.min(samples.len() - 1);
    let reflected: Vec<Vec<f64>> = (1..=pre)
        .rev()
        .map(|k| first.iter().zip(&samples[k]).map(|(a, b)| 2.0 * a - b).collect())
        .collect();
    let mut seq = reflected.iter().chain(samples.iter());
    let mut x_hat = seq.next().unwrap().clone();
    let mut dx_hat = alloc::vec![0.0; channels];
    let mut out = Vec::with_capacity(samples.len());
    if pre == 0 {
        out.push(x_hat.clone());
    }
    for (i, s) in seq.enumerate() {
        for c in 0..channels {
            let dx = (s[c] - x_hat[c]) * rate;
            dx_hat[c] = a_d * dx + (1.0 - a_d) * dx_hat[c];
            let a = smoothing(cfg.min_cutoff + cfg.beta * dx_hat[c].abs(), rate);
            x_hat[c] = a * s[c] + (1.0 - a) * x_hat[c];
        }
        if i + 1 >= pre {
            out.push(x_hat.clone());
        }
    }
    Ok(out)
}

/// Filters a trajectory of vertex sets coordinate-wise.
pub fn filter_vertices(frames: &[&[Vec3]], rate: f64, cfg: &OneEuroConfig) -> Result<Vec<Vec<Vec3>>> {
    let flat: Vec<Vec<f64>> = frames.iter().map(|f| f.iter().flat_map(|v| v.0).collect()).collect();
    Ok(one_euro_filter(&flat, rate, cfg)?
        .into_iter()
        .map(|f| f.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sin;

    fn run_with(xs: &[f64], warmup: usize) -> Vec<f64> {
        let s: Vec<Vec<f64>> = xs.iter().map(|x| alloc::vec![*x]).collect();
        let cfg = OneEuroConfig {
            warmup,
            ..OneEuroConfig::default()
        };
        one_euro_filter(&s, 30.0, &cfg).unwrap().into_iter().map(|v| v[0]).collect()
    }

    fn run(xs: &[f64]) -> Vec<f64> {
        run_with(xs, 0)
    }

    #[test]
    fn warmup_keeps_length_and_tracks_ramps() {
        let ramp: Vec<f64> = (0..40).map(|t| 0.02 * t as f64).collect();
        let cold = run_with(&ramp, 0);
        let warm = run_with(&ramp, 15);
        assert_eq!(warm.len(), ramp.len());
        // Early per-frame steps: the cold start decelerates, the warm start
        // already moves at nearly the input speed.
        assert!(cold[2] - cold[1] < 0.5 * 0.02);
        assert!((warm[2] - warm[1] - 0.02).abs() < 0.2 * 0.02);
        assert_eq!(run_with(&[3.0], 15), alloc::vec![3.0]);
        assert!(run_with(&[1.0; 10], 15).iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_passes_through() {
        assert!(run(&[2.5; 40]).iter().all(|v| *v == 2.5));
    }

    #[test]
    fn step_response_monotone() {
        let mut xs = alloc::vec![0.0; 5];
        xs.extend([1.0; 300]);
        let y = run(&xs);
        assert!(y.windows(2).all(|w| w[1] >= w[0]));
        assert!((y.last().unwrap() - 1.0).abs() < 1e-6);
        assert!(y[6] < 1.0);
    }

    #[test]
    fn rejects_non_finite() {
        let s = alloc::vec![alloc::vec![0.0], alloc::vec![f64::NAN]];
        assert!(one_euro_filter(&s, 30.0, &OneEuroConfig::default()).is_err());
    }

    #[test]
    fn attenuates_fast_more_than_slow() {
        let amp = |f: f64| {
            let xs: Vec<f64> = (0..600).map(|t| sin(2.0 * PI * f * t as f64 / 30.0)).collect();
            run(&xs)[300..].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        assert!(amp(6.0) < 0.5 * amp(0.3));
    }
}
