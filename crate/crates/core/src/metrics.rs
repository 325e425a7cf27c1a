//! Pose-accuracy and smoothness metrics against ground truth.

use alloc::vec;
use alloc::vec::Vec;

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::math::Vec3;

/// One person in one frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PersonPose {
    pub track_id: u32,
    pub joints: Vec<Vec3>,
    pub root: usize,
}

/// Matched prediction and ground truth of one `(t, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub frame: usize,
    pub track_id: u32,
    pub pred: Vec<Vec3>,
    pub gt: Vec<Vec3>,
    pub root: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correspondence {
    TrackId,
    RootDistance,
}

/// Pairs predictions with ground truth per frame. Returns the pairs and the
/// `(frame, gt track)` entries left without a prediction.
pub fn correspond(
    pred: &[Vec<PersonPose>],
    gt: &[Vec<PersonPose>],
    mode: Correspondence,
) -> Result<(Vec<EvalPair>, Vec<(usize, u32)>)> {
    if pred.len() != gt.len() {
        return Err(Error::dim("prediction frames", gt.len(), pred.len()));
    }
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (t, (pf, gf)) in pred.iter().zip(gt).enumerate() {
        let matched: Vec<(usize, usize)> = match mode {
            Correspondence::TrackId => gf
                .iter()
                .enumerate()
                .filter_map(|(g, gp)| pf.iter().position(|p| p.track_id == gp.track_id).map(|p| (p, g)))
                .collect(),
            Correspondence::RootDistance => {
                let mut cost = vec![0.0; pf.len() * gf.len()];
                for (i, p) in pf.iter().enumerate() {
                    for (j, g) in gf.iter().enumerate() {
                        cost[i * gf.len() + j] = (p.joints[p.root] - g.joints[g.root]).norm();
                    }
                }
                hungarian(&cost, pf.len(), gf.len())?.pairs
            }
        };
        let mut hit = vec![false; gf.len()];
        for (p, g) in matched {
            let (pp, gp) = (&pf[p], &gf[g]);
            if pp.joints.len() != gp.joints.len() || pp.root != gp.root {
                return Err(Error::param("pose pair", "joint count or root index differs"));
            }
            hit[g] = true;
            pairs.push(EvalPair {
                frame: t,
                track_id: gp.track_id,
                pred: pp.joints.clone(),
                gt: gp.joints.clone(),
                root: gp.root,
            });
        }
        unmatched.extend(gf.iter().zip(&hit).filter(|(_, h)| !**h).map(|(g, _)| (t, g.track_id)));
    }
    Ok((pairs, unmatched))
}

fn nonempty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::Empty("evaluation pairs"))
    } else {
        Ok(())
    }
}

/// Mean root position error in millimeters.
pub fn mrpe(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs)?;
    let sum: f64 = pairs.iter().map(|p| (p.pred[p.root] - p.gt[p.root]).norm()).sum();
    Ok(1000.0 * sum / pairs.len() as f64)
}

/// Root-aligned non-root joint errors (meters) of one pair.
fn aligned_errors(p: &EvalPair) -> impl Iterator<Item = f64> + '_ {
    let (rp, rg) = (p.pred[p.root], p.gt[p.root]);
    (0..p.gt.len())
        .filter(move |&j| j != p.root)
        .map(move |j| ((p.pred[j] - rp) - (p.gt[j] - rg)).norm())
}

/// Root-relative mean per-joint position error in millimeters (root joint
/// excluded, its aligned error being zero by construction).
pub fn mpjpe(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        for e in aligned_errors(p) {
            sum += e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("non-root joints"));
    }
    Ok(1000.0 * sum / n as f64)
}

/// Percentage of joints within `threshold` meters. Root-relative mode
/// aligns roots and scores the non-root joints; absolute mode scores every
/// joint in place.
pub fn pck3d(pairs: &[EvalPair], threshold: f64, root_relative: bool) -> Result<f64> {
    nonempty(pairs)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for p in pairs {
        if root_relative {
            for e in aligned_errors(p) {
                hit += (e <= threshold) as usize;
                n += 1;
            }
        } else {
            for (a, b) in p.pred.iter().zip(&p.gt) {
                hit += ((*a - *b).norm() <= threshold) as usize;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("scored joints"));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

/// Root precision in percent. Predictions are visited in the given order;
/// each is a true positive when an unconsumed ground-truth root of the same
/// frame lies within `threshold` meters (the nearest one is consumed).
/// `None` when there is no ground truth at all.
pub fn ap_root(pred: &[Vec<PersonPose>], gt: &[Vec<PersonPose>], threshold: f64) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::dim("prediction frames", gt.len(), pred.len()));
    }
    if gt.iter().all(|f| f.is_empty()) {
        return Ok(None);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pf, gf) in pred.iter().zip(gt) {
        let mut used = vec![false; gf.len()];
        for p in pf {
            let r = p.joints[p.root];
            let best = gf
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, g)| (j, (g.joints[g.root] - r).norm()))
                .filter(|(_, d)| *d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    if tp + fp == 0 {
        return Ok(Some(0.0));
    }
    Ok(Some(100.0 * tp as f64 / (tp + fp) as f64))
}

/// Mean second-difference magnitude in millimeters over tracks
/// (`tracks[i][t][j]`), frames and joints. Tracks shorter than three frames
/// are skipped; `None` when nothing remains.
pub fn jitter(tracks: &[Vec<Vec<Vec3>>]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for tr in tracks.iter().filter(|t| t.len() >= 3) {
        for w in tr.windows(3) {
            for j in 0..w[1].len() {
                sum += (w[2][j] - w[1][j] * 2.0 + w[0][j]).norm();
                n += 1;
            }
        }
    }
    (n > 0).then(|| 1000.0 * sum / n as f64)
}
