//! Run configuration file and the pose files exchanged with `eval`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scenecap_core::energy::{EnergyWeights, ProblemConfig, Term, TermSet};
use scenecap_core::metrics::PersonPose;
use scenecap_core::observations::ObservationConfig;
use scenecap_core::solver::SolverConfig;

use crate::error::{read_json, CliError, Result};

/// Everything tunable about a fit. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub weights: EnergyWeights,
    pub problem: ProblemConfig,
    pub observations: ObservationConfig,
    /// Term names (`e_scale` or `scale`) switched off for ablations.
    pub disable: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: RunConfig = read_json(path)?;
        c.disabled_terms()?;
        Ok(c)
    }

    pub fn disabled_terms(&self) -> Result<Vec<Term>> {
        self.disable.iter().map(|s| parse_term(s)).collect()
    }
}

pub fn parse_term(s: &str) -> Result<Term> {
    Term::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Term::ALL.iter().map(|t| t.name()).collect();
        CliError::usage(format!("unknown energy term '{s}', expected one of {}", names.join(", ")))
    })
}

/// Enabled set and a stable tag for the disabled terms.
pub fn ablation(disabled: &[Term]) -> (TermSet, Vec<&'static str>) {
    let mut d: Vec<Term> = disabled.to_vec();
    d.sort();
    d.dedup();
    let set = d.iter().fold(TermSet::all(), |s, t| s.without(*t));
    (set, d.iter().map(|t| t.name()).collect())
}

/// `poses.json`: per frame, the persons present with their joints in
/// meters (camera coordinates), root index and track id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PosesFile {
    pub frames: Vec<Vec<PersonPose>>,
}
