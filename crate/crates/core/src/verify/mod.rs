//! Executable checks of the architectural and statistical claims: frame-order
//! invariance of the static stream, the post-subtraction discrepancy bound,
//! the static estimation rate, and the RGRA efficiency metric.

mod invariance;
mod rgra;
mod theorems;
mod wasserstein;

use serde::{Deserialize, Serialize};

pub use invariance::{
    check_permutation_invariance, equivariance_violation, invariance_violation, lemma_suite, positional_witness,
    random_permutations,
};
pub use rgra::{compute_rgra, reproduce_rgra_table, AveragingRule, RgraCell, RgraInputs, RgraMode};
pub use theorems::{
    rate_slope, temporal_mean, verify_theorem3, verify_theorem4, DomainSamples, Theorem3Input, Theorem3Options,
    Theorem4Options,
};
pub use wasserstein::{random_directions, sliced_w1, sliced_w1_with, wasserstein1_1d};

/// Outcome of one executable check. `pass` holds exactly when every trial
/// met its condition at `tolerance`; nested checks carry their own verdicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bound_lhs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bound_rhs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<TheoremReport>,
}

impl TheoremReport {
    pub fn new(theorem: impl Into<String>, trials: usize, max_violation: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            theorem: theorem.into(),
            trials,
            max_violation,
            tolerance,
            pass,
            bound_lhs: Vec::new(),
            bound_rhs: Vec::new(),
            notes: Vec::new(),
            checks: Vec::new(),
        }
    }

    /// This verdict and every nested one.
    pub fn all_pass(&self) -> bool {
        self.pass && self.checks.iter().all(TheoremReport::all_pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Depth-first list of this report and its nested checks.
    pub fn flatten(&self) -> Vec<&TheoremReport> {
        let mut out = vec![self];
        for c in &self.checks {
            out.extend(c.flatten());
        }
        out
    }
}

/// Summary table with one row per report, nested checks included.
pub fn summary_csv(reports: &[TheoremReport]) -> String {
    let mut out = String::from("theorem,trials,max_violation,pass\n");
    for r in reports.iter().flat_map(TheoremReport::flatten) {
        out.push_str(&format!("{},{},{:e},{}\n", r.theorem, r.trials, r.max_violation, r.pass));
    }
    out
}
