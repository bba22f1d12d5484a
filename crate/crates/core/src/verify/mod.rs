//! Oracle suites and diagnostic probes.
//!
//! Every suite is deterministic in its seeds and prints no timing, so two
//! runs with the same arguments serialize to identical JSON.

mod complexity;
mod equivalence;
mod gradients;
mod probes;

pub use complexity::{complexity_probe, complexity_suite, growth_ratios, ProbeMode, ProbeRow, Timing};
pub use equivalence::{
    equivalence_case, equivalence_suite, Dims, EquivalenceOptions, Family, FAMILIES,
};
pub use gradients::{gradient_checks, gradient_suite, GradCase};
pub use probes::{
    abs_cosine, attn_score_csv, attn_score_matrix, cosine_csv, query_cosine_stats, CosineStats,
    ScoreMatrix,
};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseFailure {
    pub family: String,
    pub seed: u64,
    pub dims: String,
    /// Max-abs error (equivalences, counts) or max relative error (gradients).
    pub error: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReport {
    pub family: String,
    pub cases: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub families: Vec<FamilyReport>,
    pub failures: Vec<CaseFailure>,
    pub pass: bool,
}

impl SuiteReport {
    pub(crate) fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            cases: 0,
            families: Vec::new(),
            failures: Vec::new(),
            pass: true,
        }
    }

    /// Records one case of `family`; `err` is `Err(detail)` when the case
    /// could not be evaluated at all.
    pub(crate) fn record(
        &mut self,
        family: &str,
        seed: u64,
        dims: &str,
        err: std::result::Result<f64, String>,
        tol: f64,
    ) {
        self.cases += 1;
        let fam = match self.families.iter_mut().position(|f| f.family == family) {
            Some(i) => &mut self.families[i],
            None => {
                self.families.push(FamilyReport {
                    family: family.to_string(),
                    cases: 0,
                    max_error: 0.0,
                });
                self.families.last_mut().expect("just pushed")
            }
        };
        fam.cases += 1;
        let (error, detail) = match err {
            Ok(e) if e.is_finite() && e < tol => {
                fam.max_error = fam.max_error.max(e);
                return;
            }
            Ok(e) => (e, format!("error {e:e} not below tolerance {tol:e}")),
            Err(msg) => (f64::INFINITY, msg),
        };
        fam.max_error = if error.is_nan() { f64::INFINITY } else { fam.max_error.max(error) };
        self.pass = false;
        self.failures.push(CaseFailure {
            family: family.to_string(),
            seed,
            dims: dims.to_string(),
            error,
            detail,
        });
    }

    pub fn family(&self, name: &str) -> Option<&FamilyReport> {
        self.families.iter().find(|f| f.family == name)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}
