//! Independent oracles and the acceptance checks of the `wavlm` workspace.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod criteria;
pub mod oracles;
pub mod stats;

use std::time::{Duration, Instant};

use serde::Serialize;

pub use criteria::{model_gradcheck, BASE_PARAMETERS, GRADCHECK_TOLERANCE};

/// Result of one acceptance criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}. {} ({:.2} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

type Check = fn() -> wavlm_core::Result<criteria::Outcome>;

const CRITERIA: [(u8, &str, Check); 9] = [
    (1, "bucket function oracle", criteria::bucket_oracle),
    (2, "stable attention equivalence", criteria::stable_attention),
    (3, "mixing fidelity", criteria::mixing_fidelity),
    (4, "encoder geometry", criteria::encoder_geometry),
    (5, "gradient correctness", criteria::gradient_correctness),
    (6, "loss semantics", criteria::loss_semantics),
    (7, "denoising decoupling", criteria::denoising_decoupling),
    (8, "toy learning", criteria::toy_learning),
    (9, "parameter count", criteria::parameter_count),
];

/// Ids and names of every criterion, in run order.
pub fn criteria() -> impl Iterator<Item = (u8, &'static str)> {
    CRITERIA.iter().map(|&(id, name, _)| (id, name))
}

/// Runs one criterion; errors are reported as failures.
pub fn run(id: u8) -> Option<CriterionReport> {
    let &(id, name, check) = CRITERIA.iter().find(|c| c.0 == id)?;
    let start = Instant::now();
    let (passed, detail) = match check() {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    Some(CriterionReport {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    })
}

/// Runs every criterion, calling `progress` after each.
pub fn run_all(mut progress: impl FnMut(&CriterionReport)) -> Vec<CriterionReport> {
    CRITERIA
        .iter()
        .filter_map(|c| {
            let r = run(c.0)?;
            progress(&r);
            Some(r)
        })
        .collect()
}

/// Wall-time budget of a full verification run.
pub const TIME_BUDGET: Duration = Duration::from_secs(600);
