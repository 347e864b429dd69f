//! Adapter parameter budgets and the full-model reduction factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CoreVariant;

/// Per-layer parameter budget of the three adaptation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub d: u64,
    pub k: u64,
    pub r: u64,
    pub r_prime: u64,
    pub domains: u64,
    pub core_variant: CoreVariant,
    pub core_params: u64,
    /// One LoRA pair per domain: `T (d + k) r`.
    pub multi: u64,
    /// One static pair: `(d + k) r`.
    pub single: u64,
    /// Shared bases plus core: `(d + k) r′ + |W_F|`.
    pub ours: u64,
    pub reduction_vs_multi: f64,
}

pub fn param_counts(
    d: u64,
    k: u64,
    r: u64,
    r_prime: u64,
    domains: u64,
    core_variant: CoreVariant,
) -> ParamCount {
    param_counts_with_core(d, k, r, r_prime, domains, core_variant, core_variant.param_count(r_prime as usize) as u64)
}

/// Same as [`param_counts`] with an explicit `|W_F|`.
pub fn param_counts_with_core(
    d: u64,
    k: u64,
    r: u64,
    r_prime: u64,
    domains: u64,
    core_variant: CoreVariant,
    core_params: u64,
) -> ParamCount {
    let single = (d + k) * r;
    let multi = domains * single;
    let ours = (d + k) * r_prime + core_params;
    ParamCount {
        d,
        k,
        r,
        r_prime,
        domains,
        core_variant,
        core_params,
        multi,
        single,
        ours,
        reduction_vs_multi: multi as f64 / ours as f64,
    }
}

/// How a full-parameter temporal model's overhead grows with the number of
/// backbone parameters `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverheadAssumption {
    /// An LSTM of width `h` reading the flattened parameter vector and
    /// emitting the next one: `4h(p + h + 1) + (h + 1)p`.
    LstmOverParams { hidden: u64 },
    /// A dense linear transition over all parameters: `p²`.
    Quadratic,
}

impl OverheadAssumption {
    pub fn overhead(&self, p_full: u64) -> f64 {
        let p = p_full as f64;
        match *self {
            OverheadAssumption::LstmOverParams { hidden } => {
                let h = hidden as f64;
                4.0 * h * (p + h + 1.0) + (h + 1.0) * p
            }
            OverheadAssumption::Quadratic => p * p,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            OverheadAssumption::LstmOverParams { hidden } => format!(
                "LSTM with hidden width {hidden} over the flattened parameter vector: 4h(p+h+1) + (h+1)p"
            ),
            OverheadAssumption::Quadratic => {
                "dense linear transition over all parameters: p^2".to_string()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub p_full: u64,
    pub assumption: OverheadAssumption,
    pub assumption_text: String,
    pub full_overhead: f64,
    pub ours_overhead: f64,
    pub ratio: f64,
}

/// Ratio of full-parameter temporal-modelling overhead to the given
/// shared-basis overhead (`ours_overhead`, in parameters).
pub fn reduction_report(p_full: u64, assumption: OverheadAssumption, ours_overhead: u64) -> Result<ReductionReport> {
    if ours_overhead == 0 {
        return Err(Error::Argument("adapter overhead must be positive".into()));
    }
    let full = assumption.overhead(p_full);
    Ok(ReductionReport {
        p_full,
        assumption,
        assumption_text: assumption.describe(),
        full_overhead: full,
        ours_overhead: ours_overhead as f64,
        ratio: full / ours_overhead as f64,
    })
}

/// Ratio of two raw overheads.
pub fn overhead_ratio(full_overhead: f64, ours_overhead: f64) -> f64 {
    full_overhead / ours_overhead
}
