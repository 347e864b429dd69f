//! Parameter budgets, translation corollaries, the subspace-stability
//! harness and decision-boundary grids.

mod boundary;
mod params;
mod stability;
mod translation;

pub use self::boundary::{boundary_grid, write_grid_csv, GridPoint};
pub use self::params::{
    overhead_ratio, param_counts, param_counts_with_core, reduction_report, OverheadAssumption,
    ParamCount, ReductionReport,
};
pub use self::stability::{
    fit_dissipativity, stability_harness, StabilityConfig, StabilityStep, StabilitySummary,
    StabilityTrace, EXPANSION_TOL, LEAK_TOL,
};
pub use self::translation::{translation_property_check, TranslationReport, AFFINE_RANK_TOL, DISTANCE_TOL};
