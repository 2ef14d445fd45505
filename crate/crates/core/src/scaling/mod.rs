//! Compute accounting, power-law fits of error against compute, Pareto
//! frontiers and compute-optimal allocation fits.

pub mod frontier;
pub mod lm;
pub mod power_law;
pub mod records;

pub use frontier::{fit_allocation, fit_allocation_runs, pareto_frontier, AllocationFit, FrontierPoint, Quantity};
pub use lm::{lm_least_squares, Bounds, FnProblem, LeastSquares, LmOptions, LmResult, LmStop};
pub use power_law::{fit_power_law, log_space, rss, PowerLawFit};
pub use records::{
    append_runs_csv, compute_cost, filter_epochs, read_runs_csv, write_runs_csv, ErrorField, RunRecord,
};
