//! Monte Carlo estimators, stretched-exponential fits, censored survival
//! curves and the `g0` extraction from per-realization tail series.

pub mod correlation;
pub mod fit;
pub mod g0;
pub mod ks;
pub mod series;
pub mod survival;
pub mod tail;

pub use correlation::{quenched_correlation, CorrelationParams, CorrelationResult, Direction};
pub use fit::{fit_stretched_exp, StretchedExpFit, WaitingIndex, WindowPolicy};
pub use g0::{extract_g0, G0Report};
pub use series::{log_grid, Acc, DecaySeries, SeriesPoint};
pub use survival::{kaplan_meier, Observation};
pub use tail::{estimate_tail_measure, TailEstimate, TailParams};
