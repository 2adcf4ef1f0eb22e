//! Cost accounting, rate-distortion sweeps and BD-rate.

mod bdrate;
mod cost;
mod sweep;

pub use bdrate::{bd_rate, RdCurve};
pub use cost::{
    active_params, cost_report, flops_count, gdn_param_bytes, independent_params, level_cost, memory_footprint,
    total_params, CostReport, LevelCost, BYTES_PER_VALUE,
};
pub use sweep::{median_ms, rd_sweep, rows_from_csv, rows_to_csv, sweep_curve, write_rows, SweepRow, Timing};
