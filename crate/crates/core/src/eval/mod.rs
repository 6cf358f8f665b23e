//! Measurement suites: training convergence, closed-loop races, latency and
//! barrier-certificate accounting.

mod convergence;
mod latency;
mod race;
mod report;

pub use convergence::{median, run_convergence, train_model, ConvergenceReport, MetricRow, TrainConfig, TrainRun};
pub use latency::LatencyStats;
pub use race::{
    race_policy, run_metrics, run_races, steering_rate, uniform_half_width, PolicyRace, RaceConfig, RaceReport,
    RunMetrics, RESIDUAL_TOL,
};
pub use report::{
    convergence_csv, convergence_table, emit_convergence, emit_races, latency_csv, latency_table, parse_csv,
    race_runs_csv, race_table, CONVERGENCE_HEADER, FILTER_RUN_HEADER, LATENCY_HEADER, RUN_HEADER,
};
