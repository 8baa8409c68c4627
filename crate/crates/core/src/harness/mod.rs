//! Experiment harness: data, configs, training runs, sweeps and reports.

pub mod config;
pub mod data;
pub mod plan;
pub mod report;
pub mod sweep;
pub mod theorem1;
pub mod train;

pub use config::{ConfigFile, Metric, RunConfig, WidthRule};
pub use data::{DataSpec, Dataset, TaskKind};
pub use plan::{plan, Plan, PlanRow};
pub use report::{report, Format, Report, ReportRow, SeriesPoint};
pub use sweep::{grid, sweep, SweepResult, SweepSpec};
pub use theorem1::{run_negative_control, verify_theorem1, NegativeControl, Theorem1Options, Theorem1Report};
pub use train::{train, RunRecord, Trainer};
