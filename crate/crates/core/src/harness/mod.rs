//! Twin-experiment cycling, diagnostics, experiment suites and reports.

mod config;
mod report;
mod run;
mod suite;

pub use config::{
    ExperimentConfig, FilterConfig, InflationConfig, InitCenter, LocalizationSection, Network,
    ObservationConfig, RunConfig,
};
pub use report::{
    emit_report, write_diagnostics_csv, InflationFieldWriter, write_ecdf_csv, write_summary_json, write_sweep_csv,
    ReportFormat,
};
pub use run::{
    compute_diagnostics, run_twin_experiment, run_twin_experiment_with, CycleDiagnostics,
    RunOutput, RunSummary,
};
pub use suite::{
    beta_ecdf, inflation_sweep, run_suite, spinup_suite, step_sweep, BetaEcdf, SpinupTrace,
    SuiteKind, SuiteOutput, SweepRow,
};
