use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use etkbf::filters::{FilterKind, Integration};
use etkbf::harness::{
    beta_ecdf, emit_report, inflation_sweep, run_twin_experiment, run_twin_experiment_with,
    spinup_suite, step_sweep, write_diagnostics_csv, write_ecdf_csv, write_sweep_csv,
    ExperimentConfig, InflationFieldWriter, ReportFormat, RunSummary,
};
use etkbf::oracle::run_oracle_checks;
use etkbf::pseudo_time::ScheduleKind;

#[derive(Parser)]
#[command(name = "etkbf", version, about = "Ensemble transform Kalman-Bucy filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One twin experiment: per-cycle CSV plus JSON summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the per-gridpoint inflation field of every cycle to
        /// inflation.csv.
        #[arg(long)]
        inflation_field: bool,
    },
    /// Fixed-inflation sweep.
    SweepInflation {
        #[command(flatten)]
        common: Common,
        /// Comma-separated δ values. Defaults to 0.01..0.1 for observation
        /// intervals up to 8 steps and 0.1..0.9 otherwise.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Pseudo-time step-count sweep with the configured scheme and schedule.
    SweepSteps {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 8, 10, 20])]
        grid: Vec<usize>,
    },
    /// Empirical distribution of the stiffness ratio under an LETKF.
    BetaEcdf(Common),
    /// Steady-state initialization stress test, Euler forward against DSI.
    Spinup {
        #[command(flatten)]
        common: Common,
        /// Initial noise variances as multiples of the observation variance.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
        multiples: Vec<f64>,
    },
    /// Randomized checks of the integrators against closed-form solutions.
    OracleCheck {
        #[arg(long, default_value_t = 20_240_101)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// letkf, etkbf, detkbf, bgr09_state or br10_state.
    #[arg(long)]
    filter: Option<FilterKind>,
    /// dsi or euler_forward.
    #[arg(long)]
    scheme: Option<Integration>,
    #[arg(long)]
    steps: Option<usize>,
    /// uniform or doubling.
    #[arg(long)]
    schedule: Option<ScheduleKind>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        if !self.config.exists() {
            bail!("config file not found: {}", self.config.display());
        }
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(cycles) = self.cycles {
            cfg.run.cycles = cycles;
            if cfg.run.spinup >= cycles {
                cfg.run.spinup = cycles / 10;
            }
        }
        if let Some(kind) = self.filter {
            cfg.filter.kind = kind;
        }
        if let Some(method) = self.scheme {
            cfg.filter.integration = method;
        }
        if let Some(steps) = self.steps {
            cfg.filter.steps = steps;
        }
        if let Some(schedule) = self.schedule {
            cfg.filter.schedule = schedule;
        }
        cfg.validate()
            .with_context(|| format!("invalid configuration from {}", self.config.display()))?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

fn print_summary(label: &str, s: &RunSummary) {
    println!(
        "{label}: rmse {:.4} ({:.4}) spread {:.4} delta {:.4} failures {} scored {}{}",
        s.rmse_mean,
        s.rmse_std,
        s.spread_mean,
        s.delta_mean,
        s.failures,
        s.cycles_scored,
        s.aborted
            .as_deref()
            .map(|r| format!(" ABORTED: {r}"))
            .unwrap_or_default()
    );
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Run { common, inflation_field } => {
            let cfg = common.load()?;
            let dir = common.out_dir()?;
            let mut paths = Vec::new();
            let out = if inflation_field {
                let path = dir.join("inflation.csv");
                let mut writer = InflationFieldWriter::create(&path)?;
                let mut write_err = None;
                let out = run_twin_experiment_with(&cfg, |d, infl| {
                    if write_err.is_none() {
                        write_err = writer.record(d.cycle, infl).err();
                    }
                })?;
                if let Some(e) = write_err {
                    return Err(e.into());
                }
                writer.finish()?;
                paths.push(path);
                out
            } else {
                run_twin_experiment(&cfg)?
            };
            paths.extend(emit_report(
                dir,
                "run",
                &out.summary,
                &out.diagnostics,
                &cfg,
                &[ReportFormat::Csv, ReportFormat::Json],
            )?);
            print_summary(cfg.filter.kind.name(), &out.summary);
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::SweepInflation { common, grid } => {
            let cfg = common.load()?;
            let grid = if grid.is_empty() {
                let (start, step) = if cfg.observations.interval <= 8 {
                    (0.01, 0.01)
                } else {
                    (0.1, 0.1)
                };
                (1..=if start < 0.1 { 10 } else { 9 })
                    .map(|k| ((start + step * (k - 1) as f64) * 100.0).round() / 100.0)
                    .collect()
            } else {
                grid
            };
            let rows = inflation_sweep(&cfg, &grid)?;
            let path = common.out_dir()?.join("sweep_inflation.csv");
            write_sweep_csv(&path, &rows)?;
            for r in &rows {
                println!("delta {}: rmse {:.4} failures {}", r.param_value, r.rmse_mean, r.failures);
            }
            println!("wrote {}", path.display());
        }
        Command::SweepSteps { common, grid } => {
            let cfg = common.load()?;
            let rows = step_sweep(&cfg, &grid)?;
            let path = common.out_dir()?.join("sweep_steps.csv");
            write_sweep_csv(&path, &rows)?;
            for r in &rows {
                println!("steps {}: rmse {:.4} failures {}", r.param_value, r.rmse_mean, r.failures);
            }
            println!("wrote {}", path.display());
        }
        Command::BetaEcdf(common) => {
            let cfg = common.load()?;
            let (ecdf, summary) = beta_ecdf(&cfg)?;
            let path = common.out_dir()?.join("beta_ecdf.csv");
            write_ecdf_csv(&path, &ecdf)?;
            print_summary("letkf", &summary);
            println!(
                "beta: n {} P(<0.1) {:.3} P(>1) {:.3} median {:.4} max {:.3}",
                ecdf.len(),
                ecdf.fraction_below(0.1),
                ecdf.fraction_above(1.0),
                ecdf.median(),
                ecdf.max()
            );
            println!("wrote {}", path.display());
        }
        Command::Spinup { common, multiples } => {
            let cfg = common.load()?;
            let traces = spinup_suite(&cfg, &multiples, &[Integration::EulerForward, Integration::Dsi])?;
            let dir = common.out_dir()?;
            for t in &traces {
                let path = dir.join(format!("spinup_{}_{}r.csv", t.integration, t.noise_multiple));
                write_diagnostics_csv(&path, &t.diagnostics)?;
                println!(
                    "{} {}R: peak rmse {:.4} failures {}{}",
                    t.integration,
                    t.noise_multiple,
                    t.peak_rmse(),
                    t.summary.failures,
                    if t.summary.completed() { "" } else { " (aborted)" }
                );
            }
        }
        Command::OracleCheck { seed } => {
            let report = run_oracle_checks(seed)?;
            for s in &report.suites {
                println!(
                    "{}: {} passed, {} failed (worst relative error {:.3e}, tolerance {:.0e})",
                    s.name, s.passed, s.failed, s.worst, s.tolerance
                );
            }
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
