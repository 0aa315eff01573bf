use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InflationConfig, InitCenter};
use super::run::{run_twin_experiment, CycleDiagnostics, RunSummary};
use crate::error::{Error, Result};
use crate::filters::{FilterKind, Integration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    InflationSweep,
    StepSweep,
    BetaEcdf,
    Spinup,
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_name: String,
    pub param_value: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub spread_mean: f64,
    pub delta_mean: f64,
    pub failures: usize,
    pub aborted: bool,
}

impl SweepRow {
    fn new(param_name: String, param_value: f64, s: &RunSummary) -> Self {
        Self {
            param_name,
            param_value,
            rmse_mean: s.rmse_mean,
            rmse_std: s.rmse_std,
            spread_mean: s.spread_mean,
            delta_mean: s.delta_mean,
            failures: s.failures,
            aborted: s.aborted.is_some(),
        }
    }
}

fn require_grid<T>(grid: &[T]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("suite grid is empty".into()));
    }
    Ok(())
}

/// Runs `base` once per fixed inflation value. Every run shares the seed, so
/// the rows differ only through `δ`.
pub fn inflation_sweep(base: &ExperimentConfig, deltas: &[f64]) -> Result<Vec<SweepRow>> {
    require_grid(deltas)?;
    deltas
        .par_iter()
        .map(|&delta| {
            let mut cfg = *base;
            cfg.inflation = InflationConfig::Fixed { delta };
            let out = run_twin_experiment(&cfg)?;
            Ok(SweepRow::new("delta".into(), delta, &out.summary))
        })
        .collect()
}

/// Runs `base` once per pseudo-time step count, keeping its integration
/// method and schedule shape.
pub fn step_sweep(base: &ExperimentConfig, steps: &[usize]) -> Result<Vec<SweepRow>> {
    require_grid(steps)?;
    let name = format!(
        "steps_{}_{}",
        base.filter.integration.name(),
        base.filter.schedule
    );
    steps
        .par_iter()
        .map(|&n| {
            let mut cfg = *base;
            cfg.filter.steps = n;
            let out = run_twin_experiment(&cfg)?;
            Ok(SweepRow::new(name.clone(), n as f64, &out.summary))
        })
        .collect()
}

/// Empirical distribution of the per-cycle stiffness ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaEcdf {
    sorted: Vec<f64>,
}

impl BetaEcdf {
    pub fn from_samples(mut betas: Vec<f64>) -> Self {
        betas.retain(|b| b.is_finite());
        betas.sort_by(f64::total_cmp);
        Self { sorted: betas }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn fraction_below(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&b| b < x) as f64 / self.len() as f64
    }

    pub fn fraction_above(&self, x: f64) -> f64 {
        (self.len() - self.sorted.partition_point(|&b| b <= x)) as f64 / self.len() as f64
    }

    pub fn median(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            self.sorted[n / 2]
        } else {
            0.5 * (self.sorted[n / 2 - 1] + self.sorted[n / 2])
        }
    }

    pub fn max(&self) -> f64 {
        self.sorted.last().copied().unwrap_or(f64::NAN)
    }

    /// `(β_(i), i / n)` pairs, one per sample.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.len() as f64;
        self.sorted
            .iter()
            .enumerate()
            .map(move |(i, &b)| (b, (i + 1) as f64 / n))
    }
}

/// Cycles an LETKF with the base config and collects `β` over the
/// post-spin-up cycles.
pub fn beta_ecdf(base: &ExperimentConfig) -> Result<(BetaEcdf, RunSummary)> {
    let mut cfg = *base;
    cfg.filter.kind = FilterKind::Letkf;
    let out = run_twin_experiment(&cfg)?;
    let betas = out
        .diagnostics
        .iter()
        .filter(|d| d.cycle >= cfg.run.spinup && !d.failed)
        .map(|d| d.beta)
        .collect();
    Ok((BetaEcdf::from_samples(betas), out.summary))
}

/// First cycles of one spin-up run.
#[derive(Debug, Clone)]
pub struct SpinupTrace {
    pub noise_multiple: f64,
    pub integration: Integration,
    pub summary: RunSummary,
    pub diagnostics: Vec<CycleDiagnostics>,
}

impl SpinupTrace {
    /// Largest analysis RMSE; infinite when any cycle failed.
    pub fn peak_rmse(&self) -> f64 {
        if self.diagnostics.iter().any(|d| d.failed) {
            return f64::INFINITY;
        }
        self.diagnostics
            .iter()
            .map(|d| d.rmse_a)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.summary.completed()
            && self
                .diagnostics
                .iter()
                .all(|d| !d.failed && d.rmse_a.is_finite())
    }
}

/// Starts the ensemble at the model's steady state plus noise of variance
/// `k R` for each multiple `k`, and runs each integration method.
pub fn spinup_suite(
    base: &ExperimentConfig,
    multiples: &[f64],
    methods: &[Integration],
) -> Result<Vec<SpinupTrace>> {
    require_grid(multiples)?;
    require_grid(methods)?;
    let jobs: Vec<(f64, Integration)> = multiples
        .iter()
        .flat_map(|&k| methods.iter().map(move |&m| (k, m)))
        .collect();
    jobs.par_iter()
        .map(|&(k, method)| {
            let mut cfg = *base;
            cfg.run.init = InitCenter::SteadyState;
            cfg.run.init_variance = k * cfg.observations.variance;
            cfg.filter.integration = method;
            let out = run_twin_experiment(&cfg)?;
            Ok(SpinupTrace {
                noise_multiple: k,
                integration: method,
                summary: out.summary,
                diagnostics: out.diagnostics,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum SuiteOutput {
    Sweep(Vec<SweepRow>),
    Ecdf(BetaEcdf, RunSummary),
    Spinup(Vec<SpinupTrace>),
}

/// Dispatches a suite over a numeric grid: inflation values, step counts,
/// or noise multiples. The β ECDF takes its single run from `base` and only
/// requires the grid to be non-empty.
pub fn run_suite(kind: SuiteKind, base: &ExperimentConfig, grid: &[f64]) -> Result<SuiteOutput> {
    require_grid(grid)?;
    match kind {
        SuiteKind::InflationSweep => inflation_sweep(base, grid).map(SuiteOutput::Sweep),
        SuiteKind::StepSweep => {
            let steps = grid
                .iter()
                .map(|&v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::InvalidParameter(format!("step count {v} is not a positive integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            step_sweep(base, &steps).map(SuiteOutput::Sweep)
        }
        SuiteKind::BetaEcdf => beta_ecdf(base).map(|(e, s)| SuiteOutput::Ecdf(e, s)),
        SuiteKind::Spinup => spinup_suite(base, grid, &[Integration::EulerForward, Integration::Dsi])
            .map(SuiteOutput::Spinup),
    }
}
