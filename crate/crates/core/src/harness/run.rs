use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InitCenter};
use crate::dynamics::ModelKind;
use crate::ensemble::{EnsembleMatrix, Role, StateVector};
use crate::error::{check_dim, Result};
use crate::filters::global_analysis;
use crate::loc_inflate::{local_analysis_sweep, InflationState};
use crate::obs::{synthesize_observations, SeededStream, StreamLabel};

/// Per-cycle record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleDiagnostics {
    pub cycle: usize,
    pub rmse_a: f64,
    pub rmse_b: f64,
    pub spread: f64,
    pub beta: f64,
    pub delta_mean: f64,
    pub failed: bool,
}

/// Statistics over the post-spin-up, non-failed cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub spread_mean: f64,
    pub spread_std: f64,
    pub delta_mean: f64,
    pub delta_std: f64,
    /// Failed cycles over the whole run, spin-up included.
    pub failures: usize,
    pub cycles_completed: usize,
    /// Cycles that entered the statistics.
    pub cycles_scored: usize,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
    pub wall_clock_s: f64,
}

impl RunSummary {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub diagnostics: Vec<CycleDiagnostics>,
}

/// `rmse = sqrt(mean_i (x̄_i - x^t_i)²)` and `spread = sqrt(mean_i P_ii)`.
pub fn compute_diagnostics(analysis: &EnsembleMatrix, truth: &StateVector) -> Result<(f64, f64)> {
    check_dim("diagnostics: truth", analysis.n_state(), truth.len())?;
    let x = analysis.matrix();
    let m = x.ncols() as f64;
    let n = x.nrows() as f64;
    let mut sq_err = 0.0;
    let mut var = 0.0;
    for (row, t) in x.row_iter().zip(truth.iter()) {
        let mean = row.sum() / m;
        sq_err += (mean - t).powi(2);
        var += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    }
    Ok(((sq_err / n).sqrt(), (var / n).sqrt()))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub(crate) fn summarize(
    diagnostics: &[CycleDiagnostics],
    spinup: usize,
    aborted: Option<String>,
    wall_clock_s: f64,
) -> RunSummary {
    let scored = diagnostics
        .iter()
        .filter(|d| d.cycle >= spinup && !d.failed);
    let (rmse_mean, rmse_std) = mean_std(scored.clone().map(|d| d.rmse_a));
    let (spread_mean, spread_std) = mean_std(scored.clone().map(|d| d.spread));
    let (delta_mean, delta_std) = mean_std(scored.clone().map(|d| d.delta_mean));
    RunSummary {
        rmse_mean,
        rmse_std,
        spread_mean,
        spread_std,
        delta_mean,
        delta_std,
        failures: diagnostics.iter().filter(|d| d.failed).count(),
        cycles_completed: diagnostics.len(),
        cycles_scored: scored.count(),
        aborted,
        wall_clock_s,
    }
}

fn rest_state(cfg: &ExperimentConfig) -> DVector<f64> {
    match cfg.model.kind {
        ModelKind::L63 { .. } => DVector::zeros(3),
        ModelKind::L96 { n, forcing } => DVector::from_element(n, forcing),
    }
}

/// Nature-run start: a perturbed reference point advanced through the spin-up.
fn initial_truth(cfg: &ExperimentConfig) -> Result<DVector<f64>> {
    let mut stream = SeededStream::new(StreamLabel::NatureInit, cfg.run.seed);
    let n = cfg.model.state_dim();
    let x0 = match cfg.model.kind {
        ModelKind::L63 { .. } => DVector::from_element(n, 1.0) + stream.normal_vector(n),
        ModelKind::L96 { .. } => rest_state(cfg) + stream.normal_vector(n) * 0.01,
    };
    cfg.model.rk4_advance(&x0, cfg.run.nature_spinup_steps)
}

fn initial_ensemble(cfg: &ExperimentConfig, truth: &DVector<f64>) -> Result<EnsembleMatrix> {
    let mut stream = SeededStream::new(StreamLabel::EnsembleInit, cfg.run.seed);
    let center = match cfg.run.init {
        InitCenter::Truth => truth.clone(),
        InitCenter::SteadyState => rest_state(cfg),
    };
    let sd = cfg.run.init_variance.sqrt();
    let n = center.len();
    let m = cfg.filter.members;
    let mut x = DMatrix::zeros(n, m);
    for j in 0..m {
        let noise = stream.normal_vector(n);
        for i in 0..n {
            x[(i, j)] = center[i] + sd * noise[i];
        }
    }
    EnsembleMatrix::new(x, Role::Full)
}

/// Cycles forecast → (inflate, analyze) → diagnostics against a nature run
/// of the same model.
///
/// A failed analysis keeps the inflated background and is flagged. A model
/// blow-up flags the cycle and ends the run, as does exceeding the configured
/// fraction of failed cycles.
pub fn run_twin_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_twin_experiment_with(cfg, |_, _| {})
}

/// As [`run_twin_experiment`], handing each cycle's diagnostics and the
/// inflation field that cycle's analysis used to `observer` as it completes.
pub fn run_twin_experiment_with(
    cfg: &ExperimentConfig,
    mut observer: impl FnMut(&CycleDiagnostics, &InflationState),
) -> Result<RunOutput> {
    let start = Instant::now();
    let resolved = cfg.resolve()?;
    let mut inflation = resolved.inflation;
    let mut truth = initial_truth(cfg)?;
    let mut ens = initial_ensemble(cfg, &truth)?;
    let mut obs_stream = SeededStream::new(StreamLabel::ObsNoise, cfg.run.seed);
    let interval = cfg.observations.interval;
    let parallel = cfg.run.parallel;
    let max_failures = (cfg.run.abort_failure_fraction * cfg.run.cycles as f64).floor() as usize;

    let mut diagnostics = Vec::with_capacity(cfg.run.cycles);
    let mut failures = 0usize;
    let mut aborted = None;
    for cycle in 0..cfg.run.cycles {
        truth = cfg.model.rk4_advance(&truth, interval)?;
        let truth_sv = StateVector::new(truth.clone())?;
        let delta_mean = inflation.mean_delta();
        let background = match cfg.model.forecast_ensemble(&ens, interval, parallel) {
            Ok(b) => b,
            Err(e) => {
                let d = CycleDiagnostics {
                    cycle,
                    rmse_a: f64::NAN,
                    rmse_b: f64::NAN,
                    spread: f64::NAN,
                    beta: f64::NAN,
                    delta_mean,
                    failed: true,
                };
                observer(&d, &inflation);
                diagnostics.push(d);
                aborted = Some(format!("forecast diverged at cycle {cycle}: {e}"));
                break;
            }
        };
        let (rmse_b, _) = compute_diagnostics(&background, &truth_sv)?;
        let obs = synthesize_observations(
            &truth,
            &resolved.operator,
            &resolved.errors,
            &mut obs_stream,
            cycle,
        )?;
        let (result, next) = match &resolved.localization {
            Some(loc) => {
                let (result, next) = local_analysis_sweep(
                    cfg.filter.kind,
                    &background,
                    &obs,
                    loc,
                    &inflation,
                    &resolved.scheme,
                    cfg.filter.mean_mode,
                    parallel,
                )?;
                (result, Some(next))
            }
            None => (
                global_analysis(
                    cfg.filter.kind,
                    &background,
                    &obs,
                    &resolved.scheme,
                    cfg.filter.mean_mode,
                    inflation.delta(0),
                )?,
                None,
            ),
        };
        let failed = result.failed();
        let (rmse_a, spread) = compute_diagnostics(&result.ensemble, &truth_sv)?;
        let d = CycleDiagnostics {
            cycle,
            rmse_a,
            rmse_b,
            spread,
            beta: result.stiffness.beta,
            delta_mean,
            failed,
        };
        observer(&d, &inflation);
        diagnostics.push(d);
        if let Some(next) = next {
            inflation = next;
        }
        ens = result.ensemble;
        if failed {
            failures += 1;
            if failures > max_failures {
                aborted = Some(format!(
                    "{failures} failed analyses exceed the abort threshold after cycle {cycle}"
                ));
                break;
            }
        }
    }
    let summary = summarize(
        &diagnostics,
        cfg.run.spinup,
        aborted,
        start.elapsed().as_secs_f64(),
    );
    Ok(RunOutput {
        summary,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::FilterKind;
    use approx::assert_relative_eq;

    #[test]
    fn diagnostics_by_hand() {
        let truth = StateVector::from_slice(&[0.0, 0.0]).unwrap();
        let ens = EnsembleMatrix::full(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let (rmse, spread) = compute_diagnostics(&ens, &truth).unwrap();
        assert_eq!(rmse, 1.0);
        assert_eq!(spread, 0.0);

        let ens = EnsembleMatrix::full(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0])).unwrap();
        let (rmse, spread) = compute_diagnostics(&ens, &truth).unwrap();
        assert_eq!(rmse, 0.0);
        // Variances 2 and 0.
        assert_relative_eq!(spread, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn summary_skips_spinup_and_failures() {
        let mk = |cycle, rmse_a, failed| CycleDiagnostics {
            cycle,
            rmse_a,
            rmse_b: 0.0,
            spread: 1.0,
            beta: 0.0,
            delta_mean: 0.1,
            failed,
        };
        let diags = [mk(0, 100.0, false), mk(1, 1.0, false), mk(2, 50.0, true), mk(3, 3.0, false)];
        let s = summarize(&diags, 1, None, 0.0);
        assert_eq!(s.rmse_mean, 2.0);
        assert_relative_eq!(s.rmse_std, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(s.failures, 1);
        assert_eq!(s.cycles_scored, 2);
    }

    #[test]
    fn noiseless_tracking_on_truth() {
        let mut cfg = ExperimentConfig::lorenz63(8, FilterKind::Etkbf, 0.0);
        cfg.observations.variance = 1e-300;
        cfg.run.init_variance = 0.0;
        cfg.run.cycles = 20;
        cfg.run.spinup = 0;
        let out = run_twin_experiment(&cfg).unwrap();
        assert!(out.diagnostics.iter().all(|d| d.rmse_a < 1e-12 && !d.failed));
    }

    #[test]
    fn same_seed_same_run() {
        let mut cfg = ExperimentConfig::lorenz63(8, FilterKind::Detkbf, 0.05);
        cfg.run.cycles = 200;
        cfg.run.spinup = 50;
        let a = run_twin_experiment(&cfg).unwrap();
        let b = run_twin_experiment(&cfg).unwrap();
        assert_eq!(a.diagnostics, b.diagnostics);
        cfg.run.seed = 2;
        let c = run_twin_experiment(&cfg).unwrap();
        assert_ne!(a.diagnostics, c.diagnostics);
    }
}
