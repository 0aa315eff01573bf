//! R-localization with the Gaspari-Cohn taper, multiplicative inflation
//! (fixed and adaptive), and the per-gridpoint local analysis driver.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{mean_and_perturbations, EnsembleMatrix, Role};
use crate::error::{check_dim, Error, Result};
use crate::filters::{
    ensemble_is_sane, integrate_detkbf, integrate_etkbf, letkf_transform, AnalysisFailure,
    AnalysisResult, EnsembleSpaceProblem, FilterKind, IntegrationScheme, MeanUpdateMode,
};
use crate::obs::ObservationBatch;
use crate::pseudo_time::{beta_ratio, StiffnessReport};

/// Gaspari-Cohn fifth-order piecewise rational correlation with support
/// `[0, 2c)`.
pub fn gaspari_cohn(d: f64, c: f64) -> f64 {
    let r = d.abs() / c;
    if r <= 1.0 {
        (((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0
    } else if r < 2.0 {
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Periodic 1-D grid of the given size.
    Ring(usize),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationConfig {
    radius: f64,
    topology: Topology,
}

impl LocalizationConfig {
    pub fn new(radius: f64, topology: Topology) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "localization radius must be positive, got {radius}"
            )));
        }
        Ok(Self { radius, topology })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Taper scale `c = λ / √3`.
    pub fn taper_scale(&self) -> f64 {
        self.radius / 3f64.sqrt()
    }

    pub fn cutoff(&self) -> f64 {
        2.0 * self.taper_scale()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let diff = i.abs_diff(j);
        match self.topology {
            Topology::Ring(n) => diff.min(n - diff) as f64,
            Topology::None => diff as f64,
        }
    }
}

/// Observations used by one local analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservations {
    /// Rows of the global batch.
    pub rows: Vec<usize>,
    pub distances: Vec<f64>,
    /// `r_i / ρ(d_i)`.
    pub tapered_variances: Vec<f64>,
}

impl LocalObservations {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Keeps observations closer than `2c` to `center` and divides their error
/// variance by the Gaspari-Cohn weight. Zero-weight observations are dropped.
pub fn localize_observation_errors(
    center: usize,
    obs: &ObservationBatch,
    loc: &LocalizationConfig,
) -> Result<LocalObservations> {
    let locations = obs.operator.locations().ok_or_else(|| Error::Unsupported {
        kind: "observation operator",
        detail: "localization needs observations with gridpoint locations".into(),
    })?;
    let c = loc.taper_scale();
    let mut out = LocalObservations {
        rows: Vec::new(),
        distances: Vec::new(),
        tapered_variances: Vec::new(),
    };
    for (row, (&g, &var)) in locations
        .iter()
        .zip(obs.errors.variances().iter())
        .enumerate()
    {
        let d = loc.distance(center, g);
        let weight = gaspari_cohn(d, c);
        if weight > 0.0 {
            out.rows.push(row);
            out.distances.push(d);
            out.tapered_variances.push(var / weight);
        }
    }
    Ok(out)
}

/// `X^b → (1 + δ) X^b`.
pub fn apply_fixed_inflation(pert: &EnsembleMatrix, delta: f64) -> Result<EnsembleMatrix> {
    if pert.role() != Role::Perturbations {
        return Err(Error::Role("inflation acts on perturbations"));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "inflation must be non-negative, got {delta}"
        )));
    }
    Ok(EnsembleMatrix::from_raw(
        pert.matrix() * (1.0 + delta),
        Role::Perturbations,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveInflationConfig {
    /// Smoothing gain for the `(1 + δ)²` estimate.
    pub kappa: f64,
    /// Floor applied to each instantaneous `(1 + δ)²` estimate.
    pub floor: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub initial: f64,
}

impl Default for AdaptiveInflationConfig {
    fn default() -> Self {
        Self {
            kappa: 0.03,
            floor: 1.0,
            delta_min: 0.0,
            delta_max: 1.0,
            initial: 0.05,
        }
    }
}

impl AdaptiveInflationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "inflation gain must lie in (0, 1], got {}",
                self.kappa
            )));
        }
        if !(0.0 <= self.delta_min && self.delta_min <= self.delta_max) {
            return Err(Error::InvalidParameter(
                "inflation bounds must satisfy 0 <= delta_min <= delta_max".into(),
            ));
        }
        if !(self.delta_min..=self.delta_max).contains(&self.initial) {
            return Err(Error::InvalidParameter(
                "initial inflation outside its bounds".into(),
            ));
        }
        Ok(())
    }
}

/// Per-gridpoint multiplicative inflation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct InflationState {
    deltas: Vec<f64>,
    adaptive: Option<AdaptiveInflationConfig>,
    /// Updates skipped because the local ensemble had collapsed.
    pub collapsed_warnings: usize,
}

impl InflationState {
    pub fn fixed(n_gridpoints: usize, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inflation must be non-negative, got {delta}"
            )));
        }
        Ok(Self {
            deltas: vec![delta; n_gridpoints],
            adaptive: None,
            collapsed_warnings: 0,
        })
    }

    pub fn adaptive(n_gridpoints: usize, cfg: AdaptiveInflationConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            deltas: vec![cfg.initial; n_gridpoints],
            adaptive: Some(cfg),
            collapsed_warnings: 0,
        })
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn delta(&self, q: usize) -> f64 {
        self.deltas[q]
    }

    pub fn mean_delta(&self) -> f64 {
        self.deltas.iter().sum::<f64>() / self.deltas.len().max(1) as f64
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive.is_some()
    }

    pub fn adaptive_config(&self) -> Option<&AdaptiveInflationConfig> {
        self.adaptive.as_ref()
    }
}

/// Outcome of one adaptive update at one gridpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
enum InflationUpdate {
    Updated(f64),
    Skipped,
    Collapsed,
}

/// Innovation-statistics estimate of `(1 + δ)²`, smoothed with gain `κ`.
///
/// The estimate is `(dᵀ R_loc⁻¹ d - L_loc) / (tr(Y_locᵀ R_loc⁻¹ Y_loc) / (M-1))`,
/// where `Y_loc` holds the uninflated background perturbations.
fn estimate_delta(
    cfg: &AdaptiveInflationConfig,
    delta: f64,
    innovation: &[f64],
    y_pert: &DMatrix<f64>,
    tapered_variances: &[f64],
) -> InflationUpdate {
    let l = innovation.len();
    if l == 0 {
        return InflationUpdate::Skipped;
    }
    let m = y_pert.ncols() as f64;
    let mut d_norm = 0.0;
    let mut spread = 0.0;
    for i in 0..l {
        let w = 1.0 / tapered_variances[i];
        d_norm += innovation[i] * innovation[i] * w;
        spread += y_pert.row(i).norm_squared() * w;
    }
    let spread = spread / (m - 1.0);
    // Spread at roundoff level counts as collapsed.
    if !(spread > l as f64 * f64::EPSILON) {
        return InflationUpdate::Collapsed;
    }
    let estimate = ((d_norm - l as f64) / spread).max(cfg.floor);
    let factor = (1.0 + delta).powi(2);
    let smoothed = (1.0 - cfg.kappa) * factor + cfg.kappa * estimate;
    InflationUpdate::Updated((smoothed.sqrt() - 1.0).clamp(cfg.delta_min, cfg.delta_max))
}

/// Updates `δ_q` from one gridpoint's local innovation statistics.
///
/// `innovation` is `y - H x̄^b`, `y_pert_loc` the uninflated `Y^b` rows, and
/// `r_loc` the tapered variances. With fixed inflation the state is returned
/// unchanged.
pub fn adaptive_inflation_update(
    state: &InflationState,
    gridpoint: usize,
    innovation: &[f64],
    y_pert_loc: &DMatrix<f64>,
    r_loc: &[f64],
) -> Result<InflationState> {
    check_dim("inflation update: perturbation rows", innovation.len(), y_pert_loc.nrows())?;
    check_dim("inflation update: tapered variances", innovation.len(), r_loc.len())?;
    if gridpoint >= state.deltas.len() {
        return Err(Error::InvalidParameter(format!(
            "gridpoint {gridpoint} out of range"
        )));
    }
    let mut next = state.clone();
    if let Some(cfg) = &state.adaptive {
        match estimate_delta(cfg, state.deltas[gridpoint], innovation, y_pert_loc, r_loc) {
            InflationUpdate::Updated(d) => next.deltas[gridpoint] = d,
            InflationUpdate::Collapsed => next.collapsed_warnings += 1,
            InflationUpdate::Skipped => {}
        }
    }
    Ok(next)
}

struct GridpointOutcome {
    row: Vec<f64>,
    failed: Option<Option<usize>>,
    update: InflationUpdate,
}

/// Runs an independent ensemble-space analysis at every gridpoint of a ring
/// and writes back only that gridpoint's row.
///
/// Supported kinds are LETKF, ETKBF and DETKBF. Each gridpoint inflates its
/// local perturbations by its own `δ_q`; adaptive inflation then updates
/// `δ_q` from the local innovations for the next cycle. Gridpoints share no
/// state within a sweep, so the parallel and sequential paths agree bitwise.
#[allow(clippy::too_many_arguments)]
pub fn local_analysis_sweep(
    kind: FilterKind,
    ens_b: &EnsembleMatrix,
    obs: &ObservationBatch,
    loc: &LocalizationConfig,
    inflation: &InflationState,
    scheme: &IntegrationScheme,
    mode: MeanUpdateMode,
    parallel: bool,
) -> Result<(AnalysisResult, InflationState)> {
    if !matches!(kind, FilterKind::Letkf | FilterKind::Etkbf | FilterKind::Detkbf) {
        return Err(Error::Unsupported {
            kind: "filter kind",
            detail: format!("{kind} has no localized ensemble-space form"),
        });
    }
    let n = ens_b.n_state();
    match loc.topology() {
        Topology::Ring(ring) if ring == n => {}
        _ => {
            return Err(Error::Unsupported {
                kind: "topology",
                detail: format!("local analysis needs a ring of {n} gridpoints"),
            })
        }
    }
    check_dim("inflation gridpoints", n, inflation.deltas.len())?;
    let (mean, pert) = mean_and_perturbations(ens_b)?;
    let x = pert.matrix();
    let y_pert = obs.operator.apply(x)?;
    let y_mean = obs.operator.apply_vector(&mean)?;
    let innovation = &obs.y - &y_mean;
    let m = ens_b.n_members();

    let analyze = |q: usize| -> Result<GridpointOutcome> {
        let local = localize_observation_errors(q, obs, loc)?;
        let delta = inflation.deltas[q];
        let scale = 1.0 + delta;
        let pert_row: Vec<f64> = x.row(q).iter().map(|v| v * scale).collect();
        let y_loc = y_pert.select_rows(local.rows.iter());
        let problem = EnsembleSpaceProblem::new(
            &y_loc * scale,
            DVector::from_iterator(local.len(), local.rows.iter().map(|&r| y_mean[r])),
            DVector::from_iterator(local.len(), local.rows.iter().map(|&r| obs.y[r])),
            DVector::from_column_slice(&local.tapered_variances),
        )?;
        let transform = match kind {
            FilterKind::Letkf => letkf_transform(&problem).map(|(t, _)| t).map_err(|_| None),
            FilterKind::Etkbf => {
                integrate_etkbf(&problem, scheme, mode).map_err(|f| Some(f.pseudo_step))
            }
            _ => integrate_detkbf(&problem, scheme).map_err(|f| Some(f.pseudo_step)),
        };
        let (row, failed) = match transform {
            Ok(t) => {
                let row = t.analysis_row(mean[q], &pert_row);
                if row.iter().all(|v| v.is_finite() && v.abs() <= crate::dynamics::BLOWUP_THRESHOLD) {
                    (row, None)
                } else {
                    (background_row(mean[q], &pert_row), Some(None))
                }
            }
            Err(step) => (background_row(mean[q], &pert_row), Some(step)),
        };
        let update = match &inflation.adaptive {
            Some(cfg) => {
                let innov: Vec<f64> = local.rows.iter().map(|&r| innovation[r]).collect();
                estimate_delta(cfg, delta, &innov, &y_loc, &local.tapered_variances)
            }
            None => InflationUpdate::Skipped,
        };
        Ok(GridpointOutcome {
            row,
            failed,
            update,
        })
    };

    let outcomes: Vec<GridpointOutcome> = if parallel {
        (0..n).into_par_iter().map(analyze).collect::<Result<_>>()?
    } else {
        (0..n).map(analyze).collect::<Result<_>>()?
    };

    let mut analysis = DMatrix::zeros(n, m);
    let mut next = inflation.clone();
    let mut failed_points = Vec::new();
    let mut first_step: Option<usize> = None;
    for (q, out) in outcomes.into_iter().enumerate() {
        for (j, v) in out.row.into_iter().enumerate() {
            analysis[(q, j)] = v;
        }
        if let Some(step) = out.failed {
            failed_points.push(q);
            first_step = first_step.or(step);
        }
        match out.update {
            InflationUpdate::Updated(d) => next.deltas[q] = d,
            InflationUpdate::Collapsed => next.collapsed_warnings += 1,
            InflationUpdate::Skipped => {}
        }
    }

    // β of the whole uninflated background, as for a global analysis.
    let beta = beta_ratio(&y_pert, &obs.errors)?.beta;
    let failure = (!failed_points.is_empty()).then(|| AnalysisFailure {
        reason: format!("local analysis failed at {} gridpoints", failed_points.len()),
        pseudo_step: first_step,
        gridpoints: failed_points,
    });
    debug_assert!(failure.is_some() || ensemble_is_sane(&analysis));
    let steps = match kind {
        FilterKind::Letkf => 0,
        _ => scheme.schedule.len(),
    };
    Ok((
        AnalysisResult {
            ensemble: EnsembleMatrix::from_raw(analysis, Role::Full),
            weights: None,
            mean_weights: None,
            stiffness: StiffnessReport { beta },
            steps,
            failure,
        },
        next,
    ))
}

fn background_row(mean: f64, pert_row: &[f64]) -> Vec<f64> {
    pert_row.iter().map(|p| mean + p).collect()
}
