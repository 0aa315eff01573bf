//! Analysis-step algorithms.
//!
//! * LETKF: closed-form ensemble-space transform.
//! * ETKBF: pseudo-time flow of perturbation weights `W` (plus mean weights).
//! * DETKBF: pseudo-time flow of full-ensemble weights `W̄`.
//! * BGR09 / BR10 state flows: the state-space parents of the two transform
//!   filters.
//! * A direct Kalman-filter analysis as the reference.

pub mod kf;
pub mod state_space;
pub mod transform;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::BLOWUP_THRESHOLD;
use crate::ensemble::{
    mean_and_perturbations, EnsembleMatrix, Role, StateVector, WeightMatrix,
};
use crate::error::{Error, Result};
use crate::obs::ObservationBatch;
use crate::pseudo_time::{beta_ratio, StepSchedule, StiffnessReport};

pub use kf::kf_reference_analysis;
pub use state_space::state_space_step;
pub use transform::{
    detkbf_step, etkbf_step, integrate_detkbf, integrate_etkbf, letkf_transform,
    EnsembleSpaceProblem, StepFailure, Transform,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Letkf,
    Etkbf,
    Detkbf,
    Bgr09State,
    Br10State,
    KfReference,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Letkf => "letkf",
            Self::Etkbf => "etkbf",
            Self::Detkbf => "detkbf",
            Self::Bgr09State => "bgr09_state",
            Self::Br10State => "br10_state",
            Self::KfReference => "kf_reference",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Letkf,
            Self::Etkbf,
            Self::Detkbf,
            Self::Bgr09State,
            Self::Br10State,
            Self::KfReference,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::InvalidParameter(format!("unknown filter `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    EulerForward,
    Dsi,
}

impl Integration {
    pub fn name(self) -> &'static str {
        match self {
            Self::EulerForward => "euler_forward",
            Self::Dsi => "dsi",
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler_forward" | "euler-forward" | "ef" => Ok(Self::EulerForward),
            "dsi" => Ok(Self::Dsi),
            _ => Err(Error::InvalidParameter(format!("unknown scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationScheme {
    pub method: Integration,
    pub schedule: StepSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanUpdateMode {
    /// Mean weights advance with every pseudo-step.
    #[default]
    PerStep,
    /// Mean from the Kalman update with `K = P^a Hᵀ R⁻¹` after the
    /// perturbation flow has finished.
    FinalGain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisFailure {
    pub reason: String,
    pub pseudo_step: Option<usize>,
    /// Gridpoints whose local analysis failed (empty for global analyses).
    pub gridpoints: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    /// Full analysis ensemble; only guaranteed finite when `failure` is `None`.
    pub ensemble: EnsembleMatrix,
    pub weights: Option<WeightMatrix>,
    pub mean_weights: Option<DVector<f64>>,
    pub stiffness: StiffnessReport,
    pub steps: usize,
    pub failure: Option<AnalysisFailure>,
}

impl AnalysisResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Whether an analysis ensemble is usable: finite and inside the blow-up bound.
pub(crate) fn ensemble_is_sane(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_THRESHOLD)
}

struct Prepared {
    mean: DVector<f64>,
    pert: DMatrix<f64>,
    problem: EnsembleSpaceProblem,
    inflation: f64,
}

impl Prepared {
    /// β of the uninflated background.
    fn stiffness(&self) -> Result<StiffnessReport> {
        let report = beta_ratio(&self.problem.y_pert, &self.problem.error_model()?)?;
        Ok(StiffnessReport {
            beta: report.beta / (1.0 + self.inflation).powi(2),
        })
    }
}

fn prepare(ens_b: &EnsembleMatrix, obs: &ObservationBatch, inflation: f64) -> Result<Prepared> {
    if ens_b.role() != Role::Full {
        return Err(Error::Role("analysis expects the full background ensemble"));
    }
    if !(inflation >= 0.0 && inflation.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "inflation must be non-negative, got {inflation}"
        )));
    }
    let (mean, pert) = mean_and_perturbations(ens_b)?;
    let pert = pert.into_matrix() * (1.0 + inflation);
    let y_pert = obs.operator.apply(&pert)?;
    let y_mean = obs.operator.apply_vector(&mean)?;
    let problem = EnsembleSpaceProblem::new(
        y_pert,
        y_mean,
        obs.y.clone(),
        obs.errors.variances().clone(),
    )?;
    Ok(Prepared {
        mean: mean.into_inner(),
        pert,
        problem,
        inflation,
    })
}

fn apply_transform(t: &Transform, mean: &DVector<f64>, pert: &DMatrix<f64>) -> DMatrix<f64> {
    match t {
        Transform::Perturbation {
            weights,
            mean_weights,
        } => {
            let shifted = mean + pert * mean_weights;
            let mut out = pert * weights;
            for mut col in out.column_iter_mut() {
                col += &shifted;
            }
            out
        }
        Transform::Full { weights } => {
            let mut full = pert.clone();
            for mut col in full.column_iter_mut() {
                col += mean;
            }
            full * weights
        }
    }
}

fn finish(
    analysis: DMatrix<f64>,
    transform: Option<&Transform>,
    stiffness: StiffnessReport,
    steps: usize,
    failure: Option<AnalysisFailure>,
) -> AnalysisResult {
    let failure = failure.or_else(|| {
        (!ensemble_is_sane(&analysis)).then(|| AnalysisFailure {
            reason: "analysis ensemble diverged".into(),
            pseudo_step: None,
            gridpoints: Vec::new(),
        })
    });
    AnalysisResult {
        ensemble: EnsembleMatrix::from_raw(analysis, Role::Full),
        weights: transform.map(Transform::weight_matrix),
        mean_weights: transform.and_then(|t| t.mean_weights().cloned()),
        stiffness,
        steps,
        failure,
    }
}

/// LETKF analysis with multiplicative inflation `(1 + δ)` on the background
/// perturbations.
pub fn letkf_analysis(
    ens_b: &EnsembleMatrix,
    obs: &ObservationBatch,
    inflation: f64,
) -> Result<AnalysisResult> {
    let prep = prepare(ens_b, obs, inflation)?;
    let stiffness = prep.stiffness()?;
    match letkf_transform(&prep.problem) {
        Ok((t, _)) => Ok(finish(
            apply_transform(&t, &prep.mean, &prep.pert),
            Some(&t),
            stiffness,
            0,
            None,
        )),
        Err(e) => Ok(failed_result(&prep, stiffness, 0, e.to_string(), None)),
    }
}

fn failed_result(
    prep: &Prepared,
    stiffness: StiffnessReport,
    steps: usize,
    reason: String,
    pseudo_step: Option<usize>,
) -> AnalysisResult {
    let mut background = prep.pert.clone();
    for mut col in background.column_iter_mut() {
        col += &prep.mean;
    }
    AnalysisResult {
        ensemble: EnsembleMatrix::from_raw(background, Role::Full),
        weights: None,
        mean_weights: None,
        stiffness,
        steps,
        failure: Some(AnalysisFailure {
            reason,
            pseudo_step,
            gridpoints: Vec::new(),
        }),
    }
}

/// Kalman-Bucy analysis integrated in pseudo-time from `s = 0` to `s = 1`.
///
/// Transform filters start from identity weights; state flows start from the
/// (inflated) background. Non-finite values abort the integration and are
/// reported with the pseudo-step where they appeared.
pub fn run_kbf_analysis(
    kind: FilterKind,
    ens_b: &EnsembleMatrix,
    obs: &ObservationBatch,
    scheme: &IntegrationScheme,
    mode: MeanUpdateMode,
    inflation: f64,
) -> Result<AnalysisResult> {
    let prep = prepare(ens_b, obs, inflation)?;
    let stiffness = prep.stiffness()?;
    let steps = scheme.schedule.len();
    let integrated = match kind {
        FilterKind::Etkbf => integrate_etkbf(&prep.problem, scheme, mode),
        FilterKind::Detkbf => integrate_detkbf(&prep.problem, scheme),
        FilterKind::Bgr09State | FilterKind::Br10State => {
            return Ok(run_state_flow(kind, &prep, obs, scheme, mode, stiffness));
        }
        FilterKind::Letkf | FilterKind::KfReference => {
            return Err(Error::Unsupported {
                kind: "filter kind",
                detail: format!("{kind} is not a pseudo-time filter"),
            })
        }
    };
    Ok(match integrated {
        Ok(t) => finish(
            apply_transform(&t, &prep.mean, &prep.pert),
            Some(&t),
            stiffness,
            steps,
            None,
        ),
        Err(f) => failed_result(
            &prep,
            stiffness,
            steps,
            "non-finite weights".into(),
            Some(f.pseudo_step),
        ),
    })
}

fn run_state_flow(
    kind: FilterKind,
    prep: &Prepared,
    obs: &ObservationBatch,
    scheme: &IntegrationScheme,
    mode: MeanUpdateMode,
    stiffness: StiffnessReport,
) -> AnalysisResult {
    let steps = scheme.schedule.len();
    let mean0 = StateVector::new(prep.mean.clone()).expect("finite background mean");
    let (mut ens, mut mean) = match kind {
        FilterKind::Bgr09State => (
            EnsembleMatrix::from_raw(prep.pert.clone(), Role::Perturbations),
            mean0.clone(),
        ),
        _ => {
            let mut full = prep.pert.clone();
            for mut col in full.column_iter_mut() {
                col += &prep.mean;
            }
            (EnsembleMatrix::from_raw(full, Role::Full), mean0.clone())
        }
    };
    for (idx, &ds) in scheme.schedule.increments().iter().enumerate() {
        match state_space_step(&ens, &mean, obs, ds, scheme.method, kind) {
            Ok((e, m)) => {
                ens = e;
                mean = m;
            }
            Err(e) => {
                return failed_result(prep, stiffness, steps, e.to_string(), Some(idx + 1));
            }
        }
    }
    let analysis = match kind {
        FilterKind::Bgr09State => {
            let x_a = ens.matrix();
            let mean_a = match mode {
                MeanUpdateMode::PerStep => mean.into_inner(),
                MeanUpdateMode::FinalGain => {
                    let p_a = x_a * x_a.transpose() / (x_a.ncols() - 1) as f64;
                    let k = kf::kalman_gain_from_analysis(&p_a, obs);
                    let h = obs.operator.to_dense();
                    &*mean0 - k * (&h * &*mean0 - &obs.y)
                }
            };
            let mut out = x_a.clone();
            for mut col in out.column_iter_mut() {
                col += &mean_a;
            }
            out
        }
        _ => ens.into_matrix(),
    };
    finish(analysis, None, stiffness, steps, None)
}

/// Dispatches a global (unlocalized) analysis for any ensemble filter kind.
pub fn global_analysis(
    kind: FilterKind,
    ens_b: &EnsembleMatrix,
    obs: &ObservationBatch,
    scheme: &IntegrationScheme,
    mode: MeanUpdateMode,
    inflation: f64,
) -> Result<AnalysisResult> {
    match kind {
        FilterKind::Letkf => letkf_analysis(ens_b, obs, inflation),
        _ => run_kbf_analysis(kind, ens_b, obs, scheme, mode, inflation),
    }
}
