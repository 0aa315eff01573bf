//! Ensemble-space kernels: LETKF weights and the ETKBF / DETKBF weight flows.
//!
//! Every kernel works on the observation-space view of an ensemble only, so
//! the same code serves the global analysis and each local (per-gridpoint)
//! analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{Integration, IntegrationScheme, MeanUpdateMode};
use crate::ensemble::{MeanProjector, WeightMatrix, WeightRole};
use crate::error::{check_dim, Error, Result};
use crate::obs::ObsErrorModel;
use crate::pseudo_time::{dsi_kernel, weighted_gram};

/// Observation-space view of one (possibly local) analysis problem.
#[derive(Debug, Clone)]
pub struct EnsembleSpaceProblem {
    /// `Y^b = H X^b`, already inflated, `L x M`.
    pub y_pert: DMatrix<f64>,
    /// `H x̄^b`.
    pub y_mean: DVector<f64>,
    /// Observed values `y`.
    pub y_obs: DVector<f64>,
    /// Diagonal of `R` (possibly tapered by localization).
    pub variances: DVector<f64>,
}

impl EnsembleSpaceProblem {
    pub fn new(
        y_pert: DMatrix<f64>,
        y_mean: DVector<f64>,
        y_obs: DVector<f64>,
        variances: DVector<f64>,
    ) -> Result<Self> {
        let l = y_pert.nrows();
        check_dim("ensemble-space mean", l, y_mean.len())?;
        check_dim("ensemble-space observations", l, y_obs.len())?;
        check_dim("ensemble-space variances", l, variances.len())?;
        if y_pert.ncols() < 2 {
            return Err(Error::InvalidParameter(
                "ensemble-space analysis needs at least two members".into(),
            ));
        }
        Ok(Self {
            y_pert,
            y_mean,
            y_obs,
            variances,
        })
    }

    pub fn n_members(&self) -> usize {
        self.y_pert.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.y_pert.nrows()
    }

    /// `H x̄^b - y`.
    pub fn innovation_base(&self) -> DVector<f64> {
        &self.y_mean - &self.y_obs
    }

    /// `Ȳ^b = H x̄^b 1ᵀ + Y^b`.
    pub fn y_full(&self) -> DMatrix<f64> {
        let mut out = self.y_pert.clone();
        for mut col in out.column_iter_mut() {
            col += &self.y_mean;
        }
        out
    }

    pub(crate) fn error_model(&self) -> Result<ObsErrorModel> {
        ObsErrorModel::new(self.variances.clone())
    }
}

/// Result of an ensemble-space analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// `x̄^a = x̄^b + X^b w̄`, `X^a = X^b W`.
    Perturbation {
        weights: DMatrix<f64>,
        mean_weights: DVector<f64>,
    },
    /// `X̄^a = X̄^b W̄`.
    Full { weights: DMatrix<f64> },
}

impl Transform {
    pub fn identity(m: usize) -> Self {
        Self::Perturbation {
            weights: DMatrix::identity(m, m),
            mean_weights: DVector::zeros(m),
        }
    }

    /// Analysis members for one state row, given its background mean and
    /// (inflated) perturbation row.
    pub fn analysis_row(&self, mean: f64, pert_row: &[f64]) -> Vec<f64> {
        let m = pert_row.len();
        match self {
            Self::Perturbation {
                weights,
                mean_weights,
            } => {
                let shift: f64 = pert_row
                    .iter()
                    .zip(mean_weights.iter())
                    .map(|(x, w)| x * w)
                    .sum();
                (0..m)
                    .map(|j| {
                        let spread: f64 = (0..m).map(|i| pert_row[i] * weights[(i, j)]).sum();
                        mean + shift + spread
                    })
                    .collect()
            }
            Self::Full { weights } => (0..m)
                .map(|j| {
                    (0..m)
                        .map(|i| (mean + pert_row[i]) * weights[(i, j)])
                        .sum()
                })
                .collect(),
        }
    }

    pub fn weight_matrix(&self) -> WeightMatrix {
        match self {
            Self::Perturbation { weights, .. } => {
                WeightMatrix::from_raw(weights.clone(), WeightRole::Perturbation)
            }
            Self::Full { weights } => WeightMatrix::from_raw(weights.clone(), WeightRole::Full),
        }
    }

    pub fn mean_weights(&self) -> Option<&DVector<f64>> {
        match self {
            Self::Perturbation { mean_weights, .. } => Some(mean_weights),
            Self::Full { .. } => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Self::Perturbation {
                weights,
                mean_weights,
            } => weights.iter().chain(mean_weights.iter()).all(|v| v.is_finite()),
            Self::Full { weights } => weights.iter().all(|v| v.is_finite()),
        }
    }
}

/// A pseudo-time integration that produced non-finite weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    /// 1-based pseudo-step at which non-finite values first appeared.
    pub pseudo_step: usize,
}

/// LETKF ensemble-space analysis.
///
/// Returns the transform together with `P̃^a = (Y^bᵀ R⁻¹ Y^b + (M-1) I)⁻¹`.
pub fn letkf_transform(prob: &EnsembleSpaceProblem) -> Result<(Transform, DMatrix<f64>)> {
    let m = prob.n_members();
    let mf = (m - 1) as f64;
    let r_inv = prob.variances.map(|v| 1.0 / v);
    let mut a = weighted_gram(&prob.y_pert, &r_inv);
    for i in 0..m {
        a[(i, i)] += mf;
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("LETKF ensemble-space matrix"));
    }
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 0)
        .ok_or(Error::Singular("LETKF eigendecomposition"))?;
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Singular("LETKF ensemble-space matrix"));
    }
    let q = &eig.eigenvectors;
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    let root = eig.eigenvalues.map(|l| (mf / l).sqrt());
    let p_tilde = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let weights = q * DMatrix::from_diagonal(&root) * q.transpose();
    let innovation = &prob.y_obs - &prob.y_mean;
    let mean_weights = &p_tilde * (prob.y_pert.transpose() * innovation.component_mul(&r_inv));
    Ok((
        Transform::Perturbation {
            weights,
            mean_weights,
        },
        p_tilde,
    ))
}

fn obs_kernel(
    z_centered: &DMatrix<f64>,
    variances: &DVector<f64>,
    ds: f64,
    method: Integration,
) -> DVector<f64> {
    match method {
        Integration::EulerForward => variances.map(|v| 1.0 / v),
        Integration::Dsi => {
            let mf = (z_centered.ncols() - 1) as f64;
            let diag = DVector::from_iterator(
                z_centered.nrows(),
                z_centered.row_iter().map(|row| row.norm_squared() / mf),
            );
            dsi_kernel(&diag, variances, ds)
        }
    }
}

fn scale_rows(a: &DMatrix<f64>, k: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (mut row, ki) in out.row_iter_mut().zip(k.iter()) {
        row *= *ki;
    }
    out
}

/// One Euler-forward or DSI step of the ETKBF weight flow
/// `dW/ds = -½ P̃ Y^bᵀ R⁻¹ Y^b W` with `P̃ = W Wᵀ / (M-1)`.
///
/// With [`MeanUpdateMode::PerStep`] the mean weights advance by the
/// ensemble-space form of the DSI mean update
/// `w̄ ← w̄ - ds P̃ Y^bᵀ K⁻¹ (H x̄^b - y + Y^b w̄)`; otherwise they are
/// returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn etkbf_step(
    w: &WeightMatrix,
    w_mean: &DVector<f64>,
    y_b: &DMatrix<f64>,
    innovation_base: &DVector<f64>,
    r: &ObsErrorModel,
    ds: f64,
    method: Integration,
    mode: MeanUpdateMode,
) -> Result<(WeightMatrix, DVector<f64>)> {
    let m = w.dim();
    check_dim("etkbf: ensemble size", m, y_b.ncols())?;
    check_dim("etkbf: mean weights", m, w_mean.len())?;
    check_dim("etkbf: observations", y_b.nrows(), r.len())?;
    check_dim("etkbf: innovation", y_b.nrows(), innovation_base.len())?;
    let (wn, wm) = etkbf_raw_step(
        w.matrix(),
        w_mean,
        y_b,
        innovation_base,
        r.variances(),
        ds,
        method,
        mode,
    );
    if !wn.iter().chain(wm.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("ETKBF weights"));
    }
    Ok((WeightMatrix::from_raw(wn, WeightRole::Perturbation), wm))
}

#[allow(clippy::too_many_arguments)]
fn etkbf_raw_step(
    w: &DMatrix<f64>,
    w_mean: &DVector<f64>,
    y_b: &DMatrix<f64>,
    innovation_base: &DVector<f64>,
    variances: &DVector<f64>,
    ds: f64,
    method: Integration,
    mode: MeanUpdateMode,
) -> (DMatrix<f64>, DVector<f64>) {
    let mf = (w.ncols() - 1) as f64;
    // Z = Y^b W is the observation-space image of the current perturbations;
    // it is centered because W 1 = 1 and Y^b 1 = 0.
    let z = y_b * w;
    let k = obs_kernel(&z, variances, ds, method);
    let kz = scale_rows(&z, &k);
    let gram = z.transpose() * &kz;
    let w_next = w - w * gram * (0.5 * ds / mf);
    let mean_next = match mode {
        MeanUpdateMode::PerStep => {
            let v = innovation_base + y_b * w_mean;
            w_mean - w * (z.transpose() * v.component_mul(&k)) * (ds / mf)
        }
        MeanUpdateMode::FinalGain => w_mean.clone(),
    };
    (w_next, mean_next)
}

/// One Euler-forward or DSI step of the DETKBF weight flow
/// `dW̄/ds = -½ P̃ Ȳ^bᵀ K⁻¹ [Ȳ^b W̄ (I + U) - 2 y 1ᵀ]` with the centered
/// `P̃ = W̄ (I - U) W̄ᵀ / (M-1)`.
pub fn detkbf_step(
    w_full: &WeightMatrix,
    y_full: &DMatrix<f64>,
    y_obs: &DVector<f64>,
    r: &ObsErrorModel,
    ds: f64,
    method: Integration,
) -> Result<WeightMatrix> {
    let m = w_full.dim();
    check_dim("detkbf: ensemble size", m, y_full.ncols())?;
    check_dim("detkbf: observations", y_full.nrows(), y_obs.len())?;
    check_dim("detkbf: error model", y_full.nrows(), r.len())?;
    let wn = detkbf_raw_step(w_full.matrix(), y_full, y_obs, r.variances(), ds, method);
    if !wn.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("DETKBF weights"));
    }
    Ok(WeightMatrix::from_raw(wn, WeightRole::Full))
}

fn detkbf_raw_step(
    w: &DMatrix<f64>,
    y_full: &DMatrix<f64>,
    y_obs: &DVector<f64>,
    variances: &DVector<f64>,
    ds: f64,
    method: Integration,
) -> DMatrix<f64> {
    let m = w.ncols();
    let mf = (m - 1) as f64;
    let proj = MeanProjector::new(m);
    let z = y_full * w;
    let zc = proj.center(&z);
    let k = obs_kernel(&zc, variances, ds, method);
    let mut bracket = proj.add_mean(&z);
    for mut col in bracket.column_iter_mut() {
        col.axpy(-2.0, y_obs, 1.0);
    }
    let rhs = zc.transpose() * scale_rows(&bracket, &k);
    w - w * rhs * (0.5 * ds / mf)
}

/// Integrates the ETKBF flow from `W(0) = I`, `w̄(0) = 0` over the schedule.
pub fn integrate_etkbf(
    prob: &EnsembleSpaceProblem,
    scheme: &IntegrationScheme,
    mode: MeanUpdateMode,
) -> std::result::Result<Transform, StepFailure> {
    let m = prob.n_members();
    let innovation = prob.innovation_base();
    let mut w = DMatrix::identity(m, m);
    let mut w_mean = DVector::zeros(m);
    for (idx, &ds) in scheme.schedule.increments().iter().enumerate() {
        let (wn, wm) = etkbf_raw_step(
            &w,
            &w_mean,
            &prob.y_pert,
            &innovation,
            &prob.variances,
            ds,
            scheme.method,
            mode,
        );
        w = wn;
        w_mean = wm;
        if !w.iter().chain(w_mean.iter()).all(|v| v.is_finite()) {
            return Err(StepFailure {
                pseudo_step: idx + 1,
            });
        }
    }
    if mode == MeanUpdateMode::FinalGain {
        // x̄^a = x̄^b - K (H x̄^b - y) with K = P^a Hᵀ R⁻¹ and P^a = X^b P̃(1) X^bᵀ.
        let p_tilde = &w * w.transpose() / (m - 1) as f64;
        let r_inv = prob.variances.map(|v| 1.0 / v);
        w_mean = -(p_tilde * (prob.y_pert.transpose() * innovation.component_mul(&r_inv)));
    }
    let out = Transform::Perturbation {
        weights: w,
        mean_weights: w_mean,
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(StepFailure {
            pseudo_step: scheme.schedule.len(),
        })
    }
}

/// Integrates the DETKBF flow from `W̄(0) = I` over the schedule.
pub fn integrate_detkbf(
    prob: &EnsembleSpaceProblem,
    scheme: &IntegrationScheme,
) -> std::result::Result<Transform, StepFailure> {
    let m = prob.n_members();
    let y_full = prob.y_full();
    let mut w = DMatrix::identity(m, m);
    for (idx, &ds) in scheme.schedule.increments().iter().enumerate() {
        w = detkbf_raw_step(&w, &y_full, &prob.y_obs, &prob.variances, ds, scheme.method);
        if !w.iter().all(|v| v.is_finite()) {
            return Err(StepFailure {
                pseudo_step: idx + 1,
            });
        }
    }
    Ok(Transform::Full { weights: w })
}
