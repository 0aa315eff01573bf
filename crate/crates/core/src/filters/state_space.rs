//! State-space Kalman-Bucy ensemble flows.
//!
//! These work with explicit `N x N` covariances and a dense `H`, so they
//! serve as an independent reference for the ensemble-space kernels.

use nalgebra::{DMatrix, DVector};

use super::{FilterKind, Integration};
use crate::ensemble::{EnsembleMatrix, MeanProjector, Role, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::obs::ObservationBatch;

struct Dense {
    h: DMatrix<f64>,
    variances: DVector<f64>,
}

impl Dense {
    fn new(obs: &ObservationBatch, n: usize) -> Result<Self> {
        check_dim("state-space step: operator", n, obs.operator.n_state())?;
        Ok(Self {
            h: obs.operator.to_dense(),
            variances: obs.errors.variances().clone(),
        })
    }

    /// `K⁻¹` entries: `R⁻¹` or `(ds diag(H P Hᵀ) + R)⁻¹`.
    fn kernel(&self, p: &DMatrix<f64>, ds: f64, method: Integration) -> DVector<f64> {
        match method {
            Integration::EulerForward => self.variances.map(|v| 1.0 / v),
            Integration::Dsi => {
                let hph = &self.h * p * self.h.transpose();
                hph.diagonal()
                    .zip_map(&self.variances, |d, v| 1.0 / (ds * d + v))
            }
        }
    }

    /// `P Hᵀ diag(k)`.
    fn gain(&self, p: &DMatrix<f64>, k: &DVector<f64>) -> DMatrix<f64> {
        p * self.h.transpose() * DMatrix::from_diagonal(k)
    }
}

fn covariance_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    x * x.transpose() / (x.ncols() - 1) as f64
}

/// One Euler-forward or DSI step of a state-space flow.
///
/// * `Bgr09State`: `ens` holds perturbations `X`; `X ← X - (ds/2) P Hᵀ K⁻¹ H X`
///   and the mean follows `x̄ ← x̄ - ds P Hᵀ K⁻¹ (H x̄ - y)`.
/// * `Br10State`: `ens` holds the full ensemble;
///   `X̄ ← X̄ - (ds/2) P Hᵀ K⁻¹ [H X̄ (I + U) - 2 y 1ᵀ]` with the centered
///   sample covariance, and the returned mean is the new column mean.
pub fn state_space_step(
    ens: &EnsembleMatrix,
    mean: &StateVector,
    obs: &ObservationBatch,
    ds: f64,
    method: Integration,
    kind: FilterKind,
) -> Result<(EnsembleMatrix, StateVector)> {
    let n = ens.n_state();
    check_dim("state-space step: mean", n, mean.len())?;
    let dense = Dense::new(obs, n)?;
    let x = ens.matrix();
    let (next, next_mean, role) = match kind {
        FilterKind::Bgr09State => {
            if ens.role() != Role::Perturbations {
                return Err(Error::Role("BGR09 state flow integrates perturbations"));
            }
            let p = covariance_of(x);
            let k = dense.kernel(&p, ds, method);
            let gain = dense.gain(&p, &k);
            let next = x - &gain * (&dense.h * x) * (0.5 * ds);
            let innovation = &dense.h * &**mean - &obs.y;
            let next_mean = &**mean - gain * innovation * ds;
            (next, next_mean, Role::Perturbations)
        }
        FilterKind::Br10State => {
            if ens.role() != Role::Full {
                return Err(Error::Role("BR10 state flow integrates the full ensemble"));
            }
            let proj = MeanProjector::new(ens.n_members());
            let p = covariance_of(&proj.center(x));
            let k = dense.kernel(&p, ds, method);
            let gain = dense.gain(&p, &k);
            let mut bracket = proj.add_mean(&(&dense.h * x));
            for mut col in bracket.column_iter_mut() {
                col.axpy(-2.0, &obs.y, 1.0);
            }
            let next = x - gain * bracket * (0.5 * ds);
            let next_mean = next.column_mean();
            (next, next_mean, Role::Full)
        }
        other => {
            return Err(Error::Unsupported {
                kind: "filter kind",
                detail: format!("{other:?} has no state-space flow"),
            })
        }
    };
    if !next.iter().chain(next_mean.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("state-space step"));
    }
    Ok((
        EnsembleMatrix::from_raw(next, role),
        StateVector::new(next_mean)?,
    ))
}

/// `dX/ds = -1/(2(M-1)) X Xᵀ Hᵀ R⁻¹ H X`.
pub fn perturbation_rhs(x: &DMatrix<f64>, obs: &ObservationBatch) -> DMatrix<f64> {
    let h = obs.operator.to_dense();
    let r_inv = DMatrix::from_diagonal(&obs.errors.inverse());
    let m = x.ncols() as f64;
    -(x * x.transpose() * h.transpose() * r_inv * &h * x) / (2.0 * (m - 1.0))
}

/// `dx̄/ds = -1/(M-1) X Xᵀ Hᵀ R⁻¹ (H x̄ - y)`.
pub fn mean_rhs(x: &DMatrix<f64>, mean: &DVector<f64>, obs: &ObservationBatch) -> DVector<f64> {
    let h = obs.operator.to_dense();
    let r_inv = DMatrix::from_diagonal(&obs.errors.inverse());
    let m = x.ncols() as f64;
    -(x * x.transpose() * h.transpose() * r_inv * (&h * mean - &obs.y)) / (m - 1.0)
}

/// Full-ensemble right-hand side in centered form,
/// `-1/(M-1) X̄ (I-U) X̄ᵀ Hᵀ R⁻¹ [½ H X̄ (I+U) - y 1ᵀ]`.
pub fn full_rhs(x_full: &DMatrix<f64>, obs: &ObservationBatch) -> DMatrix<f64> {
    let h = obs.operator.to_dense();
    let r_inv = DMatrix::from_diagonal(&obs.errors.inverse());
    let m = x_full.ncols();
    let proj = MeanProjector::new(m);
    let centered = proj.center(x_full);
    let mut bracket = proj.add_mean(&(&h * x_full)) * 0.5;
    for mut col in bracket.column_iter_mut() {
        col -= &obs.y;
    }
    -(centered * x_full.transpose() * h.transpose() * r_inv * bracket) / (m - 1) as f64
}
