//! Direct Kalman-filter analysis, used as the reference the ensemble filters
//! are checked against.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{clip_psd, symmetrize, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::obs::ObservationBatch;

/// `K = P^b Hᵀ (H P^b Hᵀ + R)⁻¹`.
pub fn kalman_gain(p_b: &DMatrix<f64>, obs: &ObservationBatch) -> Result<DMatrix<f64>> {
    let h = obs.operator.to_dense();
    check_dim("kalman gain: covariance", h.ncols(), p_b.nrows())?;
    let mut s = &h * p_b * h.transpose();
    for (i, v) in obs.errors.variances().iter().enumerate() {
        s[(i, i)] += v;
    }
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or(Error::Singular("innovation covariance"))?;
    // K = (S⁻¹ H P^b)ᵀ since S and P^b are symmetric.
    Ok(chol.solve(&(&h * p_b)).transpose())
}

/// `K = P^a Hᵀ R⁻¹`.
pub fn kalman_gain_from_analysis(p_a: &DMatrix<f64>, obs: &ObservationBatch) -> DMatrix<f64> {
    let h = obs.operator.to_dense();
    p_a * h.transpose() * DMatrix::from_diagonal(&obs.errors.inverse())
}

/// Information form `((P^b)⁻¹ + Hᵀ R⁻¹ H)⁻¹`; needs an invertible `P^b`.
pub fn information_form_covariance(
    p_b: &DMatrix<f64>,
    obs: &ObservationBatch,
) -> Result<DMatrix<f64>> {
    let h = obs.operator.to_dense();
    let p_inv = p_b
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("background covariance"))?;
    let info = p_inv + h.transpose() * DMatrix::from_diagonal(&obs.errors.inverse()) * &h;
    info.try_inverse()
        .map(|p| symmetrize(&p))
        .ok_or(Error::Singular("information matrix"))
}

/// Analysis mean and covariance: `P^a = (I - K H) P^b`,
/// `x̄^a = x̄^b - K (H x̄^b - y)`.
pub fn kf_reference_analysis(
    x_b: &StateVector,
    p_b: &DMatrix<f64>,
    obs: &ObservationBatch,
) -> Result<(StateVector, DMatrix<f64>)> {
    let n = x_b.len();
    check_dim("kf reference: covariance rows", n, p_b.nrows())?;
    check_dim("kf reference: covariance columns", n, p_b.ncols())?;
    let p_b = clip_psd(p_b)?;
    let k = kalman_gain(&p_b, obs)?;
    let h = obs.operator.to_dense();
    let p_a = (DMatrix::identity(n, n) - &k * &h) * &p_b;
    let innovation: DVector<f64> = &h * &**x_b - &obs.y;
    let x_a = &**x_b - k * innovation;
    Ok((StateVector::new(x_a)?, symmetrize(&p_a)))
}
