//! Pseudo-time machinery for the analysis flows: step schedules, the
//! stiffness ratio, the closed-form Riccati solution, and the diagonally
//! semi-implicit (DSI) kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ensemble::symmetrize;
use crate::error::{check_dim, Error, Result};
use crate::obs::{ObsErrorModel, ObsOperator};

const SCHEDULE_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    Doubling,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Doubling => "doubling",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "doubling" => Ok(Self::Doubling),
            _ => Err(Error::InvalidParameter(format!("unknown schedule `{s}`"))),
        }
    }
}

/// Positive pseudo-time increments summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    increments: Vec<f64>,
}

impl StepSchedule {
    pub fn new(increments: Vec<f64>) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::InvalidParameter("empty step schedule".into()));
        }
        if increments.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter(
                "step increments must be positive".into(),
            ));
        }
        let sum: f64 = increments.iter().sum();
        if (sum - 1.0).abs() > SCHEDULE_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "step increments sum to {sum}, not 1"
            )));
        }
        Ok(Self { increments })
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }
}

/// Builds a uniform or doubling schedule with `n` steps.
///
/// Doubling: the last three steps are 1/4, each earlier step halves its
/// successor, and the first step repeats the second, e.g.
/// `doubling(6) = {1/16, 1/16, 1/8, 1/4, 1/4, 1/4}`.
pub fn build_schedule(kind: ScheduleKind, n: usize) -> Result<StepSchedule> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "a schedule needs at least one step".into(),
        ));
    }
    match kind {
        ScheduleKind::Uniform => StepSchedule::new(vec![1.0 / n as f64; n]),
        ScheduleKind::Doubling => {
            if n < 4 {
                return Err(Error::InvalidParameter(format!(
                    "doubling schedule needs at least 4 steps, got {n}"
                )));
            }
            let mut a = vec![0.25; n];
            for i in (1..n - 3).rev() {
                a[i] = a[i + 1] / 2.0;
            }
            a[0] = a[1];
            StepSchedule::new(a)
        }
    }
}

/// Stiffness ratio of one analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessReport {
    pub beta: f64,
}

/// `β = ‖Y^bᵀ R⁻¹ Y^b‖₂ / (M-1)`, the largest eigenvalue of the `M x M`
/// Gram matrix.
pub fn beta_ratio(y_pert: &DMatrix<f64>, r: &ObsErrorModel) -> Result<StiffnessReport> {
    check_dim("beta: observation rows", r.len(), y_pert.nrows())?;
    let m = y_pert.ncols();
    if m < 2 {
        return Err(Error::InvalidParameter("beta needs at least two members".into()));
    }
    if y_pert.nrows() == 0 {
        return Ok(StiffnessReport { beta: 0.0 });
    }
    let gram = weighted_gram(y_pert, &r.inverse());
    let eig = SymmetricEigen::new(gram);
    let beta = eig.eigenvalues.max().max(0.0) / (m - 1) as f64;
    Ok(StiffnessReport { beta })
}

/// `Aᵀ diag(w) A`, symmetrized.
pub(crate) fn weighted_gram(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    symmetrize(&(a.transpose() * scaled))
}

/// Closed-form solution of `dP/ds = -P Hᵀ R⁻¹ H P`:
/// `P(s) = P^b (Hᵀ R⁻¹ H P^b s + I)⁻¹`.
pub fn riccati_exact(
    p_b: &DMatrix<f64>,
    h: &ObsOperator,
    r: &ObsErrorModel,
    s: f64,
) -> Result<DMatrix<f64>> {
    let n = p_b.nrows();
    check_dim("riccati: covariance columns", n, p_b.ncols())?;
    check_dim("riccati: operator state size", n, h.n_state())?;
    check_dim("riccati: error model", h.n_obs(), r.len())?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParameter(format!(
            "pseudo-time must lie in [0, 1], got {s}"
        )));
    }
    let hd = h.to_dense();
    let mut rinv_h = hd.clone();
    for (mut row, w) in rinv_h.row_iter_mut().zip(r.inverse().iter()) {
        row *= *w;
    }
    let g = hd.transpose() * rinv_h;
    let a = &g * p_b * s + DMatrix::identity(n, n);
    // P A⁻¹ = (A⁻ᵀ P)ᵀ for symmetric P.
    let lu = a.transpose().lu();
    let x = lu
        .solve(p_b)
        .ok_or(Error::Singular("riccati system matrix"))?;
    Ok(symmetrize(&x.transpose()))
}

/// DSI kernel for diagonal `R`: entrywise `1 / (ds D_i + r_i)`.
pub fn dsi_effective_inverse(diag: &DVector<f64>, r: &ObsErrorModel, ds: f64) -> Result<DVector<f64>> {
    check_dim("dsi kernel", r.len(), diag.len())?;
    if !(ds > 0.0) {
        return Err(Error::InvalidParameter(format!("ds must be positive, got {ds}")));
    }
    Ok(dsi_kernel(diag, r.variances(), ds))
}

pub(crate) fn dsi_kernel(diag: &DVector<f64>, variances: &DVector<f64>, ds: f64) -> DVector<f64> {
    diag.zip_map(variances, |d, v| 1.0 / (ds * d + v))
}

/// DSI kernel for a dense `R`: `(diag(H P Hᵀ R⁻¹ ds + I))⁻¹ R⁻¹`.
pub fn dsi_effective_inverse_dense(
    hph: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ds: f64,
) -> Result<DMatrix<f64>> {
    let l = r.nrows();
    check_dim("dense dsi: R columns", l, r.ncols())?;
    check_dim("dense dsi: HPHᵀ rows", l, hph.nrows())?;
    check_dim("dense dsi: HPHᵀ columns", l, hph.ncols())?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("observation error covariance"))?;
    let m = hph * &r_inv * ds;
    let mut out = r_inv;
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row /= m[(i, i)] + 1.0;
    }
    Ok(out)
}
