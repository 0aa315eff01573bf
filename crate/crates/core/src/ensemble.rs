//! Ensemble storage and the sample-statistics algebra shared by every filter.
//!
//! An ensemble is an `N x M` matrix whose columns are members. The same
//! storage carries either the full ensemble or its centered perturbations;
//! the [`Role`] flag makes mixing the two a checkable error.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Tolerance on the row sums of a perturbation ensemble, relative to the row
/// magnitude.
const CENTERING_TOL: f64 = 1e-10;
/// Tolerance on `W 1 = 1` for perturbation weights.
const WEIGHT_SUM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Full,
    Perturbations,
}

/// A single model state with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::NonFinite("state vector"))
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// `N x M` ensemble, members stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix {
    data: DMatrix<f64>,
    role: Role,
}

impl EnsembleMatrix {
    pub fn new(data: DMatrix<f64>, role: Role) -> Result<Self> {
        if data.nrows() < 1 {
            return Err(Error::InvalidParameter(
                "ensemble needs at least one state variable".into(),
            ));
        }
        if data.ncols() < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs at least two members, got {}",
                data.ncols()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ensemble"));
        }
        if role == Role::Perturbations {
            for row in data.row_iter() {
                let scale: f64 = row.iter().map(|v| v.abs()).sum();
                if row.sum().abs() > CENTERING_TOL * (scale + 1.0) {
                    return Err(Error::Role("perturbation rows must sum to zero"));
                }
            }
        }
        Ok(Self { data, role })
    }

    pub fn full(data: DMatrix<f64>) -> Result<Self> {
        Self::new(data, Role::Full)
    }

    pub fn perturbations(data: DMatrix<f64>) -> Result<Self> {
        Self::new(data, Role::Perturbations)
    }

    /// Stacks members as columns of a full ensemble.
    pub fn from_members(members: &[StateVector]) -> Result<Self> {
        let n = members.first().map_or(0, |m| m.len());
        for m in members {
            check_dim("ensemble member", n, m.len())?;
        }
        let data = DMatrix::from_fn(n, members.len(), |i, j| members[j][i]);
        Self::full(data)
    }

    /// Skips validation; callers guarantee the role invariant up to roundoff.
    pub(crate) fn from_raw(data: DMatrix<f64>, role: Role) -> Self {
        Self { data, role }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_state(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.data.column(j).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    /// `W`, acting on perturbations: `X^a = X^b W`.
    Perturbation,
    /// `W̄`, acting on the full ensemble: `X̄^a = X̄^b W̄`.
    Full,
}

/// `M x M` transform in ensemble space.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    data: DMatrix<f64>,
    role: WeightRole,
}

impl WeightMatrix {
    /// Validates squareness, finiteness and, for perturbation weights, that
    /// every row sums to one (`W 1 = 1`), which keeps `X W` centered.
    pub fn new(data: DMatrix<f64>, role: WeightRole) -> Result<Self> {
        check_dim("weight matrix columns", data.nrows(), data.ncols())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        if role == WeightRole::Perturbation {
            let m = data.ncols() as f64;
            for row in data.row_iter() {
                if (row.sum() - 1.0).abs() > WEIGHT_SUM_TOL * m {
                    return Err(Error::Role("perturbation weights must satisfy W 1 = 1"));
                }
            }
        }
        Ok(Self { data, role })
    }

    pub fn identity(m: usize, role: WeightRole) -> Self {
        Self {
            data: DMatrix::identity(m, m),
            role,
        }
    }

    pub(crate) fn from_raw(data: DMatrix<f64>, role: WeightRole) -> Self {
        Self { data, role }
    }

    pub fn role(&self) -> WeightRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Ensemble-space covariance `W Wᵀ / (M-1)`.
    pub fn ensemble_covariance(&self) -> DMatrix<f64> {
        let m = self.dim() as f64;
        &self.data * self.data.transpose() / (m - 1.0)
    }
}

/// The rank-one projector `U = 1 1ᵀ / M` and its complement `I - U`,
/// applied as row-mean operations instead of dense products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanProjector {
    m: usize,
}

impl MeanProjector {
    pub fn new(m: usize) -> Self {
        Self { m }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    /// `A U`: every entry of a row replaced by the row mean.
    pub fn apply_u(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(a.ncols(), self.m);
        let mut out = a.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.mean();
            row.fill(mean);
        }
        out
    }

    /// `A (I - U)`: subtract the row mean from every entry.
    pub fn center(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(a.ncols(), self.m);
        let mut out = a.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        out
    }

    /// `A (I + U)`.
    pub fn add_mean(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(a.ncols(), self.m);
        let mut out = a.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(mean);
        }
        out
    }

    /// Dense `U`, for tests and tiny ensembles only.
    pub fn dense_u(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.m, self.m, 1.0 / self.m as f64)
    }
}

/// Row averages and the centered perturbations of a full ensemble.
pub fn mean_and_perturbations(ens: &EnsembleMatrix) -> Result<(StateVector, EnsembleMatrix)> {
    if ens.role() != Role::Full {
        return Err(Error::Role("mean_and_perturbations expects a full ensemble"));
    }
    if !ens.is_finite() {
        return Err(Error::NonFinite("ensemble"));
    }
    let mean = ens.data.column_mean();
    let pert = MeanProjector::new(ens.n_members()).center(&ens.data);
    Ok((
        StateVector(mean),
        EnsembleMatrix::from_raw(pert, Role::Perturbations),
    ))
}

/// Rebuilds a full ensemble from a mean and perturbations: `x̄ 1ᵀ + X`.
pub fn recombine(mean: &DVector<f64>, pert: &EnsembleMatrix) -> Result<EnsembleMatrix> {
    if pert.role() != Role::Perturbations {
        return Err(Error::Role("recombine expects perturbations"));
    }
    check_dim("recombine mean", pert.n_state(), mean.len())?;
    let mut data = pert.data.clone();
    for mut col in data.column_iter_mut() {
        col += mean;
    }
    Ok(EnsembleMatrix::from_raw(data, Role::Full))
}

/// `P = X Xᵀ / (M-1)`, symmetrized.
pub fn sample_covariance(pert: &EnsembleMatrix) -> Result<DMatrix<f64>> {
    if pert.role() != Role::Perturbations {
        return Err(Error::Role("sample_covariance expects perturbations"));
    }
    let m = pert.n_members() as f64;
    let p = &pert.data * pert.data.transpose() / (m - 1.0);
    Ok(symmetrize(&p))
}

/// `ens · w`, with the role rules: perturbation weights act on
/// perturbations, full weights on full ensembles.
pub fn apply_weight_transform(ens: &EnsembleMatrix, w: &WeightMatrix) -> Result<EnsembleMatrix> {
    check_dim("weight transform", ens.n_members(), w.dim())?;
    let role = match (ens.role(), w.role()) {
        (Role::Perturbations, WeightRole::Perturbation) => Role::Perturbations,
        (Role::Full, WeightRole::Full) => Role::Full,
        (Role::Full, WeightRole::Perturbation) => {
            return Err(Error::Role("perturbation weights applied to a full ensemble"))
        }
        (Role::Perturbations, WeightRole::Full) => {
            return Err(Error::Role("full-ensemble weights applied to perturbations"))
        }
    };
    Ok(EnsembleMatrix::from_raw(&ens.data * &w.data, role))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrizes and clips roundoff-level negative eigenvalues.
///
/// Eigenvalues in `[-1e-12 * trace, 0)` are set to zero; anything more
/// negative is reported as [`Error::NotPsd`].
pub fn clip_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(a);
    let trace = sym.trace().abs();
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < -1e-12 * trace.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose())))
}
