//! Lorenz-63 and Lorenz-96 models with a fixed-step RK4 integrator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleMatrix, Role};
use crate::error::{check_dim, Error, Result};

/// Any component beyond this magnitude counts as model divergence.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    L63 { p: f64, r: f64, b: f64 },
    L96 { n: usize, forcing: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub dt: f64,
}

impl ModelSpec {
    /// Classic chaotic Lorenz-63 parameters with `dt = 0.01`.
    pub fn lorenz63() -> Self {
        Self {
            kind: ModelKind::L63 {
                p: 10.0,
                r: 28.0,
                b: 8.0 / 3.0,
            },
            dt: 0.01,
        }
    }

    /// 40-variable Lorenz-96 with `F = 8` and `dt = 0.025`.
    pub fn lorenz96() -> Self {
        Self {
            kind: ModelKind::L96 {
                n: 40,
                forcing: 8.0,
            },
            dt: 0.025,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "model dt must be positive, got {}",
                self.dt
            )));
        }
        if let ModelKind::L96 { n, .. } = self.kind {
            if n < 4 {
                return Err(Error::InvalidParameter(format!(
                    "Lorenz-96 needs at least 4 variables, got {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::L63 { .. } => 3,
            ModelKind::L96 { n, .. } => n,
        }
    }

    /// Right-hand side `dx/dt`.
    pub fn tendency(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("model state", self.state_dim(), x.len())?;
        let mut out = DVector::zeros(x.len());
        self.tendency_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn tendency_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::L63 { p, r, b } => {
                out[0] = p * (x[1] - x[0]);
                out[1] = x[0] * (r - x[2]) - x[1];
                out[2] = x[0] * x[1] - b * x[2];
            }
            ModelKind::L96 { n, forcing } => {
                for q in 0..n {
                    let xp1 = x[(q + 1) % n];
                    let xm1 = x[(q + n - 1) % n];
                    let xm2 = x[(q + n - 2) % n];
                    out[q] = (xp1 - xm2) * xm1 - x[q] + forcing;
                }
            }
        }
    }

    /// Applies `n_steps` classical RK4 steps of size `dt`.
    ///
    /// Reports [`Error::Blowup`] as soon as a component becomes non-finite or
    /// exceeds [`BLOWUP_THRESHOLD`].
    pub fn rk4_advance(&self, x: &DVector<f64>, n_steps: usize) -> Result<DVector<f64>> {
        check_dim("model state", self.state_dim(), x.len())?;
        let mut state = x.as_slice().to_vec();
        rk4_integrate(
            |x: &[f64], out: &mut [f64]| self.tendency_into(x, out),
            &mut state,
            self.dt,
            n_steps,
        )?;
        Ok(DVector::from_vec(state))
    }

    /// Advances every member of a full ensemble. The parallel path gives the
    /// same bits as the sequential one since members are independent.
    pub fn forecast_ensemble(
        &self,
        ens: &EnsembleMatrix,
        n_steps: usize,
        parallel: bool,
    ) -> Result<EnsembleMatrix> {
        if ens.role() != Role::Full {
            return Err(Error::Role("forecasts need the full ensemble"));
        }
        let members: Vec<DVector<f64>> = (0..ens.n_members()).map(|j| ens.member(j)).collect();
        let advanced: Result<Vec<DVector<f64>>> = if parallel {
            members
                .par_iter()
                .map(|x| self.rk4_advance(x, n_steps))
                .collect()
        } else {
            members
                .iter()
                .map(|x| self.rk4_advance(x, n_steps))
                .collect()
        };
        let advanced = advanced?;
        Ok(EnsembleMatrix::from_raw(
            DMatrix::from_columns(&advanced),
            Role::Full,
        ))
    }
}

/// Classical RK4 on an autonomous system `dx/dt = f(x)`, in place.
pub fn rk4_integrate<F>(f: F, state: &mut [f64], dt: f64, n_steps: usize) -> Result<()>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..n_steps {
        f(state, &mut k1);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * dt * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * dt * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = state[i] + dt * k3[i];
        }
        f(&tmp, &mut k4);
        for i in 0..n {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state
            .iter()
            .any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD)
        {
            return Err(Error::Blowup { step: step + 1 });
        }
    }
    Ok(())
}
