//! Randomized checks of the pseudo-time integrators against closed forms:
//! the ensemble-space analysis covariance and the Riccati solution.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::MeanProjector;
use crate::error::Result;
use crate::filters::{integrate_etkbf, EnsembleSpaceProblem, Integration, IntegrationScheme, MeanUpdateMode, Transform};
use crate::obs::{ObsErrorModel, ObsOperator};
use crate::pseudo_time::{build_schedule, riccati_exact, ScheduleKind};

/// Random linear-Gaussian analysis problem with centered perturbations.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    /// `N x M`, rows sum to zero.
    pub x_pert: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub variances: DVector<f64>,
}

impl RandomInstance {
    /// `N ∈ [1, max_n]`, `M ∈ [2, max_m]`, `L ∈ [1, max_l]`; standard normal
    /// perturbations and operator entries, error variances in `[0.5, 2)`.
    pub fn draw(rng: &mut impl Rng, max_n: usize, max_m: usize, max_l: usize) -> Self {
        let n = rng.random_range(1..=max_n);
        let m = rng.random_range(2..=max_m);
        let l = rng.random_range(1..=max_l);
        let mut normal = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let x = normal(n, m);
        let h = normal(l, n);
        let variances = DVector::from_fn(l, |_, _| rng.random_range(0.5..2.0));
        Self {
            x_pert: MeanProjector::new(m).center(&x),
            h,
            variances,
        }
    }

    pub fn n_members(&self) -> usize {
        self.x_pert.ncols()
    }

    pub fn y_pert(&self) -> DMatrix<f64> {
        &self.h * &self.x_pert
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.x_pert * self.x_pert.transpose() / (self.n_members() - 1) as f64
    }

    pub fn operator(&self) -> ObsOperator {
        ObsOperator::Dense(self.h.clone())
    }

    pub fn error_model(&self) -> Result<ObsErrorModel> {
        ObsErrorModel::new(self.variances.clone())
    }
}

/// `(Yᵀ R⁻¹ Y + (M-1) I)⁻¹`, by plain matrix inversion.
pub fn ensemble_space_covariance(y: &DMatrix<f64>, variances: &DVector<f64>) -> DMatrix<f64> {
    let m = y.ncols();
    let r_inv = DMatrix::from_diagonal(&variances.map(|v| 1.0 / v));
    let a = y.transpose() * r_inv * y + DMatrix::identity(m, m) * (m - 1) as f64;
    a.try_inverse().expect("shifted Gram matrix is positive definite")
}

/// Relative Frobenius distance `‖a - b‖ / ‖b‖`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// `W(1) W(1)ᵀ / (M-1)` from an ETKBF integration of one instance.
pub fn etkbf_covariance(inst: &RandomInstance, scheme: &IntegrationScheme) -> Option<DMatrix<f64>> {
    let m = inst.n_members();
    let l = inst.h.nrows();
    let problem = EnsembleSpaceProblem::new(
        inst.y_pert(),
        DVector::zeros(l),
        DVector::zeros(l),
        inst.variances.clone(),
    )
    .ok()?;
    match integrate_etkbf(&problem, scheme, MeanUpdateMode::PerStep).ok()? {
        Transform::Perturbation { weights, .. } => {
            Some(&weights * weights.transpose() / (m - 1) as f64)
        }
        Transform::Full { .. } => None,
    }
}

/// Integrates `dX/ds = -½ P Hᵀ R⁻¹ H X`, `P = X Xᵀ/(M-1)`, with classical RK4.
pub fn integrate_perturbation_flow_rk4(
    inst: &RandomInstance,
    s_end: f64,
    n_steps: usize,
) -> DMatrix<f64> {
    let m1 = (inst.n_members() - 1) as f64;
    let g = inst.h.transpose() * DMatrix::from_diagonal(&inst.variances.map(|v| 1.0 / v)) * &inst.h;
    let f = |x: &DMatrix<f64>| -> DMatrix<f64> { -(x * x.transpose() * &g * x) / (2.0 * m1) };
    let ds = s_end / n_steps as f64;
    let mut x = inst.x_pert.clone();
    for _ in 0..n_steps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (ds / 2.0)));
        let k3 = f(&(&x + &k2 * (ds / 2.0)));
        let k4 = f(&(&x + &k3 * ds));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ds / 6.0);
    }
    x
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSuite {
    pub name: &'static str,
    pub tolerance: f64,
    pub passed: usize,
    pub failed: usize,
    /// Largest relative error seen.
    pub worst: f64,
}

impl OracleSuite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            passed: 0,
            failed: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        // NaN counts as a failure and poisons `worst`.
        if err <= self.tolerance {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        self.worst = if err.is_nan() { f64::NAN } else { self.worst.max(err) };
    }

    pub fn all_passed(&self) -> bool {
        self.failed == 0 && self.passed > 0
    }
}

/// ETKBF with `steps` uniform DSI steps against the closed-form ensemble-space
/// analysis covariance.
pub fn ensemble_covariance_suite(seed: u64, instances: usize, steps: usize, tolerance: f64) -> Result<OracleSuite> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scheme = IntegrationScheme {
        method: Integration::Dsi,
        schedule: build_schedule(ScheduleKind::Uniform, steps)?,
    };
    let mut suite = OracleSuite::new("ensemble-space covariance", tolerance);
    for _ in 0..instances {
        let inst = RandomInstance::draw(&mut rng, 10, 8, 10);
        let exact = ensemble_space_covariance(&inst.y_pert(), &inst.variances);
        let err = etkbf_covariance(&inst, &scheme)
            .map(|p| rel_frobenius(&p, &exact))
            .unwrap_or(f64::NAN);
        suite.record(err);
    }
    Ok(suite)
}

/// RK4 integration of the perturbation flow against the closed-form Riccati
/// solution at `s ∈ {0.25, 0.5, 1}`, plus the scalar `β = 1` midpoint case.
pub fn riccati_suite(seed: u64, instances: usize, tolerance: f64) -> Result<OracleSuite> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut suite = OracleSuite::new("riccati", tolerance);
    for _ in 0..instances {
        let inst = RandomInstance::draw(&mut rng, 10, 8, 10);
        let p_b = inst.covariance();
        for s in [0.25, 0.5, 1.0] {
            let exact = riccati_exact(&p_b, &inst.operator(), &inst.error_model()?, s)?;
            let x = integrate_perturbation_flow_rk4(&inst, s, 4000);
            let p = &x * x.transpose() / (inst.n_members() - 1) as f64;
            suite.record(rel_frobenius(&p, &exact));
        }
    }
    let scalar = riccati_exact(
        &DMatrix::from_element(1, 1, 1.0),
        &ObsOperator::identity(1),
        &ObsErrorModel::uniform(1, 1.0)?,
        1.0,
    )?;
    suite.record((scalar[(0, 0)] - 0.5).abs() / 0.5);
    Ok(suite)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub suites: Vec<OracleSuite>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(OracleSuite::all_passed)
    }
}

/// Both suites at their reference settings: 100 instances, 2000 steps,
/// tolerance 1e-6.
pub fn run_oracle_checks(seed: u64) -> Result<OracleReport> {
    Ok(OracleReport {
        suites: vec![
            ensemble_covariance_suite(seed, 100, 2000, 1e-6)?,
            riccati_suite(seed.wrapping_add(1), 100, 1e-6)?,
        ],
    })
}
