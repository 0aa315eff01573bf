//! Fixtures and invariant checks shared by the integration test targets.
//!
//! Each check returns `Err(message)` on a violation so the same code can run
//! under `proptest!` and from the acceptance report.

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use etkbf::dynamics::ModelSpec;
use etkbf::ensemble::{
    apply_weight_transform, mean_and_perturbations, sample_covariance, EnsembleMatrix,
    MeanProjector, StateVector, WeightMatrix, WeightRole,
};
use etkbf::filters::state_space::{full_rhs, mean_rhs, perturbation_rhs};
use etkbf::filters::{
    detkbf_step, etkbf_step, state_space_step, FilterKind, Integration, MeanUpdateMode,
};
use etkbf::loc_inflate::{
    adaptive_inflation_update, gaspari_cohn, localize_observation_errors, local_analysis_sweep,
    AdaptiveInflationConfig, InflationState, LocalizationConfig, Topology,
};
use etkbf::obs::{ObsErrorModel, ObsOperator, ObservationBatch, Parity};
use etkbf::oracle::RandomInstance;
use etkbf::pseudo_time::{build_schedule, riccati_exact, ScheduleKind};
use etkbf::filters::IntegrationScheme;

pub type Check = std::result::Result<(), String>;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `‖a - b‖_F / ‖b‖_F`, falling back to the absolute error for tiny `b`.
pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn scheme(method: Integration, kind: ScheduleKind, n: usize) -> IntegrationScheme {
    IntegrationScheme {
        method,
        schedule: build_schedule(kind, n).unwrap(),
    }
}

/// Random instance plus a background mean and observations to go with it.
pub struct Problem {
    pub inst: RandomInstance,
    pub mean: DVector<f64>,
    pub obs: ObservationBatch,
}

impl Problem {
    pub fn draw(seed: u64) -> Self {
        let mut rng = rng(seed);
        let inst = RandomInstance::draw(&mut rng, 10, 8, 10);
        let n = inst.x_pert.nrows();
        let l = inst.h.nrows();
        let mean = normal_matrix(&mut rng, n, 1).column(0).into_owned();
        let y = normal_matrix(&mut rng, l, 1).column(0).into_owned() * 2.0;
        let obs = ObservationBatch::new(
            y,
            0,
            Arc::new(inst.operator()),
            Arc::new(inst.error_model().unwrap()),
        )
        .unwrap();
        Self { inst, mean, obs }
    }

    /// Scales the perturbations so that `β` equals `target`.
    pub fn with_beta(mut self, target: f64) -> Self {
        let y = self.inst.y_pert();
        let beta = etkbf::pseudo_time::beta_ratio(&y, &self.inst.error_model().unwrap())
            .unwrap()
            .beta;
        if beta > 0.0 {
            self.inst.x_pert *= (target / beta).sqrt();
        }
        self
    }

    pub fn full(&self) -> DMatrix<f64> {
        let mut x = self.inst.x_pert.clone();
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        x
    }

    pub fn innovation_base(&self) -> DVector<f64> {
        &self.inst.h * &self.mean - &self.obs.y
    }
}

/// ETKBF against the BGR09 state flow and DETKBF against the BR10 state flow,
/// compared after every pseudo-step. Returns the worst relative error.
pub fn transform_state_gap(p: &Problem, scheme: &IntegrationScheme) -> std::result::Result<f64, String> {
    let x_b = &p.inst.x_pert;
    let m = x_b.ncols();
    let r = p.inst.error_model().unwrap();
    let y_b = p.inst.y_pert();
    let innov = p.innovation_base();
    let mut worst: f64 = 0.0;

    let mut w = WeightMatrix::identity(m, WeightRole::Perturbation);
    let mut w_mean = DVector::zeros(m);
    let mut ens = EnsembleMatrix::perturbations(x_b.clone()).unwrap();
    let mut mean = StateVector::new(p.mean.clone()).unwrap();

    let x_full = p.full();
    let y_full = &p.inst.h * &x_full;
    let mut w_full = WeightMatrix::identity(m, WeightRole::Full);
    let mut ens_full = EnsembleMatrix::full(x_full.clone()).unwrap();
    let mut mean_full = StateVector::new(p.mean.clone()).unwrap();

    for (k, &ds) in scheme.schedule.increments().iter().enumerate() {
        let t = etkbf_step(&w, &w_mean, &y_b, &innov, &r, ds, scheme.method, MeanUpdateMode::PerStep);
        let s = state_space_step(&ens, &mean, &p.obs, ds, scheme.method, FilterKind::Bgr09State);
        match (t, s) {
            (Ok((wn, wm)), Ok((en, mn))) => {
                worst = worst.max(rel(&(x_b * wn.matrix()), en.matrix()));
                let m_t = &p.mean + x_b * &wm;
                worst = worst.max(rel_vec(&m_t, &mn));
                w = wn;
                w_mean = wm;
                ens = en;
                mean = mn;
            }
            (Err(_), Err(_)) => break,
            _ => return Err(format!("ETKBF and BGR09 disagree on finiteness at step {}", k + 1)),
        }
    }

    for (k, &ds) in scheme.schedule.increments().iter().enumerate() {
        let t = detkbf_step(&w_full, &y_full, &p.obs.y, &r, ds, scheme.method);
        let s = state_space_step(&ens_full, &mean_full, &p.obs, ds, scheme.method, FilterKind::Br10State);
        match (t, s) {
            (Ok(wn), Ok((en, mn))) => {
                worst = worst.max(rel(&(&x_full * wn.matrix()), en.matrix()));
                w_full = wn;
                ens_full = en;
                mean_full = mn;
            }
            (Err(_), Err(_)) => break,
            _ => return Err(format!("DETKBF and BR10 disagree on finiteness at step {}", k + 1)),
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Property checks.

pub fn centering_is_idempotent(seed: u64, n: usize, m: usize) -> Check {
    let mut rng = rng(seed);
    let x = normal_matrix(&mut rng, n, m) * 3.0;
    let (_, pert) = mean_and_perturbations(&EnsembleMatrix::full(x).unwrap()).unwrap();
    let (mean2, pert2) =
        mean_and_perturbations(&EnsembleMatrix::full(pert.matrix().clone()).unwrap()).unwrap();
    ensure(mean2.amax() < 1e-12, || format!("mean of perturbations {}", mean2.amax()))?;
    ensure((pert2.matrix() - pert.matrix()).amax() < 1e-12, || "perturbations changed".into())?;
    let proj = MeanProjector::new(m);
    let once = proj.center(pert.matrix());
    let twice = proj.center(&once);
    ensure((twice - once).amax() < 1e-12, || "(I-U)² ≠ (I-U)".into())
}

/// Random perturbation weights normalized so that `W 1 = 1`.
fn random_weights(rng: &mut impl Rng, m: usize) -> WeightMatrix {
    let mut w = normal_matrix(rng, m, m);
    for mut row in w.row_iter_mut() {
        let s = row.sum();
        row.add_scalar_mut((1.0 - s) / m as f64);
    }
    WeightMatrix::new(w, WeightRole::Perturbation).unwrap()
}

pub fn weights_keep_zero_mean(seed: u64, n: usize, m: usize) -> Check {
    let mut rng = rng(seed);
    let x = MeanProjector::new(m).center(&(normal_matrix(&mut rng, n, m) * 5.0));
    let w = random_weights(&mut rng, m);
    let xw = apply_weight_transform(&EnsembleMatrix::perturbations(x.clone()).unwrap(), &w)
        .map_err(|e| e.to_string())?;
    let scale = x.amax() * w.matrix().amax() * m as f64;
    for row in xw.matrix().row_iter() {
        ensure(row.sum().abs() <= 1e-8 * scale.max(1.0), || format!("row sum {}", row.sum()))?;
    }
    let p = sample_covariance(&xw).map_err(|e| e.to_string())?;
    let expect = &x * w.ensemble_covariance() * x.transpose();
    ensure(rel(&p, &expect) < 1e-10 || expect.norm() < 1e-12, || {
        format!("covariance identity off by {}", rel(&p, &expect))
    })
}

pub fn rhs_splits_into_perturbation_and_mean(seed: u64) -> Check {
    let p = Problem::draw(seed);
    let full = full_rhs(&p.full(), &p.obs);
    let mut split = perturbation_rhs(&p.inst.x_pert, &p.obs);
    let mean = mean_rhs(&p.inst.x_pert, &p.mean, &p.obs);
    for mut col in split.column_iter_mut() {
        col += &mean;
    }
    let err = (&full - &split).amax() / full.amax().max(1.0);
    ensure(err < 1e-12, || format!("split residual {err}"))
}

pub fn etkbf_weight_rows_sum_to_one(seed: u64, method: Integration) -> Check {
    let p = Problem::draw(seed).with_beta(if method == Integration::Dsi { 50.0 } else { 0.8 });
    let m = p.inst.n_members();
    let r = p.inst.error_model().unwrap();
    let y_b = p.inst.y_pert();
    let innov = p.innovation_base();
    let mut w = WeightMatrix::identity(m, WeightRole::Perturbation);
    let mut w_mean = DVector::zeros(m);
    for &ds in build_schedule(ScheduleKind::Doubling, 8).unwrap().increments() {
        let (wn, wm) = etkbf_step(&w, &w_mean, &y_b, &innov, &r, ds, method, MeanUpdateMode::PerStep)
            .map_err(|e| e.to_string())?;
        for row in wn.matrix().row_iter() {
            ensure((row.sum() - 1.0).abs() <= 1e-8 * m as f64, || format!("row sum {}", row.sum()))?;
        }
        w = wn;
        w_mean = wm;
    }
    Ok(())
}

pub fn transform_matches_state_flow(seed: u64, method: Integration, kind: ScheduleKind) -> Check {
    let p = Problem::draw(seed);
    let p = if method == Integration::EulerForward {
        p.with_beta(0.9)
    } else {
        p
    };
    let n = if kind == ScheduleKind::Doubling { 8 } else { 5 };
    let gap = transform_state_gap(&p, &scheme(method, kind, n))?;
    ensure(gap < 1e-10, || format!("transform/state gap {gap:.3e}"))
}

pub fn gc_is_continuous_and_monotone(c: f64, a: f64, b: f64) -> Check {
    let eps = 1e-9 * c;
    for knot in [c, 2.0 * c] {
        let jump = (gaspari_cohn(knot - eps, c) - gaspari_cohn(knot + eps, c)).abs();
        ensure(jump < 1e-7, || format!("jump {jump} at {knot}"))?;
        let exact = (gaspari_cohn(knot, c) - gaspari_cohn(knot * (1.0 + 1e-15), c)).abs();
        ensure(exact < 1e-12, || format!("discontinuity {exact} at {knot}"))?;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (g_lo, g_hi) = (gaspari_cohn(lo * c, c), gaspari_cohn(hi * c, c));
    ensure(g_hi <= g_lo + 1e-15, || format!("GC increases between {lo} and {hi}"))?;
    ensure((-1e-15..=1.0).contains(&g_lo), || format!("GC out of range: {g_lo}"))
}

pub fn taper_never_adds_weight(center: usize, radius: f64) -> Check {
    let loc = LocalizationConfig::new(radius, Topology::Ring(40)).unwrap();
    let obs = ring_observations(40, 1.3);
    let local = localize_observation_errors(center, &obs, &loc).map_err(|e| e.to_string())?;
    for ((&row, &v), &d) in local.rows.iter().zip(&local.tapered_variances).zip(&local.distances) {
        ensure(v >= obs.errors.variances()[row], || format!("obs {row} gained weight"))?;
        ensure(d < loc.cutoff(), || format!("obs {row} beyond the cutoff"))?;
    }
    Ok(())
}

pub fn schedules_sum_to_one(n: usize) -> Check {
    let u = build_schedule(ScheduleKind::Uniform, n).map_err(|e| e.to_string())?;
    let sum: f64 = u.increments().iter().sum();
    ensure((sum - 1.0).abs() < 1e-12, || format!("uniform({n}) sums to {sum}"))?;
    if n >= 4 {
        let d = build_schedule(ScheduleKind::Doubling, n).map_err(|e| e.to_string())?;
        let inc = d.increments();
        let sum: f64 = inc.iter().sum();
        ensure(inc.len() == n, || format!("doubling({n}) has {} steps", inc.len()))?;
        ensure((sum - 1.0).abs() < 1e-12, || format!("doubling({n}) sums to {sum}"))?;
        ensure(inc.windows(2).all(|w| w[0] <= w[1]), || format!("doubling({n}) decreases"))?;
    }
    Ok(())
}

pub fn riccati_is_psd_and_contracting(seed: u64) -> Check {
    let inst = RandomInstance::draw(&mut rng(seed), 10, 8, 10);
    let p_b = inst.covariance();
    let (h, r) = (inst.operator(), inst.error_model().unwrap());
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let s = k as f64 / 10.0;
        let p = riccati_exact(&p_b, &h, &r, s).map_err(|e| e.to_string())?;
        let scale = p_b.norm().max(1.0);
        ensure((&p - p.transpose()).amax() < 1e-12 * scale, || "asymmetric".into())?;
        let min_eig = p.clone().symmetric_eigen().eigenvalues.min();
        ensure(min_eig >= -1e-10 * scale, || format!("eigenvalue {min_eig} at s = {s}"))?;
        let tr = p.trace();
        ensure(tr <= last + 1e-12 * scale, || format!("trace rose to {tr} at s = {s}"))?;
        last = tr;
    }
    Ok(())
}

/// One DSI step on a scalar perturbation with `P = β r`.
pub fn scalar_dsi_is_positive(ds: f64, beta: f64) -> Check {
    let m = 2;
    let x = 1.0;
    let p = x * x * 2.0 / (m - 1) as f64;
    let r = p / beta;
    let y = DMatrix::from_row_slice(1, 2, &[x, -x]);
    let err = ObsErrorModel::uniform(1, r).unwrap();
    let w = WeightMatrix::identity(m, WeightRole::Perturbation);
    let (wn, _) = etkbf_step(&w, &DVector::zeros(m), &y, &DVector::zeros(1), &err, ds, Integration::Dsi, MeanUpdateMode::PerStep)
        .map_err(|e| e.to_string())?;
    let after = (&y * wn.matrix())[(0, 0)];
    ensure(after > 0.0 && after <= x, || format!("perturbation {x} became {after}"))
}

pub fn l96_rotation_commutes(seed: u64, k: usize) -> Check {
    let model = ModelSpec::lorenz96();
    let n = model.state_dim();
    let x = normal_matrix(&mut rng(seed), n, 1).column(0).into_owned() * 4.0 + DVector::from_element(n, 8.0);
    let rotate = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[(i + k) % n]);
    let a = rotate(&model.tendency(&x).unwrap());
    let b = model.tendency(&rotate(&x)).unwrap();
    ensure((a - b).amax() < 1e-12, || format!("rotation by {k} does not commute"))
}

pub fn projection_is_linear(seed: u64, a: f64, b: f64) -> Check {
    let mut rng = rng(seed);
    let h = ObsOperator::Dense(normal_matrix(&mut rng, 4, 6));
    let x = normal_matrix(&mut rng, 6, 5);
    let z = normal_matrix(&mut rng, 6, 5);
    let lhs = h.apply(&(&x * a + &z * b)).unwrap();
    let rhs = h.apply(&x).unwrap() * a + h.apply(&z).unwrap() * b;
    ensure((&lhs - &rhs).amax() < 1e-12 * (1.0 + lhs.amax()), || "projection is not linear".into())
}

pub fn adaptive_delta_in_bounds(seed: u64, start: f64) -> Check {
    let cfg = AdaptiveInflationConfig {
        initial: start,
        ..Default::default()
    };
    let mut rng = rng(seed);
    let mut state = InflationState::adaptive(1, cfg).unwrap();
    for _ in 0..50 {
        let y = MeanProjector::new(4).center(&normal_matrix(&mut rng, 3, 4));
        let d: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0).collect();
        state = adaptive_inflation_update(&state, 0, &d, &y, &[1.5; 3]).map_err(|e| e.to_string())?;
        let delta = state.delta(0);
        ensure((cfg.delta_min..=cfg.delta_max).contains(&delta), || format!("δ = {delta}"))?;
    }
    Ok(())
}

/// Local analyses with parallel and sequential gridpoint loops agree bitwise.
pub fn local_sweep_is_order_independent(seed: u64, kind: FilterKind) -> Check {
    let (ens, obs) = l96_case(seed, 10);
    let loc = LocalizationConfig::new(4.0, Topology::Ring(40)).unwrap();
    let infl = InflationState::adaptive(40, AdaptiveInflationConfig::default()).unwrap();
    let s = scheme(Integration::Dsi, ScheduleKind::Uniform, 4);
    let run = |parallel| {
        local_analysis_sweep(kind, &ens, &obs, &loc, &infl, &s, MeanUpdateMode::PerStep, parallel).unwrap()
    };
    let (a, ia) = run(true);
    let (b, ib) = run(false);
    let same = a.ensemble.matrix().iter().zip(b.ensemble.matrix().iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same && ia.deltas() == ib.deltas(), || format!("{kind} depends on gridpoint order"))
}

// ---------------------------------------------------------------------------
// L96 fixtures.

/// Observations of every gridpoint of a ring with uniform variance.
pub fn ring_observations(n: usize, variance: f64) -> ObservationBatch {
    ObservationBatch::new(
        DVector::zeros(n),
        0,
        Arc::new(ObsOperator::identity(n)),
        Arc::new(ObsErrorModel::uniform(n, variance).unwrap()),
    )
    .unwrap()
}

/// An L96 truth on the attractor, an `m`-member ensemble scattered around it,
/// and observations of every other gridpoint.
pub fn l96_case(seed: u64, m: usize) -> (EnsembleMatrix, ObservationBatch) {
    let model = ModelSpec::lorenz96();
    let n = model.state_dim();
    let mut rng = rng(seed);
    let x0 = DVector::from_element(n, 8.0) + normal_matrix(&mut rng, n, 1).column(0) * 0.01;
    let truth = model.rk4_advance(&x0, 500).unwrap();
    let mut ens = normal_matrix(&mut rng, n, m);
    for mut col in ens.column_iter_mut() {
        col += &truth;
    }
    let op = ObsOperator::every_other(n, Parity::Odd);
    let noise = normal_matrix(&mut rng, op.n_obs(), 1).column(0).into_owned();
    let y = op.apply_vector(&truth).unwrap() + noise;
    let obs = ObservationBatch::new(
        y,
        0,
        Arc::new(op.clone()),
        Arc::new(ObsErrorModel::uniform(op.n_obs(), 1.0).unwrap()),
    )
    .unwrap();
    (EnsembleMatrix::full(ens).unwrap(), obs)
}

// ---------------------------------------------------------------------------
// Running the checks outside `proptest!`.

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

pub fn run_property<S: Strategy>(cases: u32, strategy: S, check: impl Fn(S::Value) -> Check) -> Check {
    runner(cases)
        .run(&strategy, |v| check(v).map_err(TestCaseError::fail))
        .map_err(|e| e.to_string())
}

pub fn methods() -> impl Strategy<Value = Integration> {
    prop_oneof![Just(Integration::EulerForward), Just(Integration::Dsi)]
}

pub fn schedule_kinds() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Uniform), Just(ScheduleKind::Doubling)]
}

/// Every invariant, each run as a property over `cases` random inputs.
pub fn invariant_suite(cases: u32) -> Vec<(&'static str, Check)> {
    let transform_kinds = prop_oneof![
        Just(FilterKind::Letkf),
        Just(FilterKind::Etkbf),
        Just(FilterKind::Detkbf)
    ];
    vec![
        (
            "centering idempotence",
            run_property(cases, (any::<u64>(), 1..12usize, 2..10usize), |(s, n, m)| {
                centering_is_idempotent(s, n, m)
            }),
        ),
        (
            "zero-mean preservation and transform covariance",
            run_property(cases, (any::<u64>(), 1..12usize, 2..10usize), |(s, n, m)| {
                weights_keep_zero_mean(s, n, m)
            }),
        ),
        (
            "weight rows sum to one",
            run_property(cases, (any::<u64>(), methods()), |(s, k)| etkbf_weight_rows_sum_to_one(s, k)),
        ),
        (
            "right-hand-side split",
            run_property(cases, any::<u64>(), rhs_splits_into_perturbation_and_mean),
        ),
        (
            "transform/state equivalence",
            run_property(cases, (any::<u64>(), methods(), schedule_kinds()), |(s, m, k)| {
                transform_matches_state_flow(s, m, k)
            }),
        ),
        (
            "Gaspari-Cohn continuity and monotonicity",
            run_property(cases, (0.1..10.0f64, 0.0..2.5f64, 0.0..2.5f64), |(c, a, b)| {
                gc_is_continuous_and_monotone(c, a, b)
            }),
        ),
        (
            "tapering never adds weight",
            run_property(cases, (0..40usize, 0.5..30.0f64), |(q, r)| taper_never_adds_weight(q, r)),
        ),
        (
            "schedules sum to one",
            run_property(cases, 1..300usize, schedules_sum_to_one),
        ),
        (
            "Riccati solution symmetric PSD and contracting",
            run_property(cases, any::<u64>(), riccati_is_psd_and_contracting),
        ),
        (
            "scalar DSI positivity",
            run_property(cases, (1e-6..=10.0f64, 1e-6..=1e3f64), |(ds, b)| scalar_dsi_is_positive(ds, b)),
        ),
        (
            "L96 rotation symmetry",
            run_property(cases, (any::<u64>(), 0..40usize), |(s, k)| l96_rotation_commutes(s, k)),
        ),
        (
            "observation operator linearity",
            run_property(cases, (any::<u64>(), -5.0..5.0f64, -5.0..5.0f64), |(s, a, b)| {
                projection_is_linear(s, a, b)
            }),
        ),
        (
            "adaptive inflation bounds",
            run_property(cases, (any::<u64>(), 0.0..1.0f64), |(s, d)| adaptive_delta_in_bounds(s, d)),
        ),
        (
            "local analysis independent of gridpoint order",
            run_property(cases.min(8), (any::<u64>(), transform_kinds), |(s, k)| {
                local_sweep_is_order_independent(s, k)
            }),
        ),
    ]
}
