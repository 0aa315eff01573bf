mod common;

use common::*;
use nalgebra::DMatrix;

use etkbf::ensemble::{mean_and_perturbations, sample_covariance, EnsembleMatrix};
use etkbf::filters::{global_analysis, FilterKind, Integration, MeanUpdateMode};
use etkbf::loc_inflate::{
    apply_fixed_inflation, local_analysis_sweep, localize_observation_errors, InflationState,
    LocalizationConfig, Topology,
};
use etkbf::pseudo_time::ScheduleKind;

#[test]
fn huge_radius_matches_global_analysis() {
    let (ens, obs) = l96_case(3, 10);
    let loc = LocalizationConfig::new(1e7, Topology::Ring(40)).unwrap();
    let delta = 0.05;
    let infl = InflationState::fixed(40, delta).unwrap();
    let s = scheme(Integration::Dsi, ScheduleKind::Uniform, 4);
    for kind in [FilterKind::Letkf, FilterKind::Etkbf, FilterKind::Detkbf] {
        let (local, _) =
            local_analysis_sweep(kind, &ens, &obs, &loc, &infl, &s, MeanUpdateMode::PerStep, true).unwrap();
        let global = global_analysis(kind, &ens, &obs, &s, MeanUpdateMode::PerStep, delta).unwrap();
        let err = rel(local.ensemble.matrix(), global.ensemble.matrix());
        assert!(err < 1e-6, "{kind}: {err:.3e}");
        assert!((local.stiffness.beta - global.stiffness.beta).abs() < 1e-9 * global.stiffness.beta);
    }
}

#[test]
fn unobserved_gridpoints_keep_inflated_background() {
    let (ens, obs) = l96_case(4, 10);
    // Cutoff below one gridpoint: only observed points see data.
    // Observations sit on 0-based even indices.
    let loc = LocalizationConfig::new(0.5, Topology::Ring(40)).unwrap();
    assert!(loc.cutoff() < 1.0);
    let delta = 0.1;
    let infl = InflationState::fixed(40, delta).unwrap();
    let (mean, pert) = mean_and_perturbations(&ens).unwrap();
    let inflated = apply_fixed_inflation(&pert, delta).unwrap();
    let s = scheme(Integration::Dsi, ScheduleKind::Uniform, 4);
    for kind in [FilterKind::Letkf, FilterKind::Etkbf, FilterKind::Detkbf] {
        let (res, _) =
            local_analysis_sweep(kind, &ens, &obs, &loc, &infl, &s, MeanUpdateMode::PerStep, false).unwrap();
        for q in (1..40).step_by(2) {
            assert!(localize_observation_errors(q, &obs, &loc).unwrap().is_empty());
            for j in 0..10 {
                let expect = mean[q] + inflated.matrix()[(q, j)];
                assert!((res.ensemble.matrix()[(q, j)] - expect).abs() < 1e-12, "{kind} row {q}");
            }
        }
        // Observed rows move.
        assert!((res.ensemble.matrix().row(0) - ens.matrix().row(0)).amax() > 1e-6);
    }
}

#[test]
fn fixed_inflation_scales_covariance() {
    let (ens, _) = l96_case(5, 10);
    let (_, pert) = mean_and_perturbations(&ens).unwrap();
    let p = sample_covariance(&pert).unwrap();
    let p_infl = sample_covariance(&apply_fixed_inflation(&pert, 0.3).unwrap()).unwrap();
    assert!(rel(&p_infl, &(p * 1.69)) < 1e-12);
}

#[test]
fn ring_wraps_around() {
    let loc = LocalizationConfig::new(4.0, Topology::Ring(40)).unwrap();
    assert_eq!(loc.distance(0, 39), 1.0);
    assert_eq!(loc.distance(39, 0), 1.0);
    assert_eq!(loc.distance(5, 25), 20.0);
    assert!((loc.taper_scale() - 4.0 / 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn localization_needs_a_matching_ring() {
    let (ens, obs) = l96_case(6, 10);
    let s = scheme(Integration::Dsi, ScheduleKind::Uniform, 4);
    let infl = InflationState::fixed(40, 0.0).unwrap();
    let wrong = LocalizationConfig::new(4.0, Topology::Ring(20)).unwrap();
    assert!(local_analysis_sweep(FilterKind::Letkf, &ens, &obs, &wrong, &infl, &s, MeanUpdateMode::PerStep, false).is_err());
    let none = LocalizationConfig::new(4.0, Topology::None).unwrap();
    assert!(local_analysis_sweep(FilterKind::Letkf, &ens, &obs, &none, &infl, &s, MeanUpdateMode::PerStep, false).is_err());
    let good = LocalizationConfig::new(4.0, Topology::Ring(40)).unwrap();
    assert!(local_analysis_sweep(FilterKind::Br10State, &ens, &obs, &good, &infl, &s, MeanUpdateMode::PerStep, false).is_err());
}

#[test]
fn collapsed_ensemble_is_not_flagged_but_untouched() {
    let (ens, obs) = l96_case(8, 10);
    let mean = ens.matrix().column_mean();
    let flat = EnsembleMatrix::full(DMatrix::from_fn(40, 10, |i, _| mean[i])).unwrap();
    let loc = LocalizationConfig::new(4.0, Topology::Ring(40)).unwrap();
    let infl = InflationState::adaptive(40, Default::default()).unwrap();
    let s = scheme(Integration::Dsi, ScheduleKind::Uniform, 4);
    let (res, next) =
        local_analysis_sweep(FilterKind::Etkbf, &flat, &obs, &loc, &infl, &s, MeanUpdateMode::PerStep, true).unwrap();
    assert!(!res.failed());
    assert!((res.ensemble.matrix() - flat.matrix()).amax() < 1e-12);
    assert_eq!(next.deltas(), infl.deltas());
    assert!(next.collapsed_warnings > 0);
}
