mod common;

use common::*;
use etkbf::filters::FilterKind;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn centering(seed in any::<u64>(), n in 1..12usize, m in 2..10usize) {
        centering_is_idempotent(seed, n, m).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn weights_preserve_zero_mean(seed in any::<u64>(), n in 1..12usize, m in 2..10usize) {
        weights_keep_zero_mean(seed, n, m).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn weight_rows_sum_to_one(seed in any::<u64>(), method in methods()) {
        etkbf_weight_rows_sum_to_one(seed, method).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn rhs_split(seed in any::<u64>()) {
        rhs_splits_into_perturbation_and_mean(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn transform_equals_state_flow(seed in any::<u64>(), method in methods(), kind in schedule_kinds()) {
        transform_matches_state_flow(seed, method, kind).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn gaspari_cohn_shape(c in 0.1..10.0f64, a in 0.0..2.5f64, b in 0.0..2.5f64) {
        gc_is_continuous_and_monotone(c, a, b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn taper(center in 0..40usize, radius in 0.5..30.0f64) {
        taper_never_adds_weight(center, radius).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn schedules(n in 1..300usize) {
        schedules_sum_to_one(n).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn riccati_shape(seed in any::<u64>()) {
        riccati_is_psd_and_contracting(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn dsi_positivity(ds in 1e-6..=10.0f64, beta in 1e-6..=1e3f64) {
        scalar_dsi_is_positive(ds, beta).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn l96_rotation(seed in any::<u64>(), k in 0..40usize) {
        l96_rotation_commutes(seed, k).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn linear_projection(seed in any::<u64>(), a in -5.0..5.0f64, b in -5.0..5.0f64) {
        projection_is_linear(seed, a, b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn adaptive_bounds(seed in any::<u64>(), start in 0.0..1.0f64) {
        adaptive_delta_in_bounds(seed, start).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn local_sweep_order(seed in any::<u64>(), kind in prop_oneof![Just(FilterKind::Letkf), Just(FilterKind::Etkbf), Just(FilterKind::Detkbf)]) {
        local_sweep_is_order_independent(seed, kind).map_err(TestCaseError::fail)?;
    }
}
