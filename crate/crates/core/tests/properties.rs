mod common;

use proptest::prelude::*;

fn hold(check: common::Check) -> Result<(), TestCaseError> {
    match check {
        Ok(_) => Ok(()),
        Err(msg) => Err(TestCaseError::fail(msg)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn forecasts_are_linear_in_the_observable(seed in 0u64..10_000) {
        hold(common::linearity(seed))?;
    }

    #[test]
    fn eigenbasis_is_orthonormal_and_markov(seed in 0u64..10_000) {
        hold(common::orthonormality(seed))?;
    }

    #[test]
    fn iterative_basis_matches_dense_eigenpairs(seed in 0u64..10_000, n in 150usize..700) {
        hold(common::svd_vs_eigen(seed, n))?;
    }

    #[test]
    fn l96_commutes_with_index_shift(seed in 0u64..10_000) {
        hold(common::index_shift(seed))?;
    }

    #[test]
    fn gp_with_zero_targets_vanishes(seed in 0u64..10_000) {
        hold(common::gp_zero_target(seed))?;
    }

    #[test]
    fn gp_mean_stays_near_targets(seed in 0u64..10_000) {
        hold(common::gp_interpolation(seed))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 3, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sde_histogram_matches_invariant_density(seed in 0u64..10_000) {
        hold(common::sde_histogram(seed))?;
    }
}

#[test]
fn svd_vs_eigen_at_the_dense_limit() {
    common::svd_vs_eigen(5, 2000).unwrap();
}

#[test]
fn closure_is_index_shift_symmetric() {
    for seed in [3, 11, 29] {
        common::closure_symmetry(seed).unwrap();
    }
}

#[test]
fn closure_collects_one_pair_per_slow_variable() {
    let (ts, shifted) = common::closure_pairs(1);
    // 50 time units at dt 0.05 with both ends kept, nine slow variables each
    assert_eq!(ts.len(), 1001 * 9);
    assert_eq!(shifted.len(), ts.len());
    let mut a = ts.targets.clone();
    let mut b = shifted.targets.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // shifting permutes the pooled pairs
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}
