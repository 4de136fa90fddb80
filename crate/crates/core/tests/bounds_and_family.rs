use approx::assert_relative_eq;
use proptest::prelude::*;
use tfapprox::bounds::{excess_risk_rate, log_cover, statistical_bound, GridChoice, RegressionDemo};
use tfapprox::complexity::{
    build_shatter_family, check_family_holder, default_network_grid, lower_bound_levels, verify_shattering,
    vc_upper_bound,
};
use tfapprox::assemble::SampleBudget;
use tfapprox::reshape::HolderTarget;

proptest! {
    #[test]
    fn e_sta_decreases_in_n(d in 1.0f64..4.0, k in 0.5f64..3.0, n in 1e3f64..1e6, mu in 1e-3f64..0.5) {
        let a = statistical_bound(d, k, n, mu).unwrap().e_sta;
        let b = statistical_bound(d, k, 10.0 * n, mu).unwrap().e_sta;
        prop_assert!(b < a);
    }

    #[test]
    fn log_cover_is_monotone(d in 1.0f64..4.0, n in 1e4f64..1e7, mu in 1e-3f64..0.5) {
        // Inside the regime N ≥ D⁴ the bound grows with N and D and shrinks with μ.
        let base = log_cover(mu, d, n, 1.0).unwrap();
        prop_assert!(log_cover(mu, d, 2.0 * n, 1.0).unwrap() > base);
        prop_assert!(log_cover(mu, d * 1.1, n, 1.0).unwrap() > base);
        prop_assert!(log_cover(mu / 2.0, d, n, 1.0).unwrap() > base);
    }

    #[test]
    fn rate_decreases_in_n(alpha in 0.1f64..=1.0, d0 in 1usize..8, n in 10.0f64..1e8) {
        // N^{−a}(ln N + 1) only decreases once ln N > 1/a − 1.
        let a = excess_risk_rate(alpha, d0, n).unwrap();
        prop_assume!(n.ln() > 1.0 / a.exponent - 1.0);
        let b = excess_risk_rate(alpha, d0, n * 2.0).unwrap();
        prop_assert!(b.rate < a.rate);
        prop_assert_eq!(a.exponent, alpha / (2.0 * d0 as f64 + alpha));
    }

    #[test]
    fn vc_bound_grows(t in 10.0f64..1e6, w in 2.0f64..1e4) {
        prop_assert!(vc_upper_bound(2.0 * t, w) > vc_upper_bound(t, w));
        prop_assert!(vc_upper_bound(t, 2.0 * w) > vc_upper_bound(t, w));
    }
}

#[test]
fn bound_hand_values() {
    // K=1, D=2, N=1000, μ=0.01.
    let b = statistical_bound(2.0, 1.0, 1000.0, 0.01).unwrap();
    assert_relative_eq!(b.e_sta, 3.794_289_309_208_491, max_relative = 1e-9);
    assert_relative_eq!(b.log_cover, 155.845_387_883_687_15, max_relative = 1e-9);
    let r = excess_risk_rate(1.0, 2, 1e5).unwrap();
    assert_eq!(r.exponent, 0.2);
    assert_relative_eq!(r.rate, 1e5f64.powf(-0.2) * (1e5f64.ln() + 1.0), max_relative = 1e-12);
    assert_relative_eq!(r.mu, r.d_blocks.powf(-1.0), max_relative = 1e-12);
}

#[test]
fn pyramid_family_is_holder_and_shatters() {
    let family = build_shatter_family(2, 2, 0.5).unwrap();
    for p in 0..16 {
        let h = check_family_holder(&family, p, 20_000, 3);
        assert_eq!(h.violations, 0, "pattern {p}: {h:?}");
    }
    let grid = default_network_grid(1, 2).unwrap();
    // The exact sum of the f64 widths is just above 0.2.
    assert_eq!(grid.m, 4);
    let report = verify_shattering(&family, &grid, 7, 16).unwrap();
    assert_eq!(report.patterns, 16);
    assert!(report.shattered_by_family);
    assert!(report.shattered_by_networks, "{:?}", report.results.iter().filter(|r| !r.network_signs_ok).collect::<Vec<_>>());
    assert_eq!(lower_bound_levels(1.0 / 18.0, 1.0), 4);
}

#[test]
fn noiseless_constant_target_is_recovered_on_cubes() {
    let target = HolderTarget::constant(0.25, 0.5, 1.0, 2);
    let choice = GridChoice::Widths { delta: 0.09, delta_star: 0.01 };
    let demo = RegressionDemo::new(target, choice, 0.0, 2_000, SampleBudget::split(1_000), 1).unwrap();
    let r = demo.run(20_000, 5).unwrap();
    assert_eq!(r.empty_cells, 0);
    assert!(r.excess_risk_cubes.abs() <= 1e-12, "{r:?}");
    assert!(r.mse_cubes <= 1e-24);
    // D⁴ far exceeds N here, so the covering bound is not evaluated.
    assert!(r.bounds.stat.small_sample && r.within_bound.is_none());
}
