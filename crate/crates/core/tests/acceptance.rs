//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::Instant;

use tfapprox::assemble::{build_approximator, build_on_grid, estimate_l2_error, widen_by, SampleBudget};
use tfapprox::bounds::{excess_risk_rate, median_excess_by_n, statistical_bound, GridChoice, RegressionDemo};
use tfapprox::complexity::{
    build_shatter_family, check_family_holder, closed_form_totals, count_closed_form, count_instrumented,
    default_network_grid, slope, verify_shattering, PART_CONTEXTUAL,
};
use tfapprox::grid::build_grid;
use tfapprox::report::{grid_with_levels, verify_network, vc_sweep, Check, SWEEP_EPS};
use tfapprox::reshape::HolderTarget;
use tfapprox::{seeds, Error, Precision};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome, Error> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn checks_named<'a>(checks: &'a [Check], names: &[&str]) -> Vec<&'a Check> {
    checks.iter().filter(|c| names.contains(&c.name.as_str())).collect()
}

fn summarize(checks: &[&Check]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Outcome {
        passed: failed.is_empty() && !checks.is_empty(),
        detail: if failed.is_empty() { format!("{} checks", checks.len()) } else { failed.join("; ") },
    }
}

/// Quantization, contextual and value checks on the two desk grids.
fn desk_verification() -> Result<Vec<Vec<Check>>, Error> {
    [(1, 2), (2, 2)]
        .into_iter()
        .map(|(d, l)| {
            let grid = build_grid(0.3, 0.15, d, l)?;
            let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, d * l), &grid, 17, None)?;
            Ok(verify_network(&approx, 1_000, Precision::extended(64)?, 17)?.0)
        })
        .collect()
}

fn criterion_error() -> Result<Outcome, Error> {
    let target = HolderTarget::bump(0.5, 1.0, 2);
    let mut parts = Vec::new();
    let mut ok = true;
    for eps in [0.5, 0.7] {
        let approx = build_approximator(&target, eps, 0.5, 1.0, 1, 2, 23)?;
        let est = estimate_l2_error(&approx, &target, SampleBudget::split(2_500), 29)?;
        let cube_ok = est.err_cubes <= est.cube_bound + 3.0 * est.cube_ci_width();
        ok &= est.ci.1 < eps && cube_ok;
        parts.push(format!(
            "ε={eps}: M={} ‖f−g‖={:.4} (95% ≤ {:.4}), cubes {:.4} ≤ {:.4}",
            approx.report.m, est.err_total, est.ci.1, est.err_cubes, est.cube_bound
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_rate() -> Result<Outcome, Error> {
    let sweep = vc_sweep(&SWEEP_EPS, 0.5, 1.0, 1, 2)?;
    let x: Vec<f64> = sweep.iter().map(|p| (1.0 / p.eps).ln()).collect();
    let y: Vec<f64> = sweep.iter().map(|p| p.d_blocks.ln()).collect();
    let s = slope(&x, &y);
    outcome((s - 4.0).abs() <= 0.15 * 4.0, format!("slope {s:.4} vs d0/α = 4"))
}

fn criterion_widen() -> Result<Outcome, Error> {
    let grid = build_grid(0.3, 0.15, 1, 2)?;
    let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, 2), &grid, 31, None)?;
    let net = &approx.network;
    let mut rng = seeds::stream(31, "acceptance-widen", 0);
    let xs: Vec<_> = (0..100).map(|_| grid.sample_in_cubes(&mut rng).1).collect();
    let mut worst = 0.0f64;
    let mut shapes = Vec::new();
    for n in [1, 2, 4] {
        let w = widen_by(net, n)?;
        for x in &xs {
            worst = worst.max(w.forward(x)?.to_f64().max_abs_diff(&net.forward(x)?.to_f64()));
        }
        shapes.push(format!("n={n}: depth {} width {}", w.depth(), w.width()));
    }
    outcome(worst <= 1e-9, format!("max deviation {worst:e}; {}", shapes.join(", ")))
}

fn criterion_counts() -> Result<Outcome, Error> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, l, m) in [(1, 2, 2), (2, 2, 2), (1, 3, 2), (1, 2, 3), (2, 2, 1)] {
        let grid = grid_with_levels(m, d, l)?;
        let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, d * l), &grid, 37, None)?;
        let x = grid.sample_in_cubes(&mut seeds::stream(37, "acceptance-count", 0)).1;
        let c = count_instrumented(&approx.network, &x)?;
        let totals = closed_form_totals(d, l, m);
        ok &= (c.t, c.omega) == totals;
        parts.push(format!("({d},{l},{m}) t={} ω={}", c.t, c.omega));
    }
    let spot = count_closed_form(2, 2, 2);
    let ctx = spot.part(PART_CONTEXTUAL).map_or(0, |p| p.params);
    ok &= ctx == 16 && spot.omega == 156;
    parts.push(format!("contextual params {ctx}, ω(2,2,2) = {}", spot.omega));
    outcome(ok, parts.join("; "))
}

fn criterion_vc() -> Result<Outcome, Error> {
    let sweep = vc_sweep(&SWEEP_EPS, 0.5, 1.0, 1, 2)?;
    let x: Vec<f64> = sweep.iter().map(|p| p.d_blocks.ln()).collect();
    let y: Vec<f64> = sweep.iter().map(|p| p.ln_vc).collect();
    let s = slope(&x, &y);
    outcome((s - 4.0).abs() <= 0.3, format!("slope {s:.4}"))
}

fn criterion_shatter() -> Result<Outcome, Error> {
    let family = build_shatter_family(2, 2, 0.5)?;
    let r = verify_shattering(&family, &default_network_grid(1, 2)?, 41, 16)?;
    outcome(
        r.patterns == 16 && r.shattered_by_family && r.shattered_by_networks,
        format!(
            "{} patterns; family {}; networks {}",
            r.patterns, r.shattered_by_family, r.shattered_by_networks
        ),
    )
}

fn criterion_holder() -> Result<Outcome, Error> {
    let family = build_shatter_family(2, 2, 0.5)?;
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for p in 0..16 {
        let h = check_family_holder(&family, p, 100_000, 43);
        violations += h.violations;
        max_ratio = max_ratio.max(h.max_ratio);
    }
    outcome(violations == 0, format!("{violations} violations, 16 patterns × 1e5 pairs, max ratio {max_ratio:.4}"))
}

fn criterion_bounds() -> Result<Outcome, Error> {
    // Hand evaluation: 24·(16·(1 + ln 6250) + 1)/1000 + 0.03.
    let hand = 24.0 * (16.0 * (1.0 + 6250f64.ln()) + 1.0) / 1000.0 + 0.03;
    let b = statistical_bound(2.0, 1.0, 1000.0, 0.01)?;
    let rel = (b.e_sta - hand).abs() / hand;
    let frozen = (b.e_sta - 3.794_289_309_208_491).abs() / 3.794_289_309_208_491;
    let r = excess_risk_rate(1.0, 4, 1000.0)?;
    let rate_hand = 1000f64.powf(-1.0 / 9.0) * (1000f64.ln() + 1.0);
    let rate_rel = (r.rate - rate_hand).abs() / rate_hand;
    let r2 = excess_risk_rate(1.0, 2, 1e5)?;
    let ok = rel <= 1e-9 && frozen <= 1e-9 && r.exponent == 1.0 / 9.0 && rate_rel <= 1e-9 && (r2.d_blocks - 10.0).abs() <= 1e-9;
    outcome(ok, format!("E_sta = {:.6} (rel {rel:e}); exponent {}; rate rel {rate_rel:e}", b.e_sta, r.exponent))
}

fn criterion_regression() -> Result<Outcome, Error> {
    let constant = RegressionDemo::new(
        HolderTarget::constant(0.25, 0.5, 1.0, 2),
        GridChoice::Widths { delta: 0.09, delta_star: 0.01 },
        0.0,
        2_000,
        SampleBudget::split(1_000),
        47,
    )?;
    let c = constant.run(20_000, 47)?;
    let const_ok = c.empty_cells == 0 && c.excess_risk_cubes.abs() <= 1e-12;
    let demo = RegressionDemo::new(
        HolderTarget::bump(0.5, 1.0, 2),
        GridChoice::Widths { delta: 0.09, delta_star: 0.01 },
        0.1,
        2_000,
        SampleBudget::split(1_000),
        53,
    )?;
    let seeds: Vec<u64> = (0..10).map(|i| seeds::derive(53, "acceptance-regression", i)).collect();
    let reports = demo.sweep(&[100, 1_000, 10_000], &seeds)?;
    let medians = median_excess_by_n(&reports);
    let monotone = medians.windows(2).all(|w| w[1].1 < w[0].1);
    let meds: Vec<String> = medians.iter().map(|(n, m)| format!("N={n}: {m:.5}")).collect();
    outcome(
        const_ok && monotone,
        format!("constant target cube excess {:e}; medians {}", c.excess_risk_cubes, meds.join(", ")),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, res: Result<Outcome, Error>| {
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match res {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{} [{n:>2}] {name} ({secs:.1}s): {detail}", if passed { "PASS" } else { "FAIL" });
    };

    let t = Instant::now();
    let desk = desk_verification();
    let desk_secs = t.elapsed();
    let pick = |names: &[&str]| -> Result<Outcome, Error> {
        match &desk {
            Ok(per_grid) => {
                let all: Vec<&Check> = per_grid.iter().flat_map(|c| checks_named(c, names)).collect();
                Ok(summarize(&all))
            }
            Err(e) => Err(Error::Config(e.to_string())),
        }
    };
    println!("desk verification at (1,2,2) and (2,2,2): {:.1}s", desk_secs.as_secs_f64());
    report(1, "quantization exactness", t, pick(&["quantization-exact", "quantization-gaps"]));
    report(
        2,
        "contextual injectivity and bounds",
        t,
        pick(&["contextual-precision", "contextual-distinct", "contextual-norms", "token-separation", "gamma-closed-form"]),
    );
    report(3, "value-mapping exactness", t, pick(&["value-mapping"]));

    let criteria: [(usize, &str, fn() -> Result<Outcome, Error>); 9] = [
        (4, "end-to-end error", criterion_error),
        (5, "block-count rate", criterion_rate),
        (6, "depth-width trade-off", criterion_widen),
        (7, "counting reproduction", criterion_counts),
        (8, "VC scaling", criterion_vc),
        (9, "shattering", criterion_shatter),
        (10, "Hölder membership of the family", criterion_holder),
        (11, "bound calculators", criterion_bounds),
        (12, "plug-in regression", criterion_regression),
    ];
    for (n, name, f) in criteria {
        let t = Instant::now();
        report(n, name, t, f());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
