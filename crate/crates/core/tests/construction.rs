use proptest::prelude::*;
use tfapprox::assemble::{build_for_table, build_on_grid, widen, widen_by};
use tfapprox::complexity::{closed_form_totals, count_closed_form, count_instrumented};
use tfapprox::context::verify_contextual_ids;
use tfapprox::grid::{build_grid, embed_output, PiecewiseConstantFn};
use tfapprox::report::grid_with_levels;
use tfapprox::reshape::{holder_catalog, HolderTarget, ReshapePlan};
use tfapprox::{seeds, Error, ExpSum, Precision};

fn exact(m: &tfapprox::Matrix) -> tfapprox::ExactMatrix {
    m.map(|v| ExpSum::from_f64(*v))
}

#[test]
fn value_mapping_reproduces_every_grid_value() {
    for (d, l) in [(1, 2), (2, 2), (1, 3)] {
        let grid = build_grid(0.3, 0.15, d, l).unwrap();
        for target in holder_catalog(0.5, 1.0, d * l) {
            let approx = build_on_grid(&target, &grid, 9, None).unwrap();
            let pe = grid.positional::<ExpSum>();
            for idx in 0..grid.point_count().unwrap() {
                let h = grid.point_exact(idx).add(&pe).unwrap();
                let out = approx.network.forward_quantized(&h).unwrap();
                assert_eq!(out, exact(&approx.piecewise.table[idx]), "{} at ({d},{l}) point {idx}", target.id);
            }
        }
    }
}

#[test]
fn fast_and_literal_passes_agree() {
    let grid = build_grid(0.3, 0.15, 1, 2).unwrap();
    let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, 2), &grid, 4, None).unwrap();
    let net = &approx.network;
    let mut rng = seeds::stream(4, "literal", 0);
    for n in 0..12 {
        let x = if n % 3 == 0 { grid.sample_in_gaps(&mut rng) } else { grid.sample_in_cubes(&mut rng).1 };
        assert_eq!(net.forward(&x).unwrap(), net.forward_literal(&x).unwrap());
    }
}

#[test]
fn double_precision_cannot_certify_ids() {
    let grid = build_grid(0.3, 0.15, 1, 2).unwrap();
    let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, 2), &grid, 4, None).unwrap();
    let err = verify_contextual_ids(&approx.network.context, &grid, &approx.report.cert, Precision::STANDARD).unwrap_err();
    assert!(matches!(err, Error::Precision(_) | Error::Collision(_)), "{err}");
    assert!(err.to_string().contains("extended precision") || matches!(err, Error::Collision(_)));
}

/// Independent sum of the per-part counting table.
fn table_oracle(d: u128, l: u128, m: u128) -> (u128, u128) {
    let units = l * m.pow((d * l) as u32);
    let rows = [
        d * l,
        13 * (d * l) * (d * l) * m + 5 * l * m + 3,
        d * l * (8 * d + 4 * l - 4) + 2 * l * l - l,
        (13 * d * l + 4 * d) * units + 7,
        (12 * d * l + 5 * l + 2 * d) * units + 7,
        d * l,
    ];
    let params = [m + 4, 4 * d * d, 2 * d * units + 6];
    (rows.iter().sum(), params.iter().sum())
}

#[test]
fn counts_match_on_desk_configs() {
    for (d, l, m) in [(1, 2, 2), (2, 2, 2), (1, 3, 2), (1, 2, 3), (2, 2, 1)] {
        let grid = grid_with_levels(m, d, l).unwrap();
        let approx = build_on_grid(&HolderTarget::bump(0.5, 1.0, d * l), &grid, 1, None).unwrap();
        let mut rng = seeds::stream(1, "count", 0);
        let x = grid.sample_in_cubes(&mut rng).1;
        let counted = count_instrumented(&approx.network, &x).unwrap();
        let closed = count_closed_form(d, l, m);
        assert_eq!((counted.t, counted.omega), closed_form_totals(d, l, m), "({d},{l},{m})");
        assert_eq!((closed.t, closed.omega), table_oracle(d as u128, l as u128, m as u128));
        for (a, b) in counted.parts.iter().zip(&closed.parts) {
            assert_eq!(a, b, "({d},{l},{m})");
        }
        let gap = grid.sample_in_gaps(&mut rng);
        assert_eq!(count_instrumented(&approx.network, &gap).unwrap(), counted);
    }
    // Frozen values of the oracle.
    assert_eq!(table_oracle(2, 2, 2), (4451, 156));
    assert_eq!(table_oracle(1, 2, 2), (703, 32));
}

#[test]
fn widened_networks_agree() {
    let grid = build_grid(0.3, 0.15, 1, 2).unwrap();
    let approx = build_on_grid(&HolderTarget::product(0.5, 1.0, 2), &grid, 2, None).unwrap();
    let net = &approx.network;
    let mut rng = seeds::stream(2, "wide", 0);
    let xs: Vec<_> = (0..20).map(|_| grid.sample_in_cubes(&mut rng).1).collect();
    let mut depths = Vec::new();
    for n in [1, 2, 4] {
        let w = widen_by(net, n).unwrap();
        depths.push(w.depth());
        for x in &xs {
            assert_eq!(w.forward(x).unwrap(), net.forward(x).unwrap(), "n={n}");
        }
    }
    assert_eq!(depths[0], net.block_count());
    assert!(depths.windows(2).all(|w| w[1] <= w[0]));
    let w = widen(net, depths[2]).unwrap();
    assert!(w.depth() <= depths[2]);
    assert!(widen(net, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn arbitrary_tables_are_reproduced(values in prop::collection::vec(-1.0f64..=1.0, 4), seed in any::<u64>()) {
        let grid = build_grid(0.3, 0.15, 1, 2).unwrap();
        let plan = ReshapePlan::new(1, 2).unwrap();
        let table = values.iter().map(|&v| embed_output(&plan, &[v]).unwrap()).collect();
        let pw = PiecewiseConstantFn::new(grid.clone(), plan, table).unwrap();
        let approx = build_for_table("prop", 1.0, pw, seed, None).unwrap();
        let mut rng = seeds::stream(seed, "prop-table", 0);
        for _ in 0..8 {
            let (digits, x) = grid.sample_in_cubes(&mut rng);
            let idx = grid.index_of(&digits).unwrap();
            let out = approx.network.forward(&x).unwrap();
            prop_assert_eq!(out, exact(&approx.piecewise.table[idx]));
        }
    }
}
