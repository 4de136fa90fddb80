use num_rational::BigRational;
use num_traits::ToPrimitive;
use proptest::prelude::*;
use tfapprox::grid::{build_grid, select_parameters};
use tfapprox::quantize::build_quantizer;
use tfapprox::reshape::{holder_catalog, check_holder, ReshapePlan};
use tfapprox::seq::{block_forward, softmax_columns, BlockSpec, FeedForward};
use tfapprox::{seeds, ExpSum, Matrix};

fn matrix(d: usize, l: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, d * l).prop_map(move |v| Matrix::new(d, l, v).unwrap())
}

proptest! {
    #[test]
    fn softmax_columns_are_distributions(x in matrix(3, 4)) {
        let p = softmax_columns(&x).unwrap();
        for j in 0..4 {
            let col = p.column(j);
            prop_assert!(col.iter().all(|&v| v > 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_block_is_identity(x in matrix(2, 3)) {
        let block = BlockSpec::feed_forward(FeedForward::identity(2));
        prop_assert_eq!(block_forward(&block, &x).unwrap(), x);
    }

    #[test]
    fn reshape_round_trips(d in 1usize..5, l in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let plan = ReshapePlan::new(d, l).unwrap();
        let mut rng = seeds::stream(seed, "prop", 0);
        let x: Vec<f64> = (0..d * l).map(|_| rng.gen()).collect();
        let m = plan.reshape(&x).unwrap();
        prop_assert_eq!(plan.flatten(&m).unwrap(), x);
        let mut cells: Vec<(usize, usize)> = (1..=d * l).map(|k| plan.index_map(k)).collect();
        cells.sort_unstable();
        cells.dedup();
        prop_assert_eq!(cells.len(), d * l);
    }

    #[test]
    fn selection_is_feasible(eps in 0.05f64..1.0, alpha in 0.1f64..1.0, k in 0.5f64..3.0, l in 2usize..4) {
        let sel = select_parameters(eps, alpha, k, 1, l).unwrap();
        prop_assert!(sel.delta > 0.0 && sel.delta_star > 0.0);
        prop_assert!(sel.delta <= sel.delta_max && sel.delta < sel.c2 && sel.delta < sel.c3);
        prop_assert!(sel.delta_star <= (sel.c2 - sel.delta) * sel.delta / 2.0);
        let grid = sel.grid(1, l).unwrap();
        let step = BigRational::from_float(sel.delta).unwrap() + BigRational::from_float(sel.delta_star).unwrap();
        prop_assert_eq!(grid.m, step.recip().floor().to_integer().to_usize().unwrap());
        prop_assert!(grid.union_measure() <= 1.0);
        prop_assert!(grid.gap_term() <= grid.complement_measure() + 1e-15);
    }

    #[test]
    fn quantizer_snaps_cube_samples(m in 2usize..5, d in 1usize..3, seed in any::<u64>()) {
        let step = 1.0 / (m as f64 + 0.5);
        let grid = build_grid(0.7 * step, 0.3 * step, d, 2).unwrap();
        let q = build_quantizer(&grid);
        let mut rng = seeds::stream(seed, "prop-quant", 0);
        let (digits, x) = grid.sample_in_cubes(&mut rng);
        let idx = grid.index_of(&digits).unwrap();
        let want = grid.point_exact(idx).add(&grid.positional::<ExpSum>()).unwrap();
        prop_assert_eq!(q.forward_fast(&x).unwrap(), want.clone());
        prop_assert_eq!(q.forward(&x).unwrap(), want);
        let gap = grid.sample_in_gaps(&mut rng);
        let out = q.forward_fast(&gap).unwrap();
        prop_assert!(out.data().iter().all(|v| (1.0..=3.0).contains(&v.to_f64())));
        prop_assert_eq!(q.forward(&gap).unwrap(), out);
    }
}

#[test]
fn merged_quantizer_layer_matches_the_sequence() {
    let grid = build_grid(0.2, 0.1, 1, 2).unwrap();
    let q = build_quantizer(&grid);
    let merged = q.merged_layer();
    let mut rng = seeds::stream(5, "merged", 0);
    for _ in 0..50 {
        let (_, x) = grid.sample_in_cubes(&mut rng);
        let h = q.embed(&x).unwrap();
        assert_eq!(block_forward(&merged, &h).unwrap(), q.forward(&x).unwrap());
    }
}

#[test]
fn catalog_targets_are_holder() {
    for t in holder_catalog(0.5, 1.0, 2) {
        let c = check_holder(&t, 20_000, 11);
        assert!(c.passed(), "{}: {c:?}", t.id);
    }
}

#[test]
fn quantizer_serializes_weights() {
    let grid = build_grid(0.2, 0.1, 1, 2).unwrap();
    let q = build_quantizer(&grid).cast::<f64>();
    let v = serde_json::to_value(&q).unwrap();
    assert_eq!(v["up"], 3.0);
    assert_eq!(v["positional"]["data"], serde_json::json!([1.0, 2.0]));
}
