mod common;

use common::{bridges_by_deletion, random_constraint_scaled, rel_err, square_residual};
use proptest::prelude::*;
use unit_scaling::graph::{
    bridges, gradcheck, verify_scaled_op, FactorMode, Graph, GraphBuilder, GraphError, InputKind, NodeOp, ScaleFactors,
};
use unit_scaling::rng::Rng;

fn multigraph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..9).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..=12)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bridges_match_deletion_oracle((n, edges) in multigraph()) {
        prop_assert_eq!(bridges(n, &edges), bridges_by_deletion(n, &edges));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constraint_scaled_graphs_are_scaled_ops(seed in any::<u64>()) {
        let g = random_constraint_scaled(&mut Rng::new(seed), 10);
        prop_assert!(g.is_constraint_scaled());
        let v = verify_scaled_op(&g, 3, seed).unwrap();
        prop_assert!(v.is_scaled_op, "residual {}", v.max_residual());
        for r in &v.per_input {
            if let Some(c) = r.ratio {
                let want = g.gradient_scale_ratio(g.input_index(&r.input).unwrap()).unwrap();
                prop_assert!(rel_err(c, want) < 1e-9, "{}: {} vs {}", r.input, c, want);
            }
        }
    }

    #[test]
    fn collapsed_backward_is_the_true_gradient(seed in any::<u64>()) {
        let g = random_constraint_scaled(&mut Rng::new(seed), 6);
        let inputs = g.random_inputs(&mut Rng::new(seed ^ 1));
        let err = gradcheck(&g, &inputs, 1e-6, seed).unwrap();
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let g = random_constraint_scaled(&mut Rng::new(seed), 8);
        let back = Graph::from_json(&g.to_json()).unwrap();
        let inputs = g.random_inputs(&mut Rng::new(seed));
        prop_assert_eq!(
            g.eval(&inputs, FactorMode::Scaled).unwrap(),
            back.eval(&inputs, FactorMode::Scaled).unwrap()
        );
        prop_assert_eq!(g.find_cut_edges(), back.find_cut_edges());
    }

    #[test]
    fn square_residual_needs_equal_factors(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (alpha, beta) = (a.exp2(), b.exp2());
        let v = verify_scaled_op(&square_residual(alpha, beta), 3, 0).unwrap();
        if rel_err(beta, alpha) > 1e-3 {
            prop_assert!(!v.is_scaled_op);
        }
        let v = verify_scaled_op(&square_residual(alpha, alpha), 3, 0).unwrap();
        prop_assert!(v.is_scaled_op);
    }
}

#[test]
fn chain_ratio_is_product_of_beta_over_alpha() {
    // x → tanh(α1, β1) → square(α2, β2): every edge is a cut-edge.
    let mut g = GraphBuilder::new();
    let x = g.add_input("x", &[5], InputKind::Data);
    let t = g.apply_op(NodeOp::Tanh, &[x], Some(ScaleFactors::new(2.0, vec![3.0]))).unwrap();
    let y = g.apply_op(NodeOp::Square, &[t], Some(ScaleFactors::new(0.5, vec![5.0]))).unwrap();
    g.mark_output(y).unwrap();
    let g = g.freeze();
    assert_eq!(g.find_cut_edges().len(), 3);
    let r = g.gradient_scale_ratio(0).unwrap();
    assert!(rel_err(r, (3.0 / 2.0) * (5.0 / 0.5)) < 1e-15, "{r}");
    let v = verify_scaled_op(&g, 2, 0).unwrap();
    assert!(rel_err(v.per_input[0].ratio.unwrap(), r) < 1e-12);
}

#[test]
fn fan_out_is_explicit_and_breaks_cut_edges() {
    let g = square_residual(1.0, 2.0);
    assert!(g.nodes().iter().any(|n| matches!(n.op, NodeOp::Copy { fanout: 2 })));
    assert!(!g.is_constraint_scaled());
    assert_eq!(g.violations().len(), 1);
    let fixed = g.resolved().unwrap();
    assert!(fixed.is_constraint_scaled());
    assert!(verify_scaled_op(&fixed, 2, 0).unwrap().is_scaled_op);
}

#[test]
fn malformed_json_is_a_parse_error() {
    assert!(matches!(Graph::from_json("{\"inputs\": ["), Err(GraphError::Description(_))));
}
