use proptest::prelude::*;
use stfm_core::autodiff::inject_fault;
use stfm_core::harness::check::{grad_ops, op_gradcheck, run_suite, Suite, GRAD_TOL};

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_op_matches_finite_differences(
        op in prop::sample::select(grad_ops()),
        rows in 1usize..=8,
        cols in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let rep = op_gradcheck(op, rows, cols, seed).unwrap();
        prop_assert!(rep.checked > 0);
        prop_assert!(
            rep.max_rel_error <= GRAD_TOL,
            "{op} {rows}x{cols} seed {seed}: {} at {:?}", rep.max_rel_error, rep.worst
        );
    }
}

#[test]
fn each_op_passes_at_its_edge_shapes() {
    for op in grad_ops() {
        for (r, c) in [(1, 1), (1, 8), (8, 1), (8, 8)] {
            let rep = op_gradcheck(op, r, c, 17).unwrap();
            assert!(rep.max_rel_error <= GRAD_TOL, "{op} {r}x{c}: {}", rep.max_rel_error);
        }
    }
}

#[test]
fn grad_suite_covers_blocks_and_models() {
    let report = run_suite(Suite::Grad, 3).unwrap();
    assert!(report.passed(), "{:#?}", report.failures().collect::<Vec<_>>());
    let names: Vec<&str> = report.cases.iter().map(|c| c.name.as_str()).collect();
    for op in grad_ops() {
        assert!(names.iter().any(|n| n.contains(op)), "no case for {op}");
    }
    for model in ["mab", "sab+pma", "isab+pma"] {
        assert!(names.iter().any(|n| n.contains(model)), "no case for {model}");
    }
}

#[test]
fn a_negated_adjoint_is_caught_and_named() {
    for op in stfm_core::autodiff::OP_NAMES {
        inject_fault(Some(op));
        let rep = op_gradcheck(op, 3, 4, 5);
        inject_fault(None);
        let rep = rep.unwrap();
        assert!(rep.max_rel_error > GRAD_TOL, "fault in {op} went unnoticed");
    }
}

#[test]
fn injected_fault_fails_the_suite_under_that_op_only() {
    inject_fault(Some("layernorm_rows"));
    let report = run_suite(Suite::Grad, 0);
    inject_fault(None);
    let report = report.unwrap();
    assert!(!report.passed());
    let failing: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    assert!(failing.iter().any(|n| n.contains("layernorm_rows")), "{failing:?}");
    // other single-op cases stay green
    assert!(!failing.iter().any(|n| n.contains("matmul")), "{failing:?}");
}
