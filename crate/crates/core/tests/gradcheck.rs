use glr_core::harness::gradcheck::{gradcheck_suite, two_vertex_grad_mu};

#[test]
fn suite_passes_and_is_deterministic() {
    let report = gradcheck_suite(0).unwrap();
    println!("{report}");
    for e in &report.entries {
        assert!(
            e.passed(),
            "{}: {:e} >= {:e}",
            e.component,
            e.max_rel_error,
            e.threshold
        );
    }
    assert_eq!(report, gradcheck_suite(0).unwrap());
}

#[test]
fn two_vertex_value() {
    assert!((two_vertex_grad_mu().unwrap() + 1.0 / 27.0).abs() < 1e-10);
}
