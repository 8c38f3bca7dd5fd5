use semsplat::gradcheck::{run_all, run_suite, MODEL_SUITE, SUITES, TOLERANCE};

#[test]
fn every_backward_matches_central_differences() {
    let reports = run_all(100, 0).unwrap();
    assert_eq!(reports.len(), SUITES.len());
    for r in &reports {
        assert!(
            r.passed(100),
            "{}: max rel error {:e} over {} entries ({})",
            r.name,
            r.max_rel_error,
            r.entries,
            r.worst
        );
    }
}

#[test]
fn full_render_chain_matches_central_differences() {
    let r = run_suite(MODEL_SUITE, 40, 1).unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{} ({})", r.max_rel_error, r.worst);
}

#[test]
fn suites_are_reproducible_for_a_seed() {
    let a = run_suite("rasterizer", 10, 5).unwrap();
    let b = run_suite("rasterizer", 10, 5).unwrap();
    assert_eq!(
        (a.entries, a.redraws, a.max_rel_error),
        (b.entries, b.redraws, b.max_rel_error)
    );
}
