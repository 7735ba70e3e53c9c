use vjdd_core::gradsuite::suite;

#[test]
fn every_stage_matches_finite_differences() {
    let entries = suite(7).unwrap();
    let mut failed = Vec::new();
    for e in &entries {
        println!(
            "{:<36} rel {:.2e} (max |g| {:.2e}, tol {:.0e})",
            e.name,
            e.check.relative_error(),
            e.check.max_abs(),
            e.tolerance
        );
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient mismatch: {failed:?}");
}
