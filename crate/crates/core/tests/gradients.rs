use std::time::Instant;

use hdc::verify::gradcheck_suite;

#[test]
fn every_op_and_the_full_objective_pass_finite_differences() {
    let start = Instant::now();
    let reports = gradcheck_suite().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.to_string())
        .collect();
    assert!(failed.is_empty(), "failures:\n{}", failed.concat());
    assert!(reports.iter().any(|r| r.label.starts_with("hd_nce")));
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}
