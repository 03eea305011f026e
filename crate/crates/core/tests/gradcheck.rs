//! Gradient integrity for the autodiff engine: every differentiable op is
//! checked against central finite differences in 64-bit precision.

use t2md_core::verify::op_grad_suite;

#[test]
fn every_op_gradient_matches_finite_differences() {
    let reports = op_grad_suite(20);
    assert!(!reports.is_empty());
    for r in &reports {
        assert!(
            r.pass(),
            "{}: max rel err {:.3e} over {} cases (tol {:.0e})",
            r.name,
            r.max_err,
            r.cases,
            r.tol
        );
    }
}
