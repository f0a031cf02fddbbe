mod common;

use common::{gradient_sweep, FD_TOL};

#[test]
fn every_op_and_composite_loss_matches_central_differences() {
    let report = gradient_sweep(100, 2024);
    let bad: Vec<_> = report.iter().filter(|(_, e)| !(*e <= FD_TOL)).collect();
    assert!(bad.is_empty(), "relative errors above {FD_TOL}: {bad:?}");
}
