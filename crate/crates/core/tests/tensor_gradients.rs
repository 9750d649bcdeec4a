mod common;

use common::grad_cases::{all, worst, TOL};

#[test]
fn every_op_matches_finite_differences() {
    let cases = all();
    assert!(cases.len() >= 15);
    for (name, case) in &cases {
        let (seed, err) = worst(case);
        assert!(err < TOL, "{name}: seed {seed} relative error {err:e}");
    }
}
