//! Every differentiable operator against 64-bit central finite differences.

use ntex_core::gradcheck::{run_op_suite, TOLERANCE};

#[test]
fn all_operators_match_finite_differences() {
    let results = run_op_suite(20).unwrap();
    let failures: Vec<_> = results.iter().filter(|(_, e)| !(*e < TOLERANCE)).collect();
    for (name, err) in &results {
        println!("{name:28} worst rel error {err:.2e}");
    }
    assert!(failures.is_empty(), "{failures:?}");
}
