mod common;

#[test]
fn every_operation_passes_finite_differences() {
    let outcomes = common::gradient_suite(3);
    for o in &outcomes {
        eprintln!("{o:?}");
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| o.worst.is_nan() || o.worst >= 1e-4).collect();
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
    assert!(outcomes.len() >= 20);
}
