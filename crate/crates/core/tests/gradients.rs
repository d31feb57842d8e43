use condeepmod::verify::{gradient_suite, GRAD_TOLERANCE};

#[test]
fn every_op_and_loss_matches_central_differences() {
    let cases = gradient_suite(2024, 10).unwrap();
    assert!(cases.len() >= 20);
    let failures: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:.3e}", c.name, c.worst))
        .collect();
    assert!(failures.is_empty(), "relative error above {GRAD_TOLERANCE}: {failures:?}");
    assert!(cases.iter().all(|c| c.seeds == 10));
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(gradient_suite(7, 2).unwrap(), gradient_suite(7, 2).unwrap());
}
