use scunetpp_core::verify::{layer_checks, model_check, op_checks};

fn assert_all(checks: Vec<scunetpp_core::verify::Check>) {
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_op_over_a_hundred_seeds() {
    assert_all(op_checks(0..100).unwrap());
}

#[test]
fn composite_layers() {
    assert_all(layer_checks(0..20).unwrap());
}

#[test]
fn end_to_end_micro_model() {
    assert_all((100..120).map(|s| model_check(s).unwrap()).collect());
}
