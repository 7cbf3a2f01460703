mod common;

use common::gradsuite;

fn assert_all(cases: Vec<gradsuite::GradCase>) {
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:e} > {:e}", c.name, c.err, c.tol))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn primitive_operations() {
    assert_all(gradsuite::op_cases(1));
}

#[test]
fn composite_layers() {
    assert_all(gradsuite::layer_cases(2));
}

#[test]
fn miniature_model() {
    assert_all(vec![gradsuite::model_case(3, 12)]);
}
