mod common;

use common::{composite_error, primitive_errors, Composite};

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    let errs = primitive_errors(10).unwrap();
    for (name, e) in &errs {
        assert!(*e < TOL, "{name}: relative error {e:e}");
    }
    assert!(errs.len() >= 20);
}

#[test]
fn reference_loss_gradients() {
    let e = composite_error(Composite::Ref, 10, 4).unwrap();
    assert!(e < TOL, "{e:e}");
}

#[test]
fn head_loss_gradients() {
    let e = composite_error(Composite::Head, 10, 4).unwrap();
    assert!(e < TOL, "{e:e}");
}

#[test]
fn total_loss_gradients() {
    let e = composite_error(Composite::Total, 10, 4).unwrap();
    assert!(e < TOL, "{e:e}");
}
