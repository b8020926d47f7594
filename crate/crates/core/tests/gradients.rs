use scott_core::gradcheck::{cd_loss_suite, disc_forward_suite, dsm_loss_suite, mlp_backward_suite, rel_error};

const TOL: f64 = 1e-4;

#[test]
fn relative_error_scale() {
    assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((rel_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
}

#[test]
fn mlp_backward_matches_finite_differences() {
    let r = mlp_backward_suite(100, 1).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn dsm_gradient_matches_finite_differences() {
    let r = dsm_loss_suite(100, 2).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn cd_gradient_matches_finite_differences() {
    let r = cd_loss_suite(100, 3).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let r = disc_forward_suite(100, 4).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}
