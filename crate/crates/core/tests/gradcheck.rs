//! Central finite-difference checks for every differentiable op. The
//! harnesses live in `common::gradchecks` so the acceptance suite can
//! sweep the same set.

mod common;

use common::gradchecks;

const TOL: f64 = 1e-5;

#[test]
fn conv2d_gradient() {
    let err = gradchecks::conv2d_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn maxpool2d_gradient() {
    let err = gradchecks::maxpool2d_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn dense_gradient() {
    let err = gradchecks::dense_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn relu_gradient_off_kink() {
    let err = gradchecks::relu_gradient_off_kink();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn concat_gradient() {
    let err = gradchecks::concat_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn global_avg_pool_gradient() {
    let err = gradchecks::global_avg_pool_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let err = gradchecks::dropout_gradient_with_fixed_mask();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn softmax_cross_entropy_gradient_vs_finite_difference() {
    let err = gradchecks::softmax_cross_entropy_gradient_vs_finite_difference();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn spatial_softmax_gradient() {
    let err = gradchecks::spatial_softmax_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn sum_channels_gradient() {
    let err = gradchecks::sum_channels_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn mul_channel_broadcast_gradient() {
    let err = gradchecks::mul_channel_broadcast_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn scale_by_scalar_gradient() {
    let err = gradchecks::scale_by_scalar_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn add_mul_pick_gradients() {
    let err = gradchecks::add_mul_pick_gradients();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn pad_replicate_gradient() {
    let err = gradchecks::pad_replicate_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}

#[test]
fn composite_conv_relu_gap_dense_ce_gradient() {
    let err = gradchecks::composite_conv_relu_gap_dense_ce_gradient();
    assert!(err < TOL, "max relative error {err:e} exceeds {TOL:e}");
}
