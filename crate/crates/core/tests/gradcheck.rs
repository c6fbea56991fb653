//! Tape gradients against central finite differences, in f64.

mod common;

use common::grad_check;
use common::numeric_suite as suite;

#[test]
fn every_op_passes_finite_differences() {
    suite::gradient_checks();
}

#[test]
fn cases_cover_every_op() {
    let names: Vec<&str> = suite::grad_cases().iter().map(|c| c.name).collect();
    for op in [
        "conv2d",
        "group_norm",
        "silu",
        "sigmoid",
        "add",
        "mul",
        "scale",
        "add_channel_bias",
        "upsample2x",
        "concat",
        "linear",
        "sum",
        "mean",
        "mse",
        "soft_dice",
        "composite",
    ] {
        assert!(names.contains(&op), "missing {op}");
    }
}

#[test]
fn harness_detects_a_wrong_gradient() {
    // detach one factor of x·x; the tape then reports half the true gradient
    let x = common::rand_tensor(&mut fdm_core::nn::RngStream::new(1, 1), &[4]);
    let err = grad_check(&[x], suite::FD_STEP, |g, v| {
        let val = g.value(v[0]).clone();
        let c = g.constant(val);
        let y = g.mul(v[0], c).unwrap();
        g.sum(y)
    });
    assert!(err > 0.3, "{err}");
}

#[test]
fn conv_forward_matches_direct_loops() {
    suite::conv_forward_matches_direct_loops();
}
