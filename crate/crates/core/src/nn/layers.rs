//! Parameter creation and forward helpers shared by the two networks.

use super::graph::{Graph, Var};
use super::params::{kaiming_uniform, BoundParams, ParamTree};
use super::rng::RngStream;
use super::tensor::Tensor;
use super::NnError;

/// Channels per group-norm group.
pub const GROUP_CHANNELS: usize = 8;

pub fn init_conv(
    tree: &mut ParamTree,
    rng: &mut RngStream,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    tree.insert(
        format!("{name}.weight"),
        kaiming_uniform(&[cout, cin, k, k], rng),
    )
    .expect("unique path");
    tree.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
        .expect("unique path");
}

pub fn init_norm(tree: &mut ParamTree, name: &str, c: usize) {
    tree.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0))
        .expect("unique path");
    tree.insert(format!("{name}.beta"), Tensor::zeros(&[c]))
        .expect("unique path");
}

pub fn init_linear(tree: &mut ParamTree, rng: &mut RngStream, name: &str, din: usize, dout: usize) {
    tree.insert(format!("{name}.weight"), kaiming_uniform(&[dout, din], rng))
        .expect("unique path");
    tree.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))
        .expect("unique path");
}

pub fn conv(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var, NnError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

pub fn norm(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var, NnError> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.group_norm(x, gamma, beta, GROUP_CHANNELS)
}

pub fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var, NnError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.linear(x, w, b)
}
