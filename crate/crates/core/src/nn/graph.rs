//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly as it is applied. `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. Leaves created with [`Graph::param`] require gradients; leaves created
//! with [`Graph::constant`] do not.

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    SoftDice {
        probs: Var,
        mask: Var,
        smooth: S,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`; zeros when
    /// `v` did not participate.
    pub fn grad(&self, v: Var) -> Vec<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.nodes[v.0].value.len()],
        }
    }

    /// Copy of the node value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<S> {
        let mut t = self.nodes[v.0].value.clone();
        t.set_grad(self.grad(v)).expect("gradient mirrors value");
        t
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!(
                "{op}: operand shapes differ, {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    fn rank4(&self, v: Var, op: &str, what: &str) -> Result<[usize; 4], NnError> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(shape_err(format!(
                "{op}: {what} must be [N, C, H, W], got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let [n, cin, h, w] = self.rank4(input, "conv2d", "input")?;
        let [cout, kcin, kh, kw] = self.rank4(kernel, "conv2d", "kernel")?;
        if kcin != cin {
            return Err(shape_err(format!(
                "conv2d: input has {cin} channels (dim 1) but kernel expects {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(format!(
                "conv2d: kernel height/width must be odd, got {kh}x{kw}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err(format!(
                "conv2d: bias shape {:?} does not match output channels {cout}",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv2d: stride must be at least 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![S::zero(); n * cout * p];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); k * p]
        };
        for s in 0..n {
            let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
            let os = &mut out[s * cout * p..(s + 1) * cout * p];
            for (c, row) in os.chunks_exact_mut(p).enumerate() {
                row.fill(b[c]);
            }
            if geom.is_pointwise() {
                kernels::gemm_nn(cout, k, p, wt, xs, os);
            } else {
                kernels::im2col(&geom, xs, &mut col);
                kernels::gemm_nn(cout, k, p, wt, &col, os);
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: n,
                cout,
            },
            rg,
        ))
    }

    /// Group normalization with `channels_per_group` channels in each group.
    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        channels_per_group: usize,
    ) -> Result<Var, NnError> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(shape_err(format!(
                "group_norm: input must be [N, C, ...], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        if channels_per_group == 0 || c % channels_per_group != 0 {
            return Err(shape_err(format!(
                "group_norm: {c} channels (dim 1) not divisible into groups of {channels_per_group}"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!(
                "group_norm: gamma/beta must have shape [{c}]"
            )));
        }
        let groups = c / channels_per_group;
        let hw: usize = s[2..].iter().product();
        let span = channels_per_group * hw;
        let eps = S::lit(1e-5);
        let x = self.value(input).data();
        let ga = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![S::zero(); x.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let count = S::lit(span as f64);
        for i in 0..n * groups {
            let seg = &x[i * span..(i + 1) * span];
            let m = seg.iter().copied().sum::<S>() / count;
            let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<S>() / count;
            let r = S::one() / (var + eps).sqrt();
            let g = i % groups;
            for (j, (&v, o)) in seg
                .iter()
                .zip(&mut out[i * span..(i + 1) * span])
                .enumerate()
            {
                let ch = g * channels_per_group + j / hw;
                *o = (v - m) * r * ga[ch] + be[ch];
            }
            mean.push(m);
            rstd.push(r);
        }
        let value = Tensor::new(&s, out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (S::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to an `[N, C, H, W]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let [n, c, h, w] = self.rank4(x, "add_channel_bias", "input")?;
        if self.shape(bias) != [n, c] {
            return Err(shape_err(format!(
                "add_channel_bias: bias shape {:?} must be [{n}, {c}]",
                self.shape(bias)
            )));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .zip(b)
            .flat_map(|(plane, &bv)| plane.iter().map(move |&v| v + bv))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NnError> {
        let [n, c, h, w] = self.rank4(x, "upsample2x", "input")?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n * c * 4 * h * w];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Channel concatenation of two `[N, C, H, W]` maps.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let [n, ca, h, w] = self.rank4(a, "concat", "first operand")?;
        let [nb, cb, hb, wb] = self.rank4(b, "concat", "second operand")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(format!(
                "concat: batch/spatial dims differ, [{n}, _, {h}, {w}] vs [{nb}, _, {hb}, {wb}]"
            )));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if self.shape(b) != [dout] {
            return Err(shape_err(format!("linear: bias must have shape [{dout}]")));
        }
        let bias = self.value(b).data();
        let mut out: Vec<S> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm_nt(
            n,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        let value = Tensor::new(&[n, dout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<S>() / S::lit(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s =
            p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / S::lit(p.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target }, rg))
    }

    /// Soft Dice loss averaged over the batch (dim 0):
    /// `1 − (2·Σ p·m + s) / (Σ p + Σ m + s)` per sample.
    pub fn soft_dice(&mut self, probs: Var, mask: Var, smooth: S) -> Result<Var, NnError> {
        self.same_shape(probs, mask, "soft_dice")?;
        let n = self.shape(probs)[0];
        let (p, m) = (self.value(probs).data(), self.value(mask).data());
        let per = p.len() / n;
        let mut total = S::zero();
        for s in 0..n {
            let (inter, denom) = dice_terms(
                &p[s * per..(s + 1) * per],
                &m[s * per..(s + 1) * per],
                smooth,
            );
            total += S::one() - inter / denom;
        }
        let value = Tensor::scalar(total / S::lit(n as f64));
        let rg = self.rg(&[probs, mask]);
        Ok(self.push(
            value,
            Op::SoftDice {
                probs,
                mask,
                smooth,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(loss_shape));
        }
        if !self.value(loss).is_finite() {
            return Err(NnError::Divergence("loss is not finite".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&node.op, &self.grads[i]) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::Divergence(format!(
                        "non-finite gradient at node {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, dy: &[S]) {
        // Each arm computes input contributions from immutable borrows first,
        // then accumulates.
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cout,
            } => {
                let (input, kernel, bias, geom, batch, cout) =
                    (*input, *kernel, *bias, *geom, *batch, *cout);
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let plane_in = geom.cin * geom.h * geom.w;
                let x = self.value(input).data();
                let wt = self.value(kernel).data();
                let want_x = self.needs(input);
                let mut dw = vec![S::zero(); cout * k];
                let mut db = vec![S::zero(); cout];
                let mut dx = if want_x {
                    vec![S::zero(); batch * plane_in]
                } else {
                    Vec::new()
                };
                let mut col = vec![S::zero(); if geom.is_pointwise() { 0 } else { k * p }];
                let mut dcol = vec![
                    S::zero();
                    if want_x && !geom.is_pointwise() {
                        k * p
                    } else {
                        0
                    }
                ];
                for s in 0..batch {
                    let xs = &x[s * plane_in..(s + 1) * plane_in];
                    let dys = &dy[s * cout * p..(s + 1) * cout * p];
                    for (c, row) in dys.chunks_exact(p).enumerate() {
                        db[c] += row.iter().copied().sum::<S>();
                    }
                    if geom.is_pointwise() {
                        kernels::gemm_nt(cout, p, k, dys, xs, &mut dw);
                        if want_x {
                            kernels::gemm_tn(
                                k,
                                cout,
                                p,
                                wt,
                                dys,
                                &mut dx[s * plane_in..(s + 1) * plane_in],
                            );
                        }
                    } else {
                        kernels::im2col(&geom, xs, &mut col);
                        kernels::gemm_nt(cout, p, k, dys, &col, &mut dw);
                        if want_x {
                            dcol.fill(S::zero());
                            kernels::gemm_tn(k, cout, p, wt, dys, &mut dcol);
                            kernels::col2im_add(
                                &geom,
                                &dcol,
                                &mut dx[s * plane_in..(s + 1) * plane_in],
                            );
                        }
                    }
                }
                if want_x {
                    self.accumulate(input, dx);
                }
                self.accumulate(kernel, dw);
                self.accumulate(bias, db);
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (input, gamma, beta, groups) = (*input, *gamma, *beta, *groups);
                let s = self.shape(input);
                let c = s[1];
                let hw: usize = s[2..].iter().product();
                let cpg = c / groups;
                let span = cpg * hw;
                let x = self.value(input).data();
                let ga = self.value(gamma).data();
                let mut dx = vec![S::zero(); x.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let count = S::lit(span as f64);
                let mut xhat = vec![S::zero(); span];
                let mut dxhat = vec![S::zero(); span];
                for seg in 0..x.len() / span {
                    let g = seg % groups;
                    let (m, r) = (mean[seg], rstd[seg]);
                    let xs = &x[seg * span..(seg + 1) * span];
                    let dys = &dy[seg * span..(seg + 1) * span];
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in 0..span {
                        let ch = g * cpg + j / hw;
                        xhat[j] = (xs[j] - m) * r;
                        dxhat[j] = dys[j] * ga[ch];
                        dgamma[ch] += dys[j] * xhat[j];
                        dbeta[ch] += dys[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat[j];
                    }
                    let (md, mdx) = (sum_d / count, sum_dx / count);
                    for (j, o) in dx[seg * span..(seg + 1) * span].iter_mut().enumerate() {
                        *o = r * (dxhat[j] - md - xhat[j] * mdx);
                    }
                }
                self.accumulate(input, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Silu(x) => {
                let x = *x;
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        let sg = sigmoid(v);
                        g * sg * (S::one() + v * (S::one() - sg))
                    })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y * (S::one() - y))
                    .collect();
                self.accumulate(x, d);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = self
                    .value(b)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| v * g)
                    .collect();
                let db = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| v * g)
                    .collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(x, f) => {
                let (x, f) = (*x, *f);
                self.accumulate(x, dy.iter().map(|&g| g * f).collect());
            }
            Op::AddChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let db = dy
                    .chunks_exact(hw)
                    .map(|plane| plane.iter().copied().sum::<S>())
                    .collect();
                self.accumulate(x, dy.to_vec());
                self.accumulate(bias, db);
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![S::zero(); self.value(x).len()];
                for (plane, src) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = self.shape(b)[1];
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&dy[base..base + ca * hw]);
                    db.extend_from_slice(&dy[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.shape(x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(w)[0];
                let mut dx = vec![S::zero(); n * din];
                kernels::gemm_nn(n, dout, din, dy, self.value(w).data(), &mut dx);
                let mut dw = vec![S::zero(); dout * din];
                kernels::gemm_tn(dout, n, din, dy, self.value(x).data(), &mut dw);
                let mut db = vec![S::zero(); dout];
                for row in dy.chunks_exact(dout) {
                    for (a, &g) in db.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::Sum(x) => {
                let x = *x;
                let n = self.value(x).len();
                self.accumulate(x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.value(x).len();
                self.accumulate(x, vec![dy[0] / S::lit(n as f64); n]);
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let k = dy[0] * S::lit(2.0 / p.len() as f64);
                let dp: Vec<S> = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
                let dt = dp.iter().map(|&v| -v).collect();
                self.accumulate(pred, dp);
                self.accumulate(target, dt);
            }
            Op::SoftDice {
                probs,
                mask,
                smooth,
            } => {
                let (probs, mask, smooth) = (*probs, *mask, *smooth);
                let n = self.shape(probs)[0];
                let p = self.value(probs).data();
                let m = self.value(mask).data();
                let per = p.len() / n;
                let scale = dy[0] / S::lit(n as f64);
                let two = S::lit(2.0);
                let mut dp = vec![S::zero(); p.len()];
                let mut dm = vec![S::zero(); p.len()];
                for s in 0..n {
                    let range = s * per..(s + 1) * per;
                    let (inter, denom) = dice_terms(&p[range.clone()], &m[range.clone()], smooth);
                    let d2 = denom * denom;
                    for j in range {
                        dp[j] = -scale * (two * m[j] * denom - inter) / d2;
                        dm[j] = -scale * (two * p[j] * denom - inter) / d2;
                    }
                }
                self.accumulate(probs, dp);
                self.accumulate(mask, dm);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// `(2·Σ p·m + s, Σ p + Σ m + s)`
fn dice_terms<S: Scalar>(p: &[S], m: &[S], smooth: S) -> (S, S) {
    let mut inter = S::zero();
    let mut sp = S::zero();
    let mut sm = S::zero();
    for (&a, &b) in p.iter().zip(m) {
        inter += a * b;
        sp += a;
        sm += b;
    }
    (S::lit(2.0) * inter + smooth, sp + sm + smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), vec![2.0, -4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        let unused = g.param(t(&[3], vec![5.0, 6.0, 7.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused), vec![0.0; 3]);
        assert_eq!(g.tensor_with_grad(unused).grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_loss_is_divergence() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(&[2], vec![f32::NAN, 1.0]).unwrap());
        let loss = g.sum(x);
        assert!(matches!(g.backward(loss), Err(NnError::Divergence(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_same_padding_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let y2 = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let err = g.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, k, b, 1, 0).is_err());
    }

    #[test]
    fn soft_dice_matches_formula() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]));
        let m = g.constant(t(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]));
        let l = g.soft_dice(p, m, 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let q = g.constant(t(&[1, 4], vec![0.0, 0.0, 1.0, 1.0]));
        let l = g.soft_dice(q, m, 1.0).unwrap();
        assert!((g.value(l).data()[0] - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
    }
}
