//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fdm_core::nn::{Graph, RngStream, Tensor, Var};

pub mod federation_suite;
pub mod numeric_suite;

/// Random f64 tensor with entries in [-1, 1).
pub fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.uniform_range(-1.0, 1.0) as f64)
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Largest relative error between the tape gradient and central differences,
/// over every input element. `build` maps the input leaves to a scalar loss.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Direct convolution, `[N, Cin, H, W]` * `[Cout, Cin, K, K]` with zero padding.
pub fn naive_conv2d(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    cout: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let [n, cin, h, wd] = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((s * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Dice by counting pixels one at a time.
pub fn dice_by_counting(pred: &[u8], truth: &[u8]) -> f64 {
    let mut both = 0u64;
    let mut p = 0u64;
    let mut t = 0u64;
    for i in 0..pred.len() {
        if pred[i] == 1 {
            p += 1;
        }
        if truth[i] == 1 {
            t += 1;
        }
        if pred[i] == 1 && truth[i] == 1 {
            both += 1;
        }
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    }
}

/// `alpha_bar_t` as an explicit product of `1 - beta_s` for `s = 1..=t`.
pub fn alpha_bar_product(steps: usize, beta_min: f64, beta_max: f64, t: usize) -> f64 {
    (1..=t)
        .map(|s| {
            let frac = (s - 1) as f64 / (steps - 1) as f64;
            1.0 - (beta_min + frac * (beta_max - beta_min))
        })
        .product()
}

/// Textbook DDPM ancestral loop with a model that always predicts zero noise.
/// Draws `x_T` and then one fresh normal vector per step `t > 1` from `stream`.
pub fn reference_zero_sampler(
    hw: usize,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    stream: &mut RngStream,
) -> Vec<f32> {
    let mut x = stream.gaussian_vec(hw);
    for t in (1..=steps).rev() {
        let beta = beta_min + (t - 1) as f64 / (steps - 1) as f64 * (beta_max - beta_min);
        let alpha = 1.0 - beta;
        let z = if t > 1 {
            stream.gaussian_vec(hw)
        } else {
            vec![0.0; hw]
        };
        for (v, zv) in x.iter_mut().zip(z) {
            // eps_hat = 0, so the mean is x / sqrt(alpha).
            let next = (*v as f64 / alpha.sqrt() + beta.sqrt() * zv as f64) as f32;
            *v = next.clamp(-1.5, 2.5);
        }
    }
    x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}
