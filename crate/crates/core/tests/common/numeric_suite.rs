//! Numeric property checks shared by the unit-level tests and the acceptance run.

use fdm_core::diffusion::{
    build_schedule, q_sample, sample_conditional, DiffusionError, NoisePredictor,
};
use fdm_core::nn::{Graph, RngStream, Tensor, Var};
use fdm_core::phantom::{generate_site_dataset, SiteProfile};
use fdm_core::segmentation::dice_score;

use super::{
    alpha_bar_product, dice_by_counting, grad_check, naive_conv2d, rand_tensor,
    reference_zero_sampler,
};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn rng(i: u64) -> RngStream {
    RngStream::new(99, i)
}

fn t(i: u64, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(&mut rng(i), shape)
}

/// Projects a tensor output onto fixed random weights so the loss is scalar
/// and every output element contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&mut rng(1000 + seed), &shape));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn binary_mask(shape: &[usize], keep: impl Fn(usize) -> bool) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| keep(i) as u8 as f64).collect()).unwrap()
}

/// One case per differentiable op, plus a composite network fragment.
pub fn grad_cases() -> Vec<GradCase> {
    let probs = t(26, &[2, 1, 3, 3]).map(|v| 0.5 + 0.4 * v);
    vec![
        case(
            "conv2d",
            vec![t(1, &[2, 3, 5, 5]), t(2, &[4, 3, 3, 3]), t(3, &[4])],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                project(g, y, 1)
            },
        ),
        case(
            "conv2d stride 2",
            vec![t(4, &[1, 2, 6, 6]), t(5, &[3, 2, 3, 3]), t(6, &[3])],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                project(g, y, 2)
            },
        ),
        case(
            "conv2d 1x1",
            vec![t(7, &[2, 4, 3, 3]), t(8, &[2, 4, 1, 1]), t(9, &[2])],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 0).unwrap();
                project(g, y, 3)
            },
        ),
        case(
            "group_norm",
            vec![t(13, &[2, 16, 3, 3]), t(14, &[16]), t(15, &[16])],
            |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 8).unwrap();
                project(g, y, 4)
            },
        ),
        case("silu", vec![t(16, &[3, 7])], |g, v| {
            let y = g.silu(v[0]);
            project(g, y, 5)
        }),
        case("sigmoid", vec![t(16, &[3, 7])], |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 6)
        }),
        case("add", vec![t(17, &[2, 5]), t(18, &[2, 5])], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 7)
        }),
        case("mul", vec![t(17, &[2, 5]), t(18, &[2, 5])], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 8)
        }),
        case("scale", vec![t(17, &[2, 5])], |g, v| {
            let y = g.scale(v[0], -2.5);
            project(g, y, 9)
        }),
        case(
            "add_channel_bias",
            vec![t(19, &[2, 3, 2, 2]), t(20, &[2, 3])],
            |g, v| {
                let y = g.add_channel_bias(v[0], v[1]).unwrap();
                project(g, y, 10)
            },
        ),
        case("upsample2x", vec![t(19, &[2, 3, 2, 2])], |g, v| {
            let y = g.upsample2x(v[0]).unwrap();
            project(g, y, 11)
        }),
        case(
            "concat",
            vec![t(21, &[2, 3, 2, 2]), t(22, &[2, 1, 2, 2])],
            |g, v| {
                let y = g.concat(v[0], v[1]).unwrap();
                project(g, y, 12)
            },
        ),
        case(
            "linear",
            vec![t(23, &[3, 5]), t(24, &[4, 5]), t(25, &[4])],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                project(g, y, 13)
            },
        ),
        case("sum", vec![t(26, &[2, 1, 3, 3])], |g, v| g.sum(v[0])),
        case("mean", vec![t(26, &[2, 1, 3, 3])], |g, v| {
            let m = g.mean(v[0]);
            g.scale(m, 3.0)
        }),
        case(
            "mse",
            vec![t(26, &[2, 1, 3, 3]), t(27, &[2, 1, 3, 3])],
            |g, v| g.mse(v[0], v[1]).unwrap(),
        ),
        case("soft_dice", vec![probs], |g, v| {
            let m = g.constant(binary_mask(&[2, 1, 3, 3], |i| (i * 7) % 3 == 0));
            g.soft_dice(v[0], m, 1.0).unwrap()
        }),
        case(
            "composite",
            vec![
                t(30, &[2, 2, 4, 4]),
                t(31, &[8, 2, 3, 3]),
                t(32, &[8]),
                t(33, &[2, 8]),
                t(34, &[8]),
                t(35, &[8]),
                t(36, &[8, 8, 3, 3]),
                t(37, &[8]),
                t(38, &[1, 16, 1, 1]),
                t(39, &[1]),
            ],
            // conv → time bias → norm → silu → down → up → skip concat → 1×1 conv → sigmoid → dice
            |g, v| {
                let h = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                let h = g.add_channel_bias(h, v[3]).unwrap();
                let h = g.group_norm(h, v[4], v[5], 8).unwrap();
                let skip = g.silu(h);
                let d = g.conv2d(skip, v[6], v[7], 2, 1).unwrap();
                let u = g.upsample2x(d).unwrap();
                let c = g.concat(u, skip).unwrap();
                let logits = g.conv2d(c, v[8], v[9], 1, 0).unwrap();
                let p = g.sigmoid(logits);
                let m = g.constant(binary_mask(&[2, 1, 4, 4], |i| i % 5 < 2));
                g.soft_dice(p, m, 1.0).unwrap()
            },
        ),
    ]
}

pub fn gradient_checks() {
    for c in grad_cases() {
        let err = grad_check(&c.inputs, FD_STEP, &c.build);
        assert!(err < GRAD_TOL, "{}: relative error {err:e}", c.name);
    }
}

pub fn conv_forward_matches_direct_loops() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3), (2, 2, 5)] {
        let x = t(10, &[2, 3, 7, 6]);
        let w = t(11, &[4, 3, k, k]);
        let b = t(12, &[4]);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (want, ho, wo) = naive_conv2d(
            x.data(),
            [2, 3, 7, 6],
            w.data(),
            4,
            k,
            b.data(),
            stride,
            pad,
        );
        assert_eq!(g.shape(y), &[2, 4, ho, wo]);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!(
                (a - e).abs() < 1e-12,
                "stride {stride} pad {pad} k {k}: {a} vs {e}"
            );
        }
    }
}

pub fn schedule_matches_direct_product() {
    let s = build_schedule(200, 1e-4, 0.02).unwrap();
    let worst = (0..=200)
        .map(|t| (s.alpha_bar(t) - alpha_bar_product(200, 1e-4, 0.02, t)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-7, "max |d alpha_bar| = {worst:e}");
}

pub fn q_sample_moments_monte_carlo() {
    let s = build_schedule(200, 1e-4, 0.02).unwrap();
    let n = 10_000;
    for (t, x0) in [(1usize, 0.3f32), (50, 0.8), (200, 0.5)] {
        let mut rng = RngStream::new(17, t as u64);
        let eps = rng.gaussian_vec(n);
        let xt = q_sample(&vec![x0; n], t, &eps, &s).unwrap();
        let ab = alpha_bar_product(200, 1e-4, 0.02, t);
        let want_mean = ab.sqrt() * x0 as f64;
        let want_var = 1.0 - ab;
        let mean = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "t={t}: mean {mean} vs {want_mean}"
        );
        assert!(
            (var - want_var).abs() < 3.0 * se_var,
            "t={t}: var {var} vs {want_var}"
        );
    }
}

pub struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(
        &self,
        noisy: &[f32],
        _: &[f32],
        _: usize,
        _: usize,
        _: usize,
        _: usize,
    ) -> Result<Vec<f32>, DiffusionError> {
        Ok(vec![0.0; noisy.len()])
    }
}

pub fn zero_stub_sampling_matches_reference_loop() {
    let ds = generate_site_dataset(&SiteProfile::hospital_b(), 5, 1, 3).unwrap();
    let sched = build_schedule(200, 1e-4, 0.02).unwrap();
    for (i, s) in ds.samples().iter().enumerate() {
        let seed = i as u64;
        let got = sample_conditional(
            &ZeroNoise,
            &s.mask,
            32,
            32,
            &sched,
            &mut RngStream::new(seed, 42),
        )
        .unwrap();
        let want = reference_zero_sampler(1024, 200, 1e-4, 0.02, &mut RngStream::new(seed, 42));
        let worst = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "seed {seed}: max diff {worst:e}");
    }
}

pub fn dice_matches_pixel_counting_on_random_masks() {
    let mut rng = RngStream::new(8, 8);
    for i in 0..1000 {
        // vary density so empty and full masks show up too
        let density = (i % 11) as f32 / 10.0;
        let a: Vec<u8> = (0..64)
            .map(|_| (rng.next_uniform() < density) as u8)
            .collect();
        let b: Vec<u8> = (0..64)
            .map(|_| (rng.next_uniform() < 1.0 - density) as u8)
            .collect();
        assert_eq!(
            dice_score(&a, &b).unwrap(),
            dice_by_counting(&a, &b),
            "pair {i}"
        );
    }
}
