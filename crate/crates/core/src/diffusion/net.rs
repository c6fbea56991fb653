//! Mask-conditioned epsilon-prediction UNet.
//!
//! Input is the noisy image concatenated with the binary mask. Three
//! resolutions (32 → 16 → 8) share one channel width; the time embedding is a
//! sinusoidal code fed through a two-layer MLP and added as a per-channel bias
//! inside every block.

use sha2::{Digest, Sha256};

use crate::nn::layers::{self, init_conv, init_linear, init_norm};
use crate::nn::{BoundParams, Graph, NnError, ParamTree, RngStream, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpsilonNetSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for EpsilonNetSpec {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_width: 32,
            time_dim: 64,
            time_hidden: 128,
        }
    }
}

impl EpsilonNetSpec {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    /// Canonical text form; the architecture hash is its digest.
    pub fn descriptor(&self) -> String {
        format!(
            "epsnet/v1 in={} width={} levels=3 temb={} hidden={} groups={} act=silu up=nearest",
            self.in_channels,
            self.base_width,
            self.time_dim,
            self.time_hidden,
            layers::GROUP_CHANNELS
        )
    }

    pub fn parse_descriptor(text: &str) -> Option<Self> {
        let mut spec = Self::default();
        let mut fields = text.split_whitespace();
        if fields.next()? != "epsnet/v1" {
            return None;
        }
        for f in fields {
            let (k, v) = f.split_once('=')?;
            match k {
                "in" => spec.in_channels = v.parse().ok()?,
                "width" => spec.base_width = v.parse().ok()?,
                "temb" => spec.time_dim = v.parse().ok()?,
                "hidden" => spec.time_hidden = v.parse().ok()?,
                _ => {}
            }
        }
        (spec.descriptor() == text).then_some(spec)
    }

    pub fn arch_hash(&self) -> String {
        hex_digest(self.descriptor().as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Blocks that take a time bias: `(name, in channels multiplier)`.
const BLOCKS: [(&str, usize); 7] = [
    ("enc0", 1),
    ("enc1a", 1),
    ("enc1b", 1),
    ("mid_a", 1),
    ("mid_b", 1),
    ("dec1", 2),
    ("dec0", 2),
];

#[derive(Debug, Clone)]
pub struct EpsilonNet {
    spec: EpsilonNetSpec,
}

impl EpsilonNet {
    pub fn new(spec: EpsilonNetSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &EpsilonNetSpec {
        &self.spec
    }

    pub fn init(&self, rng: &mut RngStream) -> ParamTree {
        let w = self.spec.base_width;
        let mut p = ParamTree::new();
        init_conv(&mut p, rng, "in.conv", self.spec.in_channels, w, 3);
        init_linear(
            &mut p,
            rng,
            "time.fc1",
            self.spec.time_dim,
            self.spec.time_hidden,
        );
        init_linear(
            &mut p,
            rng,
            "time.fc2",
            self.spec.time_hidden,
            self.spec.time_hidden,
        );
        for (name, mult) in BLOCKS {
            init_conv(&mut p, rng, &format!("{name}.conv"), w * mult, w, 3);
            init_linear(
                &mut p,
                rng,
                &format!("{name}.temb"),
                self.spec.time_hidden,
                w,
            );
            init_norm(&mut p, &format!("{name}.norm"), w);
        }
        init_conv(&mut p, rng, "down0", w, w, 3);
        init_conv(&mut p, rng, "down1", w, w, 3);
        init_conv(&mut p, rng, "out.conv", w, 1, 3);
        p
    }

    /// `(path, shape)` list of an initialized tree, without drawing weights.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.init(&mut RngStream::new(0, 0)).signature()
    }

    /// Sinusoidal embedding of integer timesteps, `[B, time_dim]`.
    pub fn time_encoding(&self, t: &[usize]) -> Tensor<f32> {
        let d = self.spec.time_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(t.len() * d);
        for &step in t {
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push((step as f64 * freq).sin() as f32);
            }
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                data.push((step as f64 * freq).cos() as f32);
            }
        }
        Tensor::new(&[t.len(), d], data).expect("embedding shape")
    }

    fn block(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        name: &str,
        x: Var,
        temb: Var,
        residual: bool,
    ) -> Result<Var, NnError> {
        let h = layers::conv(g, p, &format!("{name}.conv"), x, 1, 1)?;
        let tb = layers::linear(g, p, &format!("{name}.temb"), temb)?;
        let h = g.add_channel_bias(h, tb)?;
        let h = layers::norm(g, p, &format!("{name}.norm"), h)?;
        let h = g.silu(h);
        if residual {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }

    /// Predicted noise `[B, 1, H, W]` for input `[B, 2, H, W]` (noisy image, mask).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        input: Var,
        t: &[usize],
    ) -> Result<Var, NnError> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels || shape[0] != t.len() {
            return Err(NnError::Shape(format!(
                "epsilon net expects [{}, {}, H, W], got {shape:?}",
                t.len(),
                self.spec.in_channels
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(NnError::Shape(format!(
                "spatial size {}x{} must be divisible by 4",
                shape[2], shape[3]
            )));
        }
        let enc = g.constant(self.time_encoding(t));
        let temb = layers::linear(g, p, "time.fc1", enc)?;
        let temb = g.silu(temb);
        let temb = layers::linear(g, p, "time.fc2", temb)?;
        let temb = g.silu(temb);

        let h = layers::conv(g, p, "in.conv", input, 1, 1)?;
        let skip0 = self.block(g, p, "enc0", h, temb, true)?;
        let h = layers::conv(g, p, "down0", skip0, 2, 1)?;
        let h = self.block(g, p, "enc1a", h, temb, true)?;
        let skip1 = self.block(g, p, "enc1b", h, temb, true)?;
        let h = layers::conv(g, p, "down1", skip1, 2, 1)?;
        let h = self.block(g, p, "mid_a", h, temb, true)?;
        let h = self.block(g, p, "mid_b", h, temb, true)?;
        let h = g.upsample2x(h)?;
        let h = g.concat(h, skip1)?;
        let h = self.block(g, p, "dec1", h, temb, false)?;
        let h = g.upsample2x(h)?;
        let h = g.concat(h, skip0)?;
        let h = self.block(g, p, "dec0", h, temb, false)?;
        layers::conv(g, p, "out.conv", h, 1, 1)
    }
}
