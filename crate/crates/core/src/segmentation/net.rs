use crate::nn::layers::{self, init_conv, init_norm};
use crate::nn::{BoundParams, Graph, NnError, ParamTree, RngStream, Tensor, Var};

use super::SegError;

/// Three-level UNet: widths `w, 2w, 4w` at full, half and quarter resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetSpec {
    pub in_channels: usize,
    pub base_width: usize,
}

impl Default for SegNetSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
        }
    }
}

impl SegNetSpec {
    pub fn descriptor(&self) -> String {
        format!(
            "segnet/v1 in={} width={} levels=3 groups={} act=silu up=nearest",
            self.in_channels,
            self.base_width,
            layers::GROUP_CHANNELS
        )
    }

    pub fn parse_descriptor(text: &str) -> Option<Self> {
        let mut spec = Self::default();
        let mut fields = text.split_whitespace();
        if fields.next()? != "segnet/v1" {
            return None;
        }
        for f in fields {
            let (k, v) = f.split_once('=')?;
            match k {
                "in" => spec.in_channels = v.parse().ok()?,
                "width" => spec.base_width = v.parse().ok()?,
                _ => {}
            }
        }
        (spec.descriptor() == text).then_some(spec)
    }

    pub fn arch_hash(&self) -> String {
        crate::diffusion::hex_digest(self.descriptor().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    spec: SegNetSpec,
}

impl SegNet {
    pub fn new(spec: SegNetSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SegNetSpec {
        &self.spec
    }

    /// `(name, in channels, out channels)` of every conv-norm-SiLU block.
    fn blocks(&self) -> [(&'static str, usize, usize); 6] {
        let w = self.spec.base_width;
        [
            ("enc0a", self.spec.in_channels, w),
            ("enc0b", w, w),
            ("enc1", 2 * w, 2 * w),
            ("mid", 4 * w, 4 * w),
            ("dec1", 4 * w + 2 * w, 2 * w),
            ("dec0", 2 * w + w, w),
        ]
    }

    pub fn init(&self, rng: &mut RngStream) -> ParamTree {
        let w = self.spec.base_width;
        let mut p = ParamTree::new();
        for (name, cin, cout) in self.blocks() {
            init_conv(&mut p, rng, &format!("{name}.conv"), cin, cout, 3);
            init_norm(&mut p, &format!("{name}.norm"), cout);
        }
        init_conv(&mut p, rng, "down0", w, 2 * w, 3);
        init_conv(&mut p, rng, "down1", 2 * w, 4 * w, 3);
        init_conv(&mut p, rng, "out.conv", w, 1, 1);
        p
    }

    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.init(&mut RngStream::new(0, 0)).signature()
    }

    fn block(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var, NnError> {
        let h = layers::conv(g, p, &format!("{name}.conv"), x, 1, 1)?;
        let h = layers::norm(g, p, &format!("{name}.norm"), h)?;
        Ok(g.silu(h))
    }

    /// Logits `[B, 1, H, W]` for images `[B, 1, H, W]`.
    pub fn logits(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<Var, NnError> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(NnError::Shape(format!(
                "segmentation net expects [B, {}, H, W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(NnError::Shape(format!(
                "spatial size {}x{} must be divisible by 4",
                shape[2], shape[3]
            )));
        }
        let h = Self::block(g, p, "enc0a", input)?;
        let skip0 = Self::block(g, p, "enc0b", h)?;
        let h = layers::conv(g, p, "down0", skip0, 2, 1)?;
        let skip1 = Self::block(g, p, "enc1", h)?;
        let h = layers::conv(g, p, "down1", skip1, 2, 1)?;
        let h = Self::block(g, p, "mid", h)?;
        let h = g.upsample2x(h)?;
        let h = g.concat(h, skip1)?;
        let h = Self::block(g, p, "dec1", h)?;
        let h = g.upsample2x(h)?;
        let h = g.concat(h, skip0)?;
        let h = Self::block(g, p, "dec0", h)?;
        layers::conv(g, p, "out.conv", h, 1, 0)
    }

    pub fn probs(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<Var, NnError> {
        let logits = self.logits(g, p, input)?;
        Ok(g.sigmoid(logits))
    }
}

/// Foreground probabilities for `batch` images of `height × width`, flattened.
pub fn seg_forward(
    net: &SegNet,
    params: &ParamTree,
    images: &[f32],
    batch: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f32>, SegError> {
    if images.len() != batch * height * width || batch == 0 {
        return Err(SegError::Shape(format!(
            "{} values do not form {batch} images of {height}x{width}",
            images.len()
        )));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind_frozen(&mut g, params);
    let x = g.constant(Tensor::new(&[batch, 1, height, width], images.to_vec())?);
    let probs = net.probs(&mut g, &bound, x)?;
    Ok(g.value(probs).data().to_vec())
}

/// A segmentation net together with trained weights.
#[derive(Debug, Clone)]
pub struct TrainedSegNet {
    pub net: SegNet,
    pub params: ParamTree,
}

impl super::SegPredictor for TrainedSegNet {
    fn predict_probs(
        &self,
        images: &[f32],
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Vec<f32>, SegError> {
        seg_forward(&self.net, &self.params, images, batch, height, width)
    }
}
