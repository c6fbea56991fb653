use crate::nn::{
    stream_id, AdamState, BoundParams, Graph, NnError, ParamTree, RngStream, Tensor, Var,
};
use crate::phantom::Sample;

use super::net::{hex_digest, EpsilonNet};
use super::schedule::{build_schedule, q_sample, NoiseSchedule};
use super::DiffusionError;

const PURPOSE_INIT: u32 = 10;
const PURPOSE_SHUFFLE: u32 = 11;
const PURPOSE_NOISE: u32 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 2e-3,
            seed: 1,
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(DiffusionError::Config(
                "epochs, batch size and lr must be positive".into(),
            ));
        }
        if self.steps < 10 {
            return Err(DiffusionError::Config(format!(
                "T must be at least 10, got {}",
                self.steps
            )));
        }
        build_schedule(self.steps, self.beta_min, self.beta_max).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }

    pub fn canonical(&self) -> String {
        format!(
            "diffusion epochs={} batch={} lr={:e} seed={} T={} beta_min={:e} beta_max={:e}",
            self.epochs,
            self.batch_size,
            self.lr,
            self.seed,
            self.steps,
            self.beta_min,
            self.beta_max
        )
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f32>,
    /// Validation metric per epoch, when the trainer computes one.
    pub epoch_val: Vec<f32>,
    pub steps: usize,
}

/// Anything that maps `[B, 2, H, W]` (noisy image, mask) to predicted noise on a graph.
pub trait EpsilonModel {
    fn predict(&self, g: &mut Graph, input: Var, t: &[usize]) -> Result<Var, NnError>;
}

pub struct BoundEpsilonNet<'a> {
    pub net: &'a EpsilonNet,
    pub params: BoundParams,
}

impl EpsilonModel for BoundEpsilonNet<'_> {
    fn predict(&self, g: &mut Graph, input: Var, t: &[usize]) -> Result<Var, NnError> {
        self.net.forward(g, &self.params, input, t)
    }
}

/// A training batch: clean images and masks, each `[B, 1, H, W]` flattened.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub masks: Vec<f32>,
}

impl DiffusionBatch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        let (h, w) = (samples[0].height, samples[0].width);
        let mut images = Vec::with_capacity(samples.len() * h * w);
        let mut masks = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            images.extend_from_slice(&s.image);
            masks.extend(s.mask.iter().map(|&m| m as f32));
        }
        Self {
            batch: samples.len(),
            height: h,
            width: w,
            images,
            masks,
        }
    }
}

/// Assembles `[B, 2, H, W]` from per-sample image and mask planes.
pub(crate) fn stack_with_mask(
    images: &[f32],
    masks: &[f32],
    b: usize,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    let hw = h * w;
    let mut data = Vec::with_capacity(2 * b * hw);
    for i in 0..b {
        data.extend_from_slice(&images[i * hw..(i + 1) * hw]);
        data.extend_from_slice(&masks[i * hw..(i + 1) * hw]);
    }
    Tensor::new(&[b, 2, h, w], data).expect("stacked shape")
}

/// Epsilon-prediction MSE: noise `x0` to step `t` with `eps`, predict, compare.
pub fn ddpm_loss(
    g: &mut Graph,
    model: &dyn EpsilonModel,
    batch: &DiffusionBatch,
    t: &[usize],
    eps: &[f32],
    sched: &NoiseSchedule,
) -> Result<Var, DiffusionError> {
    let (b, h, w) = (batch.batch, batch.height, batch.width);
    let hw = h * w;
    if t.len() != b || eps.len() != b * hw {
        return Err(DiffusionError::Config(
            "timesteps/noise do not match batch size".into(),
        ));
    }
    if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > sched.steps()) {
        return Err(DiffusionError::Config(format!(
            "training timestep {bad} outside [1, {}]",
            sched.steps()
        )));
    }
    let mut noisy = Vec::with_capacity(b * hw);
    for i in 0..b {
        noisy.extend(q_sample(
            &batch.images[i * hw..(i + 1) * hw],
            t[i],
            &eps[i * hw..(i + 1) * hw],
            sched,
        )?);
    }
    let input = g.constant(stack_with_mask(&noisy, &batch.masks, b, h, w));
    let target = g.constant(Tensor::new(&[b, 1, h, w], eps.to_vec())?);
    let pred = model.predict(g, input, t)?;
    let loss = g.mse(pred, target)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(DiffusionError::Nn(NnError::Divergence(format!(
            "ddpm loss is {v}"
        ))));
    }
    Ok(loss)
}

/// Adam training of the epsilon network on `train` samples.
pub fn train_diffusion(
    train: &[&Sample],
    net: &EpsilonNet,
    cfg: &DiffusionTrainConfig,
) -> Result<(ParamTree, TrainingLog), DiffusionError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DiffusionError::EmptyTrainSet);
    }
    let sched = cfg.schedule()?;
    let mut params = net.init(&mut RngStream::new(cfg.seed, stream_id(PURPOSE_INIT, 0)));
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut log = TrainingLog::default();
    let hw = train[0].height * train[0].width;
    for epoch in 0..cfg.epochs {
        let last_good = params.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::new(cfg.seed, stream_id(PURPOSE_SHUFFLE, epoch as u32)).shuffle(&mut order);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let batch = DiffusionBatch::from_samples(&samples);
            let mut rng = RngStream::new(cfg.seed, stream_id(PURPOSE_NOISE, log.steps as u32));
            let t: Vec<usize> = (0..batch.batch)
                .map(|_| 1 + rng.below(sched.steps()))
                .collect();
            let eps = rng.gaussian_vec(batch.batch * hw);
            let step = (|| -> Result<f32, DiffusionError> {
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, &params);
                let model = BoundEpsilonNet { net, params: bound };
                let loss = ddpm_loss(&mut g, &model, &batch, &t, &eps, &sched)?;
                g.backward(loss)?;
                let grads = model.params.grads(&g, &params)?;
                adam.step(&mut params, &grads)?;
                if !params.all_finite() {
                    return Err(
                        NnError::Divergence("non-finite parameters after update".into()).into(),
                    );
                }
                Ok(g.value(loss).data()[0])
            })();
            match step {
                Ok(l) => {
                    total += l as f64;
                    batches += 1;
                    log.steps += 1;
                }
                Err(e) => {
                    return Err(DiffusionError::Divergence {
                        epoch,
                        reason: e.to_string(),
                        last_good: Box::new(last_good),
                    })
                }
            }
        }
        let mean = (total / batches as f64) as f32;
        log::debug!("diffusion epoch {epoch}: loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    Ok((params, log))
}
