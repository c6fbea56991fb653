use crate::diffusion::{hex_digest, TrainingLog};
use crate::nn::{stream_id, AdamState, BoundParams, Graph, NnError, ParamTree, RngStream, Tensor};
use crate::phantom::Sample;

use super::metric::{dice_loss, evaluate};
use super::net::{SegNet, TrainedSegNet};
use super::SegError;

const PURPOSE_INIT: u32 = 30;
const PURPOSE_SHUFFLE: u32 = 31;

#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Epochs without a val-Dice improvement before stopping.
    pub patience: usize,
    pub threshold: f32,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            seed: 1,
            patience: 8,
            threshold: 0.5,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || !(self.lr > 0.0) {
            return Err(SegError::Config(
                "epochs, batch size, patience and lr must be positive".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SegError::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "segmentation epochs={} batch={} lr={:e} seed={} patience={} threshold={}",
            self.epochs, self.batch_size, self.lr, self.seed, self.patience, self.threshold
        )
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

fn stack(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = (samples[0].height, samples[0].width);
    let images = samples
        .iter()
        .flat_map(|s| s.image.iter().copied())
        .collect();
    let masks = samples
        .iter()
        .flat_map(|s| s.mask.iter().map(|&m| m as f32))
        .collect();
    let shape = [samples.len(), 1, h, w];
    (
        Tensor::new(&shape, images).expect("image batch"),
        Tensor::new(&shape, masks).expect("mask batch"),
    )
}

/// Adam on soft Dice. Returns the parameters of the epoch with the best mean
/// val Dice; stops once `patience` epochs pass without improvement.
pub fn train_segmentation(
    net: &SegNet,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &SegTrainConfig,
) -> Result<(ParamTree, TrainingLog), SegError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SegError::EmptySet("train"));
    }
    if val.is_empty() {
        return Err(SegError::EmptySet("val"));
    }
    if let Some(s) = val.iter().find(|s| s.provenance.is_synthetic()) {
        return Err(SegError::Synthetic {
            set: "val",
            patient: s.patient_id,
            slice: s.slice_index,
        });
    }
    let mut params = net.init(&mut RngStream::new(cfg.seed, stream_id(PURPOSE_INIT, 0)));
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut log = TrainingLog::default();
    let mut best: Option<(f32, ParamTree)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let last_good = params.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::new(cfg.seed, stream_id(PURPOSE_SHUFFLE, epoch as u32)).shuffle(&mut order);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let (images, masks) = stack(&samples);
            let step = (|| -> Result<f32, SegError> {
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, &params);
                let x = g.constant(images);
                let m = g.constant(masks);
                let probs = net.probs(&mut g, &bound, x)?;
                let loss = dice_loss(&mut g, probs, m)?;
                g.backward(loss)?;
                let grads = bound.grads(&g, &params)?;
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
                    return Err(SegError::Divergence {
                        epoch,
                        reason: e.to_string(),
                        last_good: Box::new(last_good),
                    })
                }
            }
        }
        let model = TrainedSegNet {
            net: net.clone(),
            params,
        };
        let val_dice = evaluate(&model, val, cfg.threshold, "")?.dice as f32;
        params = model.params;
        let mean = (total / batches as f64) as f32;
        log::debug!("segmentation epoch {epoch}: loss {mean:.4}, val dice {val_dice:.4}");
        log.epoch_losses.push(mean);
        log.epoch_val.push(val_dice);
        if best.as_ref().is_none_or(|(b, _)| val_dice > *b) {
            best = Some((val_dice, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok((best, log))
}
