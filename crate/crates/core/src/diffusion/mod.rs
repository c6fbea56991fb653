//! Mask-conditioned DDPM: noise schedule, epsilon network, training and
//! ancestral sampling.

mod net;
mod sample;
mod schedule;
mod train;

pub use net::{EpsilonNet, EpsilonNetSpec};
pub use sample::{
    sample_batch, sample_conditional, synthesis_stream, synthesize_dataset, worker_threads,
    NoisePredictor, TrainedEpsilonNet, SAMPLING_CLIP,
};
pub use schedule::{build_schedule, q_sample, NoiseSchedule};
pub use train::{
    ddpm_loss, train_diffusion, BoundEpsilonNet, DiffusionBatch, DiffusionTrainConfig,
    EpsilonModel, TrainingLog,
};

pub use net::hex_digest;

use crate::nn::{NnError, ParamTree};
use crate::phantom::DataError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("no masks to condition on")]
    EmptyMaskSet,
    #[error("invalid conditioning mask: {0}")]
    Mask(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        last_good: Box<ParamTree>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}
