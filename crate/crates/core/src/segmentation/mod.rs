//! UNet segmentation of the myocardium ring: soft-Dice training, thresholded
//! inference and the Dice metric.

mod metric;
mod net;
mod train;

pub use metric::{dice_loss, dice_score, evaluate, site_label, MetricRow, SegPredictor};
pub use net::{seg_forward, SegNet, SegNetSpec, TrainedSegNet};
pub use train::{train_segmentation, SegTrainConfig};

use crate::nn::{NnError, ParamTree};

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("invalid segmentation configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("{0}")]
    NotBinary(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("synthetic sample (patient {patient}, slice {slice}) in {set} set")]
    Synthetic {
        set: &'static str,
        patient: u32,
        slice: u32,
    },
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        last_good: Box<ParamTree>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}
