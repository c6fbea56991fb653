//! Deterministic tensor engine: reverse-mode differentiation, Adam, a
//! counter-based Gaussian RNG and the binary weight codec.

mod adam;
mod codec;
mod graph;
pub mod kernels;
pub mod layers;
mod params;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use codec::{decode_weights, encode_weights, encoded_len, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use graph::{Graph, Var};
pub use params::{kaiming_uniform, BoundParams, ParamTree};
pub use rng::{stream_id, RngStream};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error("malformed weight stream at byte {offset}: {reason}")]
    Codec { offset: usize, reason: String },
    #[error("weight stream checksum mismatch at byte {offset}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        offset: usize,
        stored: u32,
        computed: u32,
    },
}
