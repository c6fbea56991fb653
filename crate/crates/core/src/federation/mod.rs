//! Model exchange between sites: weights-only artifacts, the privacy audit,
//! and a small TCP registry that stores and serves artifacts by name.

mod artifact;
mod audit;
mod registry;
mod wire;

pub use artifact::{
    encode_raw_artifact, export_artifact, import_artifact, parse_artifact, ArtifactBytes,
    ArtifactKind, ArtifactMetadata, RawArtifact, ScheduleMeta, ARTIFACT_EXTENSION, ARTIFACT_MAGIC,
    ARTIFACT_VERSION, HEADER_LEN, METADATA_CAP,
};
pub use audit::{privacy_audit, AuditFinding, AuditReport, AuditRule, LEAK_WINDOW};
pub use registry::{
    list_artifacts, pull_artifact, push_artifact, validate_name, IndexEntry, RegistryHandle,
    RegistryIndex, RegistryServer,
};
pub use wire::{read_frame, write_frame, Frame, MsgType, FRAME_MAGIC, MAX_FRAME};

use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("metadata is {len} bytes, over the {cap}-byte cap")]
    MetadataTooLarge { len: usize, cap: usize },
    #[error("corrupt artifact at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("incompatible architecture: expected {expected}, artifact has {found}")]
    Incompatible { expected: String, found: String },
    #[error("artifact payload: {0}")]
    Payload(#[from] NnError),
    #[error("invalid artifact name {0:?}")]
    Name(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("artifact {0:?} not found")]
    NotFound(String),
    #[error("artifact {0:?} already exists with different content")]
    Exists(String),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("registry error: {0}")]
    Remote(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl FederationError {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| FederationError::Io { context, source }
    }
}
