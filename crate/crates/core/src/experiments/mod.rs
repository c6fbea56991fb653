//! Orchestration of the local and remote-augment experiments, the result
//! table and the histogram comparison.

mod histogram;
mod pipeline;
mod plan;
mod report;

pub use histogram::{bin_of, compute_histograms, l1, HistogramReport, Region};
pub use pipeline::{
    run_full_matrix, run_local_experiment, run_remote_augment, ArtifactChannel, AugmentOutcome,
    FileDrop, LocalOutcome, MatrixOutcome, RegistryChannel,
};
pub use plan::{
    DiffusionPlan, ExperimentPlan, ProfilePlan, RowPlan, SegPlan, SitePlan, SynthesisPlan,
    TrainSource,
};
pub use report::{
    distances_tsv, emit_report, histograms_tsv, parse_table_tsv, per_slice_tsv, table_markdown,
    table_tsv, ReportFormat, ResultTable, MARKDOWN_HEADER,
};

use std::path::PathBuf;

use crate::diffusion::DiffusionError;
use crate::federation::{AuditFinding, FederationError};
use crate::phantom::DataError;
use crate::segmentation::SegError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("histogram: {0}")]
    Histogram(String),
    #[error("report: {0}")]
    Report(String),
    #[error("artifact {artifact} failed the privacy audit at site {site}: {}", findings.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    AuditFailed {
        artifact: String,
        site: String,
        findings: Vec<AuditFinding>,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Segmentation(#[from] SegError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
