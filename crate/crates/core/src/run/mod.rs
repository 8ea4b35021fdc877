//! Config-driven stages that read and write a run directory.

mod config;
mod manifest;
mod pipeline;
mod report;

pub use config::{
    ArchConfig, AttributionConfig, CircuitConfig, InterventionConfig, ProbeConfig, RunConfig, SaeConfig, StimuliConfig,
};
pub use manifest::{config_hash, sha256_file, sha256_hex, Manifest, TOOLKIT_VERSION};
pub use pipeline::{
    linear_test_metric, probe_eval_to_tsv, probe_feature_recall, CircuitComparison, FaithfulnessOutput,
    InterventionOutput, Layout, LmSummary, MetricChoice, Pipeline, ProbeRecall, RECALL_DRAWS,
};
