//! Staged, resumable pipeline over a working directory: synthetic corpus,
//! reference database, pretraining, fine-tuning, indexing, localization,
//! evaluation and the ablation matrix.

pub mod ablate;
pub mod config;
pub mod manifest;
pub mod stages;

pub use config::PipelineConfig;
pub use stages::{Outcome, Pipeline, Stage};

/// JSON Schema of [`PipelineConfig`], as shipped in `docs/config.schema.json`.
#[cfg(feature = "schema")]
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(PipelineConfig);
    let mut s = serde_json::to_string_pretty(&schema).expect("schema serializes");
    s.push('\n');
    s
}
