//! Experiment driver: corpus ingestion, configuration, the staged pipeline
//! and result tables.

pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Stage};
pub use corpus::{ingest_corpus, Corpus, TokenMode};
pub use pipeline::{evaluate, run_pipeline, Evaluation};
pub use report::{format_table, read_dump, write_dump, ReportRow};
