//! Config-driven experiment runs, corpus ingestion and prefix completion.

pub mod complete;
pub mod config;
pub mod corpus;
pub mod experiment;

pub use complete::{complete, format_completion, Completion, PrefixSource, DEFAULT_PREFIX_LEN};
pub use config::{ExperimentConfig, LoadedConfig, MeasureSpec, OracleSpec, StudentSpec, VocabSpec};
pub use corpus::{ingest_corpus, Corpus, IngestStats};
pub use experiment::{replay, run_experiment, Manifest, ReplayReport, RunMode, RunOutcome};
