//! Configuration, resumable end-to-end runs, manifests and artifact inspection.

mod config;
mod inspect;
mod run;
pub mod stages;

pub use config::{
    stage_seed, CorpusSection, ExperimentSection, ModelSection, RunConfig, SaeSection, TrainSection, VariantSpec,
    ENV_OUTPUT_DIR, ENV_THREADS,
};
pub use inspect::inspect;
pub use run::{manifest_hash, run_all, RunManifest, StageRecord, MANIFEST_FILE, TOOL_VERSION};
