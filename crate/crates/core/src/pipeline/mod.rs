//! Staged synthesis of image-phrase-box records, with caching, resumable
//! runs, layout selection and dataset subsampling.

pub mod cache;
pub mod config;
pub mod layout;
pub mod store;
pub mod subsample;
pub mod synth;

pub use cache::StageCache;
pub use config::{PhraseMode, PipelineConfig, Purity, CACHE_DIR_ENV};
pub use layout::{
    fill_embeddings, run_layout_selection, LayoutOptions, LayoutStats, LayoutStrategy,
};
pub use store::{record_line, Dataset, MANIFEST_FILE, RECORDS_FILE};
pub use subsample::{subsample, subsample_size};
pub use synth::{
    derive_seed, load_inputs, run_caption_pipeline, run_from_config, PipelineInput, RunOutcome,
    RunStats,
};
