use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendEndpoint, HttpBackend, MockBackend, Role, Router};
use crate::backend::{DEFAULT_GUIDANCE_SCALE, DEFAULT_IMAGE_SIZE};
use crate::boxes::DEFAULT_DETECTOR_THRESHOLD;
use crate::canonical;
use crate::error::{Error, Result};
use crate::model::Paradigm;
use crate::text::{SegmentMode, DEFAULT_CONCEPTS_PER_QUERY};

pub const CACHE_DIR_ENV: &str = "GROUNDFORGE_CACHE_DIR";

/// How much the image description step leans on real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purity {
    /// Caption a real image.
    #[serde(alias = "lower")]
    LowerImage2text,
    /// Ask an LLM to describe sampled concepts.
    #[serde(alias = "higher")]
    HigherConcept2text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseMode {
    #[serde(alias = "short")]
    LlmShort,
    #[serde(alias = "long")]
    LlmLong,
    /// Short and long extractions concatenated, exact duplicates removed.
    Both,
    Comma,
    Period,
}

impl PhraseMode {
    pub fn segment_modes(self) -> &'static [SegmentMode] {
        match self {
            PhraseMode::LlmShort => &[SegmentMode::LlmShort],
            PhraseMode::LlmLong => &[SegmentMode::LlmLong],
            PhraseMode::Both => &[SegmentMode::LlmShort, SegmentMode::LlmLong],
            PhraseMode::Comma => &[SegmentMode::Comma],
            PhraseMode::Period => &[SegmentMode::Period],
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_DETECTOR_THRESHOLD
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE_SCALE
}

fn default_size() -> [u32; 2] {
    DEFAULT_IMAGE_SIZE
}

fn default_concepts() -> usize {
    DEFAULT_CONCEPTS_PER_QUERY
}

fn default_workers() -> usize {
    4
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("groundforge-out")
}

fn default_purity() -> Purity {
    Purity::LowerImage2text
}

fn default_paradigm() -> Paradigm {
    Paradigm::Caption
}

fn default_phrase_mode() -> PhraseMode {
    PhraseMode::LlmShort
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_purity")]
    pub purity: Purity,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    #[serde(default = "default_phrase_mode")]
    pub phrase_mode: PhraseMode,
    #[serde(default = "default_threshold")]
    pub detector_threshold: f64,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default = "default_size")]
    pub image_size: [u32; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concepts")]
    pub concepts_per_query: usize,
    /// Role endpoints; roles without one are served by the seeded mock.
    #[serde(default)]
    pub endpoints: BTreeMap<Role, BackendEndpoint>,
    /// Seed of the in-process mock; defaults to `seed`.
    #[serde(default)]
    pub mock_seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// JSONL input list; when absent, `synthetic_inputs` placeholders are used.
    #[serde(default)]
    pub inputs: Option<PathBuf>,
    #[serde(default)]
    pub synthetic_inputs: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// In-context example database (role -> list of {q, a}).
    #[serde(default)]
    pub examples_path: Option<PathBuf>,
    /// Plain-text caption corpus, one caption per line, for the concept list.
    #[serde(default)]
    pub concept_corpus: Option<PathBuf>,
    /// Noun lexicon for the built-in tagger, one noun per line.
    #[serde(default)]
    pub lexicon_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.detector_threshold) {
            return Err(Error::Config(format!(
                "detector_threshold {} outside [0, 1]",
                self.detector_threshold
            )));
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_scale must be > 0, got {}",
                self.guidance_scale
            )));
        }
        if self.image_size.contains(&0) {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.concepts_per_query == 0 {
            return Err(Error::Config("concepts_per_query must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.inputs.is_none() && self.synthetic_inputs.is_none() {
            return Err(Error::Config(
                "either inputs or synthetic_inputs must be set".into(),
            ));
        }
        for (role, ep) in &self.endpoints {
            if ep.role != *role {
                return Err(Error::Config(format!(
                    "endpoint under {role} declares role {}",
                    ep.role
                )));
            }
            ep.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Cache directory: `$GROUNDFORGE_CACHE_DIR`, then `cache_dir`, then
    /// `<output_dir>/cache`.
    pub fn resolved_cache_dir(&self) -> PathBuf {
        std::env::var_os(CACHE_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn effective_mock_seed(&self) -> u64 {
        self.mock_seed.unwrap_or(self.seed)
    }

    /// Builds the role router: HTTP clients for configured endpoints, the
    /// seeded mock for the rest.
    pub fn build_backends(&self) -> Result<Router> {
        let mock: Arc<dyn Backend> = Arc::new(MockBackend::new(self.effective_mock_seed()));
        let mut router = Router::uniform(mock);
        for (role, ep) in &self.endpoints {
            let client = HttpBackend::new(ep.clone()).map_err(|e| Error::Config(e.to_string()))?;
            router = router.route(*role, Arc::new(client));
        }
        Ok(router)
    }

    /// The settings that determine output content. Paths, worker count and
    /// transport details are left out so that relocating a run or switching
    /// to an equivalent remote backend keeps the digest.
    pub fn snapshot(&self) -> serde_json::Value {
        canonical::to_canonical_value(&serde_json::json!({
            "purity": self.purity,
            "paradigm": self.paradigm,
            "phrase_mode": self.phrase_mode,
            "detector_threshold": self.detector_threshold,
            "guidance_scale": self.guidance_scale,
            "image_size": self.image_size,
            "seed": self.seed,
            "concepts_per_query": self.concepts_per_query,
        }))
    }
}
