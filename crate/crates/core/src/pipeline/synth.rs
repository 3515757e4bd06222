use std::collections::{BTreeMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    Backend, CaptionRequest, DetectRequest, GenerateImageRequest, Request, Response,
};
use crate::boxes::{select_top1_box, Detection};
use crate::canonical;
use crate::error::{Error, Result};
use crate::model::{
    DatasetManifest, GroundingPhrase, GroundingRecord, ImageRef, Paradigm, PipelineKind,
    StageTraceEntry,
};
use crate::text::{
    build_concept_list, concept2text_request, parse_phrase_list, sample_concepts, segment_phrases,
    ConceptList, LexiconTagger, LlmExtractor, PromptLibrary,
};

use super::cache::{write_atomic, StageCache};
use super::config::{PipelineConfig, Purity};
use super::store::{record_line, MANIFEST_FILE, RECORDS_FILE};

pub const STAGE_DESCRIBE: &str = "describe";
pub const STAGE_GENERATE: &str = "generate_image";
pub const STAGE_RECAPTION: &str = "recaption";
pub const STAGE_EXTRACT: &str = "extract_phrases";
pub const STAGE_DETECT: &str = "detect";

pub const DESCRIBE_PROMPT: &str = "Describe the image in detail.";
pub const RECAPTION_PROMPT: &str = "Describe the image in detail.";
pub const IMAGES_DIR: &str = "images";

const DEMO_CAPTIONS: &str = include_str!("../../fixtures/demo_captions.txt");

/// One unit of work: a real image to caption, or a concept set to describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineInput {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<String>>,
}

/// Per-input seed, independent of input position.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn synthetic_input_ref(i: usize) -> String {
    canonical::sha256_hex(format!("groundforge-synthetic-input-{i}").as_bytes())
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Vec<PipelineInput>> {
    let inputs = match (&cfg.inputs, cfg.synthetic_inputs) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| {
                    serde_json::from_str(l).map_err(|e| {
                        Error::Config(format!("{} line {}: {e}", path.display(), n + 1))
                    })
                })
                .collect::<Result<Vec<PipelineInput>>>()?
        }
        (None, Some(n)) => (0..n)
            .map(|i| PipelineInput {
                id: format!("input-{i:05}"),
                image_ref: (cfg.purity == Purity::LowerImage2text).then(|| synthetic_input_ref(i)),
                concepts: None,
            })
            .collect(),
        (None, None) => {
            return Err(Error::Config(
                "either inputs or synthetic_inputs must be set".into(),
            ))
        }
    };
    let mut seen = HashSet::new();
    for input in &inputs {
        if !seen.insert(input.id.as_str()) {
            return Err(Error::Config(format!("duplicate input id {:?}", input.id)));
        }
        if cfg.purity == Purity::LowerImage2text && input.image_ref.is_none() {
            return Err(Error::Config(format!(
                "input {:?} has no image_ref, required by lower_image2text",
                input.id
            )));
        }
    }
    Ok(inputs)
}

/// Concept list for concept-to-text runs, from the configured corpus or the
/// bundled demo captions.
pub fn load_concept_list(cfg: &PipelineConfig) -> Result<ConceptList> {
    let tagger = match &cfg.lexicon_path {
        Some(p) => LexiconTagger::from_file(p)?,
        None => LexiconTagger::default(),
    };
    let corpus = match &cfg.concept_corpus {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => DEMO_CAPTIONS.to_string(),
    };
    build_concept_list(corpus.lines().filter(|l| !l.trim().is_empty()), &tagger)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub inputs: u64,
    pub records: u64,
    pub skipped_inputs: u64,
    pub rejected_phrases: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: DatasetManifest,
    pub stats: RunStats,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    pub fn digest(&self) -> String {
        self.manifest.digest()
    }
}

#[derive(Default)]
struct InputResult {
    records: Vec<GroundingRecord>,
    stage_hashes: Vec<(&'static str, String)>,
    image_hash: Option<String>,
    rejected: u64,
    skipped: bool,
}

struct Synth<'a> {
    cfg: &'a PipelineConfig,
    backend: &'a dyn Backend,
    cache: &'a StageCache,
    prompts: &'a PromptLibrary,
    concepts: Option<&'a ConceptList>,
    images_dir: PathBuf,
}

impl Synth<'_> {
    fn image_path(&self, hash: &str) -> PathBuf {
        self.images_dir.join(format!("{hash}.bin"))
    }

    fn store_image(&self, hash: &str) -> Result<()> {
        let path = self.image_path(hash);
        if path.exists() {
            return Ok(());
        }
        let blob = self.backend.fetch_blob(hash)?;
        write_atomic(&path, &blob)
    }

    fn cached_call(
        &self,
        stage: &'static str,
        request: Request,
    ) -> Result<(Response, StageTraceEntry)> {
        let backend_id = self.backend.id(request.role());
        let key = StageCache::key(stage, &backend_id, &request);
        let cached = self.cache.get(stage, &key, &request)?.filter(|r| match r {
            Response::GenerateImage(g) => self.image_path(&g.image_ref).exists(),
            _ => true,
        });
        let response = match cached {
            Some(r) => {
                self.cache.record_hit();
                tracing::debug!(stage, key, "cache hit");
                r
            }
            None => {
                self.cache.record_miss();
                let r = self.backend.call(&request)?;
                r.validate()?;
                r.check_answers(&request)?;
                if let Response::GenerateImage(g) = &r {
                    self.store_image(&g.image_ref)?;
                }
                self.cache.put(stage, &key, &r)?;
                r
            }
        };
        let entry = StageTraceEntry {
            stage: stage.to_string(),
            backend: backend_id,
            request_hash: request.content_hash(),
        };
        Ok((response, entry))
    }

    fn describe(&self, input: &PipelineInput, seed: u64) -> Result<(String, StageTraceEntry)> {
        let request = match self.cfg.purity {
            Purity::LowerImage2text => Request::Caption(CaptionRequest {
                image_ref: input.image_ref.clone().ok_or_else(|| {
                    Error::Config(format!("input {:?} has no image_ref", input.id))
                })?,
                prompt: Some(DESCRIBE_PROMPT.into()),
            }),
            Purity::HigherConcept2text => {
                let concepts = match &input.concepts {
                    Some(c) => c.clone(),
                    None => {
                        let list = self.concepts.ok_or(Error::Empty("concept list"))?;
                        sample_concepts(list, self.cfg.concepts_per_query, seed)?
                    }
                };
                Request::Complete(concept2text_request(&concepts, self.prompts, seed)?)
            }
        };
        let (response, entry) = self.cached_call(STAGE_DESCRIBE, request)?;
        let text = match response {
            Response::Caption(r) => r.caption,
            Response::Complete(r) => r.text,
            _ => unreachable!("check_answers matched the role"),
        };
        Ok((text.trim().to_string(), entry))
    }

    fn extract(
        &self,
        text: &str,
        image_id: &str,
        seed: u64,
    ) -> Result<(Vec<GroundingPhrase>, StageTraceEntry)> {
        let extractor = LlmExtractor {
            backend: self.backend,
            prompts: self.prompts,
            seed,
        };
        let mut phrases: Vec<GroundingPhrase> = Vec::new();
        let mut hashes = Vec::new();
        let mut backend_id = String::from("local");
        for &mode in self.cfg.phrase_mode.segment_modes() {
            let found = match mode.prompt_role() {
                Some(role) => {
                    let request = Request::Complete(extractor.request(text, role)?);
                    let (response, entry) = self.cached_call(STAGE_EXTRACT, request)?;
                    backend_id = entry.backend;
                    hashes.push(entry.request_hash);
                    let Response::Complete(r) = response else {
                        unreachable!("check_answers matched the role")
                    };
                    parse_phrase_list(&r.text)
                        .into_iter()
                        .map(|p| GroundingPhrase::new(p, mode.source(), image_id))
                        .collect::<Result<Vec<_>>>()?
                }
                None => {
                    hashes.push(canonical::sha256_hex(
                        format!("{mode:?}\n{text}").as_bytes(),
                    ));
                    segment_phrases(text, mode, image_id, None)?
                }
            };
            for p in found {
                if !phrases.iter().any(|q| q.text() == p.text()) {
                    phrases.push(p);
                }
            }
        }
        let request_hash = if hashes.len() == 1 {
            hashes.remove(0)
        } else {
            canonical::sha256_hex(hashes.join("\n").as_bytes())
        };
        let entry = StageTraceEntry {
            stage: STAGE_EXTRACT.to_string(),
            backend: backend_id,
            request_hash,
        };
        Ok((phrases, entry))
    }

    fn process(&self, input: &PipelineInput) -> Result<InputResult> {
        let seed = derive_seed(self.cfg.seed, &input.id);
        let mut out = InputResult::default();
        let mut trace = Vec::with_capacity(self.cfg.paradigm.stage_count());

        let (description, entry) = self.describe(input, seed)?;
        out.stage_hashes
            .push((STAGE_DESCRIBE, entry.request_hash.clone()));
        trace.push(entry);
        if description.is_empty() {
            tracing::warn!(input = %input.id, "empty description, skipping input");
            out.skipped = true;
            return Ok(out);
        }

        let request = Request::GenerateImage(GenerateImageRequest {
            prompt: description.clone(),
            guidance_scale: self.cfg.guidance_scale,
            seed,
            size: self.cfg.image_size,
        });
        let (response, entry) = self.cached_call(STAGE_GENERATE, request)?;
        let Response::GenerateImage(generated) = response else {
            unreachable!("check_answers matched the role")
        };
        let image_hash = generated.image_ref;
        out.stage_hashes
            .push((STAGE_GENERATE, entry.request_hash.clone()));
        out.image_hash = Some(image_hash.clone());
        trace.push(entry);

        let phrase_text = match self.cfg.paradigm {
            Paradigm::Caption => description,
            Paradigm::Recaption => {
                let request = Request::Caption(CaptionRequest {
                    image_ref: image_hash.clone(),
                    prompt: Some(RECAPTION_PROMPT.into()),
                });
                let (response, entry) = self.cached_call(STAGE_RECAPTION, request)?;
                out.stage_hashes
                    .push((STAGE_RECAPTION, entry.request_hash.clone()));
                trace.push(entry);
                let Response::Caption(r) = response else {
                    unreachable!("check_answers matched the role")
                };
                r.caption.trim().to_string()
            }
        };

        let (phrases, entry) = match self.extract(&phrase_text, &input.id, seed) {
            Ok(v) => v,
            Err(Error::Empty(what)) => {
                tracing::warn!(input = %input.id, what, "no phrases extracted, skipping input");
                out.skipped = true;
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        out.stage_hashes
            .push((STAGE_EXTRACT, entry.request_hash.clone()));
        trace.push(entry);
        if phrases.is_empty() {
            tracing::warn!(input = %input.id, "no phrases extracted, skipping input");
            out.skipped = true;
            return Ok(out);
        }

        let pipeline = match (self.cfg.purity, self.cfg.paradigm) {
            (Purity::HigherConcept2text, _) => PipelineKind::Concept2text,
            (Purity::LowerImage2text, Paradigm::Caption) => PipelineKind::Caption,
            (Purity::LowerImage2text, Paradigm::Recaption) => PipelineKind::Recaption,
        };
        let image_ref = ImageRef {
            hash: image_hash.clone(),
            path: format!("{IMAGES_DIR}/{image_hash}.bin"),
        };
        for phrase in phrases {
            let request = Request::Detect(DetectRequest {
                image_ref: image_hash.clone(),
                phrase: phrase.text().to_string(),
            });
            let (response, entry) = self.cached_call(STAGE_DETECT, request)?;
            out.stage_hashes
                .push((STAGE_DETECT, entry.request_hash.clone()));
            let Response::Detect(r) = response else {
                unreachable!("check_answers matched the role")
            };
            let detections: Vec<Detection> = r
                .detections
                .into_iter()
                .map(|d| Detection {
                    bbox: d.bbox,
                    confidence: d.confidence,
                    phrase: phrase.clone(),
                })
                .collect();
            match select_top1_box(&detections, self.cfg.detector_threshold) {
                Some(best) => {
                    let mut stage_trace = trace.clone();
                    stage_trace.push(entry);
                    let record = GroundingRecord {
                        image_ref: image_ref.clone(),
                        phrase: phrase.clone(),
                        boxes: vec![best.bbox],
                        confidences: vec![best.confidence],
                        pipeline,
                        paradigm: self.cfg.paradigm,
                        stage_trace,
                    };
                    record.validate(self.cfg.detector_threshold)?;
                    out.records.push(record);
                }
                None => out.rejected += 1,
            }
        }
        Ok(out)
    }
}

/// Runs describe, generate, optional recaption, extract and detect for
/// every input, writes `records.jsonl` and `manifest.json` under
/// `cfg.output_dir`, and reuses cached stage results from earlier runs.
/// Records come out in input order whatever the worker count.
pub fn run_caption_pipeline(cfg: &PipelineConfig, backend: &dyn Backend) -> Result<RunOutcome> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let prompts = match &cfg.examples_path {
        Some(p) => PromptLibrary::from_file(p)?,
        None => PromptLibrary::default(),
    };
    prompts.validate()?;
    let concepts = match cfg.purity {
        Purity::HigherConcept2text if inputs.iter().any(|i| i.concepts.is_none()) => {
            Some(load_concept_list(cfg)?)
        }
        _ => None,
    };
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let cache = StageCache::open(cfg.resolved_cache_dir())?;
    let synth = Synth {
        cfg,
        backend,
        cache: &cache,
        prompts: &prompts,
        concepts: concepts.as_ref(),
        images_dir: out_dir.join(IMAGES_DIR),
    };
    tracing::info!(
        inputs = inputs.len(),
        workers = cfg.workers,
        cache = %cache.root().display(),
        "starting synthesis"
    );

    let partial = out_dir.join(format!("{RECORDS_FILE}.partial"));
    let file = std::fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut writer = Writer {
        out: BufWriter::new(file),
        hasher: Sha256::new(),
        stats: RunStats {
            inputs: inputs.len() as u64,
            ..RunStats::default()
        },
        stage_hashes: BTreeMap::new(),
        images: Vec::new(),
        path: partial.clone(),
    };
    run_ordered(&synth, &inputs, cfg.workers, &mut writer)?;

    let Writer {
        out,
        hasher,
        mut stats,
        stage_hashes,
        mut images,
        ..
    } = writer;
    let file = out
        .into_inner()
        .map_err(|e| Error::io(&partial, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&partial, e))?;
    drop(file);
    let records_path = out_dir.join(RECORDS_FILE);
    std::fs::rename(&partial, &records_path).map_err(|e| Error::io(&records_path, e))?;

    stats.cache_hits = cache.hits();
    stats.cache_misses = cache.misses();
    images.sort();
    images.dedup();

    let mut hashes: BTreeMap<String, String> = stage_hashes
        .into_iter()
        .map(|(stage, list)| {
            (
                stage.to_string(),
                canonical::sha256_hex(list.join("\n").as_bytes()),
            )
        })
        .collect();
    hashes.insert("records".into(), hex::encode(hasher.finalize()));
    hashes.insert("inputs".into(), canonical::content_hash(&inputs));
    hashes.insert(
        "images".into(),
        canonical::sha256_hex(images.join("\n").as_bytes()),
    );
    hashes.insert("prompts".into(), canonical::content_hash(&prompts));
    if let Some(list) = &concepts {
        hashes.insert("concepts".into(), canonical::content_hash(list));
    }
    let manifest = DatasetManifest {
        records: stats.records,
        config_snapshot: cfg.snapshot(),
        stage_hashes: hashes,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        seed: cfg.seed,
    };
    let text = serde_json::to_string_pretty(&canonical::to_canonical_value(&manifest))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;

    if stats.cache_hits > 0 {
        tracing::info!(
            hits = stats.cache_hits,
            misses = stats.cache_misses,
            "resumed with cached stage results"
        );
    }
    tracing::info!(
        records = stats.records,
        skipped_inputs = stats.skipped_inputs,
        rejected_phrases = stats.rejected_phrases,
        digest = %manifest.digest(),
        "synthesis finished"
    );
    Ok(RunOutcome {
        manifest,
        stats,
        output_dir: out_dir,
    })
}

/// Convenience wrapper that builds backends from the config first.
pub fn run_from_config(cfg: &PipelineConfig) -> Result<RunOutcome> {
    let router = cfg.build_backends()?;
    run_caption_pipeline(cfg, &router)
}

struct Writer {
    out: BufWriter<std::fs::File>,
    hasher: Sha256,
    stats: RunStats,
    stage_hashes: BTreeMap<&'static str, Vec<String>>,
    images: Vec<String>,
    path: PathBuf,
}

impl Writer {
    fn accept(&mut self, result: InputResult) -> Result<()> {
        for rec in &result.records {
            let line = record_line(rec);
            self.hasher.update(line.as_bytes());
            self.out
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.stats.records += result.records.len() as u64;
        self.stats.rejected_phrases += result.rejected;
        self.stats.skipped_inputs += u64::from(result.skipped);
        for (stage, hash) in result.stage_hashes {
            self.stage_hashes.entry(stage).or_default().push(hash);
        }
        self.images.extend(result.image_hash);
        Ok(())
    }
}

/// Work-stealing workers feed results through a channel; the caller's
/// thread writes them back in input order.
fn run_ordered(
    synth: &Synth<'_>,
    inputs: &[PipelineInput],
    workers: usize,
    writer: &mut Writer,
) -> Result<()> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<InputResult>)>();
        for _ in 0..workers.min(inputs.len().max(1)) {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(input) = inputs.get(i) else { break };
                let result = synth.process(input);
                let failed = result.is_err();
                if tx.send((i, result)).is_err() || failed {
                    abort.store(true, Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, Result<InputResult>> = BTreeMap::new();
        let mut next_write = 0;
        let mut failure: Option<Error> = None;
        for (i, result) in rx {
            if failure.is_some() {
                continue;
            }
            pending.insert(i, result);
            while let Some(result) = pending.remove(&next_write) {
                let outcome = result.and_then(|r| writer.accept(r));
                if let Err(e) = outcome {
                    tracing::error!(input = %inputs[next_write].id, error = %e, "input failed, aborting run");
                    abort.store(true, Ordering::SeqCst);
                    failure = Some(e);
                    break;
                }
                next_write += 1;
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })
}

pub fn image_file(output_dir: &Path, hash: &str) -> PathBuf {
    output_dir.join(IMAGES_DIR).join(format!("{hash}.bin"))
}
