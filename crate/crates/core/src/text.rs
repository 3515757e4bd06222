//! Concept sampling, LLM prompt construction, phrase segmentation and
//! parsing of LLM phrase lists.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CompleteRequest};
use crate::error::{Error, Result};
use crate::model::{GroundingPhrase, PhraseSource};

/// Nouns that describe the picture itself or a position in it rather than
/// content, dropped from the concept list.
pub const EXCLUDED_NOUNS: [&str; 19] = [
    "scene",
    "scenery",
    "view",
    "picture",
    "image",
    "photo",
    "left",
    "right",
    "back",
    "front",
    "top",
    "bottom",
    "middle",
    "center",
    "side",
    "background",
    "frontmost",
    "leftmost",
    "rightmost",
];

pub const IN_CONTEXT_EXAMPLES_PER_PROMPT: usize = 4;
pub const DEFAULT_CONCEPTS_PER_QUERY: usize = 2;

const DEFAULT_EXAMPLES_JSON: &str = include_str!("../fixtures/in_context_examples.json");
const DEFAULT_LEXICON: &str = include_str!("../fixtures/nouns.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub noun: String,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptList {
    /// Sorted by noun.
    pub entries: Vec<ConceptEntry>,
    pub exclusions: BTreeSet<String>,
}

impl ConceptList {
    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let exclusions = default_exclusions();
        let entries = counts
            .into_iter()
            .filter_map(|(noun, frequency)| {
                let noun = noun.to_lowercase();
                (frequency > 0 && !exclusions.contains(&noun))
                    .then_some(ConceptEntry { noun, frequency })
            })
            .collect();
        ConceptList {
            entries,
            exclusions,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frequency(&self, noun: &str) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.noun == noun)
            .map(|e| e.frequency)
    }
}

pub fn default_exclusions() -> BTreeSet<String> {
    EXCLUDED_NOUNS.iter().map(|s| s.to_string()).collect()
}

/// Part-of-speech backend: returns the nouns of one caption.
pub trait NounTagger {
    fn nouns(&self, caption: &str) -> Result<Vec<String>>;
}

impl<F> NounTagger for F
where
    F: Fn(&str) -> Result<Vec<String>>,
{
    fn nouns(&self, caption: &str) -> Result<Vec<String>> {
        self(caption)
    }
}

/// Tags a token as a noun when its case-folded form is in a fixed lexicon.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    lexicon: HashSet<String>,
}

impl LexiconTagger {
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        LexiconTagger {
            lexicon: words.into_iter().map(|w| w.into().to_lowercase()).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&text))
    }

    fn from_lines(text: &str) -> Self {
        LexiconTagger::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::from_lines(DEFAULT_LEXICON)
    }
}

impl NounTagger for LexiconTagger {
    fn nouns(&self, caption: &str) -> Result<Vec<String>> {
        Ok(tokenize(caption)
            .into_iter()
            .filter(|t| self.lexicon.contains(t))
            .collect())
    }
}

/// Case-folds, splits on whitespace and strips leading/trailing punctuation
/// from every token. Tokens that are pure punctuation are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_whitespace())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Noun frequencies over a caption corpus, with the exclusion set removed.
pub fn build_concept_list<I, S, T>(captions: I, tagger: &T) -> Result<ConceptList>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
    T: NounTagger + ?Sized,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut seen_any = false;
    for caption in captions {
        seen_any = true;
        let caption = caption.as_ref();
        let nouns = tagger.nouns(caption).map_err(|e| {
            Error::InvalidArgument(format!("tagging caption {caption:?} failed: {e}"))
        })?;
        for noun in nouns {
            *counts.entry(noun.trim().to_lowercase()).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(Error::Empty("caption corpus"));
    }
    counts.remove("");
    Ok(ConceptList::from_counts(counts))
}

/// Draws `k` distinct nouns without replacement, each draw proportional to
/// frequency among the nouns not yet drawn.
pub fn sample_concepts(list: &ConceptList, k: usize, seed: u64) -> Result<Vec<String>> {
    let mut pool: Vec<&ConceptEntry> = list
        .entries
        .iter()
        .filter(|e| e.frequency > 0 && !list.exclusions.contains(&e.noun))
        .collect();
    if pool.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need {k} distinct concepts, list has {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k {
        let total: u64 = pool.iter().map(|e| e.frequency).sum();
        let mut ticket = rng.gen_range(0..total);
        let pos = pool
            .iter()
            .position(|e| {
                if ticket < e.frequency {
                    true
                } else {
                    ticket -= e.frequency;
                    false
                }
            })
            .expect("ticket falls inside the total");
        drawn.push(pool.remove(pos).noun.clone());
    }
    Ok(drawn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Concept2text,
    Summarize,
    ExtractShort,
    ExtractLong,
}

impl PromptRole {
    pub const ALL: [PromptRole; 4] = [
        PromptRole::Concept2text,
        PromptRole::Summarize,
        PromptRole::ExtractShort,
        PromptRole::ExtractLong,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Concept2text => "concept2text",
            PromptRole::Summarize => "summarize",
            PromptRole::ExtractShort => "extract_short",
            PromptRole::ExtractLong => "extract_long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExample {
    #[serde(rename = "q")]
    pub query: String,
    #[serde(rename = "a")]
    pub answer: String,
}

impl InContextExample {
    pub fn new(query: impl Into<String>, answer: impl Into<String>) -> Result<Self> {
        let ex = InContextExample {
            query: query.into(),
            answer: answer.into(),
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        for (what, s) in [("query", &self.query), ("answer", &self.answer)] {
            if s.trim().is_empty() {
                return Err(Error::Validation(format!("in-context {what} is empty")));
            }
            if s.contains("Q:") || s.contains("A:") || s.contains('\n') {
                return Err(Error::Validation(format!(
                    "in-context {what} {s:?} would break the Q/A layout"
                )));
            }
        }
        Ok(())
    }
}

/// In-context example databases per prompt role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptLibrary {
    pub examples: BTreeMap<PromptRole, Vec<InContextExample>>,
}

impl PromptLibrary {
    pub fn from_json(json: &str) -> Result<Self> {
        let lib: PromptLibrary = serde_json::from_str(json)?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for role in PromptRole::ALL {
            let db = self.examples(role);
            if db.len() < IN_CONTEXT_EXAMPLES_PER_PROMPT {
                return Err(Error::Validation(format!(
                    "{} needs at least {IN_CONTEXT_EXAMPLES_PER_PROMPT} in-context examples, has {}",
                    role.as_str(),
                    db.len()
                )));
            }
            db.iter().try_for_each(InContextExample::validate)?;
        }
        Ok(())
    }

    pub fn examples(&self, role: PromptRole) -> &[InContextExample] {
        self.examples.get(&role).map_or(&[], Vec::as_slice)
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        PromptLibrary::from_json(DEFAULT_EXAMPLES_JSON).expect("shipped examples are valid")
    }
}

/// Renders four seeded-sampled examples as `Q:`/`A:` blocks followed by the
/// open query.
pub fn build_prompt(example_db: &[InContextExample], query: &str, seed: u64) -> Result<String> {
    if example_db.len() < IN_CONTEXT_EXAMPLES_PER_PROMPT {
        return Err(Error::InvalidArgument(format!(
            "need {IN_CONTEXT_EXAMPLES_PER_PROMPT} in-context examples, have {}",
            example_db.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<&InContextExample> = example_db
        .choose_multiple(&mut rng, IN_CONTEXT_EXAMPLES_PER_PROMPT)
        .collect();
    let mut prompt = String::new();
    for ex in picked {
        prompt.push_str(&format!("Q: {}\nA: {}\n", ex.query, ex.answer));
    }
    prompt.push_str(&format!("Q: {query}\nA:"));
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Period,
    Comma,
    LlmShort,
    LlmLong,
}

impl SegmentMode {
    pub fn source(self) -> PhraseSource {
        match self {
            SegmentMode::Period => PhraseSource::PeriodSplit,
            SegmentMode::Comma => PhraseSource::CommaSplit,
            SegmentMode::LlmShort => PhraseSource::LlmShort,
            SegmentMode::LlmLong => PhraseSource::LlmLong,
        }
    }

    pub fn prompt_role(self) -> Option<PromptRole> {
        match self {
            SegmentMode::LlmShort => Some(PromptRole::ExtractShort),
            SegmentMode::LlmLong => Some(PromptRole::ExtractLong),
            _ => None,
        }
    }
}

/// LLM access for phrase extraction.
pub struct LlmExtractor<'a> {
    pub backend: &'a dyn Backend,
    pub prompts: &'a PromptLibrary,
    pub seed: u64,
}

impl LlmExtractor<'_> {
    /// The completion request an extraction would send.
    pub fn request(&self, text: &str, role: PromptRole) -> Result<CompleteRequest> {
        Ok(CompleteRequest {
            prompt: build_prompt(self.prompts.examples(role), text.trim(), self.seed)?,
            task: role,
            seed: self.seed,
        })
    }
}

fn split_dedup<'t>(pieces: impl Iterator<Item = &'t str>) -> Vec<String> {
    let mut seen = HashSet::new();
    pieces
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .filter(|p| seen.insert(p.to_string()))
        .map(str::to_string)
        .collect()
}

/// Parses an LLM phrase list: newline and comma separated, trimmed,
/// empties dropped, exact duplicates removed in first-seen order.
pub fn parse_phrase_list(output: &str) -> Vec<String> {
    split_dedup(output.split(['\n', ',']))
}

pub fn segment_phrases(
    text: &str,
    mode: SegmentMode,
    image_id: &str,
    llm: Option<&LlmExtractor<'_>>,
) -> Result<Vec<GroundingPhrase>> {
    let pieces = match (mode, llm) {
        (SegmentMode::Period, None) => split_dedup(text.split('.')),
        (SegmentMode::Comma, None) => split_dedup(text.split(',')),
        (SegmentMode::LlmShort | SegmentMode::LlmLong, Some(llm)) => {
            let role = mode.prompt_role().expect("llm mode has a prompt role");
            let response = llm.backend.complete(&llm.request(text, role)?)?;
            let phrases = parse_phrase_list(&response.text);
            if phrases.is_empty() {
                return Err(Error::Empty("phrases parsed from LLM output"));
            }
            phrases
        }
        (SegmentMode::Period | SegmentMode::Comma, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "{mode:?} segmentation does not use an LLM"
            )))
        }
        (_, None) => {
            return Err(Error::InvalidArgument(format!(
                "{mode:?} segmentation requires an LLM backend"
            )))
        }
    };
    pieces
        .into_iter()
        .map(|p| GroundingPhrase::new(p, mode.source(), image_id))
        .collect()
}

/// The completion request that condenses a caption set.
pub fn summarize_request(
    captions: &[String],
    prompts: &PromptLibrary,
    seed: u64,
) -> Result<CompleteRequest> {
    if captions.is_empty() {
        return Err(Error::Empty("captions to summarize"));
    }
    let query = captions
        .iter()
        .map(|c| c.trim())
        .collect::<Vec<_>>()
        .join(", ");
    Ok(CompleteRequest {
        prompt: build_prompt(prompts.examples(PromptRole::Summarize), &query, seed)?,
        task: PromptRole::Summarize,
        seed,
    })
}

pub fn summarize_captions(
    captions: &[String],
    llm: &dyn Backend,
    prompts: &PromptLibrary,
    seed: u64,
) -> Result<String> {
    let request = summarize_request(captions, prompts, seed)?;
    Ok(llm.complete(&request)?.text.trim().to_string())
}

/// Completion request that writes an image description from sampled concepts.
pub fn concept2text_request(
    concepts: &[String],
    prompts: &PromptLibrary,
    seed: u64,
) -> Result<CompleteRequest> {
    Ok(CompleteRequest {
        prompt: build_prompt(
            prompts.examples(PromptRole::Concept2text),
            &concepts.join(", "),
            seed,
        )?,
        task: PromptRole::Concept2text,
        seed,
    })
}
