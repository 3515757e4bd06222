use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, CaptionResponse, CompleteResponse, DetectResponse, EmbedResponse,
    GenerateImageResponse, Request, Response, Role, ScoredBox,
};
use crate::canonical;
use crate::model::BBox;
use crate::text::PromptRole;

pub const MOCK_EMBED_DIM: usize = 32;

const ADJECTIVES: [&str; 12] = [
    "red", "small", "wooden", "white", "old", "bright", "striped", "green", "large", "dark",
    "round", "tall",
];
const NOUNS: [&str; 16] = [
    "dog", "cat", "bench", "tree", "car", "umbrella", "kite", "boat", "table", "lamp", "clock",
    "bicycle", "horse", "ball", "cup", "chair",
];
const PLACES: [&str; 6] = [
    "on a sunny street",
    "in a quiet park",
    "near the water",
    "inside a bright room",
    "on a sandy beach",
    "beside a brick wall",
];
const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Deterministic stand-in for every role. Each response is a pure function of
/// the seed and the request content, except blobs, which can only be fetched
/// after the generating request has been served by this instance.
pub struct MockBackend {
    seed: u64,
    detect_fixtures: HashMap<(String, String), Vec<ScoredBox>>,
    caption_fixtures: HashMap<String, String>,
    blobs: Mutex<HashMap<String, Vec<u8>>>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            detect_fixtures: HashMap::new(),
            caption_fixtures: HashMap::new(),
            blobs: Mutex::new(HashMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Pins the detections returned for `(image_ref, phrase)`.
    pub fn with_detections(
        mut self,
        image_ref: impl Into<String>,
        phrase: impl Into<String>,
        mut detections: Vec<ScoredBox>,
    ) -> Self {
        detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        self.detect_fixtures
            .insert((image_ref.into(), phrase.into()), detections);
        self
    }

    /// Pins the caption returned for an image.
    pub fn with_caption(
        mut self,
        image_ref: impl Into<String>,
        caption: impl Into<String>,
    ) -> Self {
        self.caption_fixtures
            .insert(image_ref.into(), caption.into());
        self
    }

    fn rng_for(&self, role: Role, key: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(role.as_str().as_bytes());
        hasher.update(key.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    fn caption(&self, rng: &mut ChaCha8Rng) -> String {
        let nouns: Vec<&str> = NOUNS.choose_multiple(rng, 3).copied().collect();
        let adj = |rng: &mut ChaCha8Rng| *ADJECTIVES.choose(rng).expect("non-empty");
        format!(
            "A {} {} rests next to a {} {} {}. A {} {} is visible in the distance, and the {} faces the {}.",
            adj(rng),
            nouns[0],
            adj(rng),
            nouns[1],
            PLACES.choose(rng).expect("non-empty"),
            adj(rng),
            nouns[2],
            nouns[0],
            nouns[1]
        )
    }

    fn describe_concepts(&self, concepts: &[&str], rng: &mut ChaCha8Rng) -> String {
        let adj = |rng: &mut ChaCha8Rng| *ADJECTIVES.choose(rng).expect("non-empty");
        let first = concepts.first().copied().unwrap_or("scene");
        let second = concepts.get(1).copied().unwrap_or("tree");
        let extra = *NOUNS.choose(rng).expect("non-empty");
        format!(
            "A {} {} stands beside a {} {} {}. A {} {} is visible nearby, and the {} faces the {}.",
            adj(rng),
            first,
            adj(rng),
            second,
            PLACES.choose(rng).expect("non-empty"),
            adj(rng),
            extra,
            first,
            second
        )
    }

    fn detections(&self, rng: &mut ChaCha8Rng) -> Vec<ScoredBox> {
        let n = rng.gen_range(1..=3);
        let mut dets: Vec<ScoredBox> = (0..n)
            .map(|_| {
                let w = rng.gen_range(0.1..0.6);
                let h = rng.gen_range(0.1..0.6);
                let x = rng.gen_range(0.0..1.0 - w);
                let y = rng.gen_range(0.0..1.0 - h);
                let bbox = BBox::new(
                    canonical::round_significant(x),
                    canonical::round_significant(y),
                    canonical::round_significant(x + w),
                    canonical::round_significant(y + h),
                )
                .expect("generated box is valid");
                ScoredBox {
                    bbox,
                    confidence: canonical::round_significant(rng.gen_range(0.5..1.0)),
                }
            })
            .collect();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        dets
    }

    /// Unit vector that depends only on the seed and the text.
    pub fn embedding(&self, text: &str) -> Vec<f64> {
        let mut rng = self.rng_for(Role::Embed, text);
        let v: Vec<f64> = (0..MOCK_EMBED_DIM)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter()
            .map(|x| canonical::round_significant(x / norm))
            .collect()
    }

    fn image_payload(&self, width: u32, height: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut payload = b"GFMOCKIMG\0".to_vec();
        payload.extend_from_slice(&width.to_le_bytes());
        payload.extend_from_slice(&height.to_le_bytes());
        let mut noise = [0u8; 256];
        rng.fill(&mut noise[..]);
        payload.extend_from_slice(&noise);
        payload
    }
}

/// The open query of a Q/A prompt: text after the last `Q:` up to `A:`.
fn final_query(prompt: &str) -> &str {
    let tail = prompt.rsplit("Q:").next().unwrap_or(prompt);
    tail.split("\nA:").next().unwrap_or(tail).trim()
}

/// Article-led noun chunks of up to `max_words` words after the article.
fn noun_chunks(text: &str, max_words: usize, keep_article: bool) -> Vec<String> {
    let mut out = Vec::new();
    for clause in text.split(['.', ',', ';']) {
        let words: Vec<&str> = clause.split_whitespace().collect();
        let mut i = 0;
        while i < words.len() {
            if ARTICLES.contains(&words[i].to_lowercase().as_str()) && i + 1 < words.len() {
                let end = (i + 1 + max_words).min(words.len());
                let stop = words[i + 1..end]
                    .iter()
                    .position(|w| is_verbish(w))
                    .map_or(end, |p| i + 1 + p);
                if stop > i + 1 {
                    let start = if keep_article { i } else { i + 1 };
                    out.push(words[start..stop].join(" ").to_lowercase());
                }
                i = stop.max(i + 1);
            } else {
                i += 1;
            }
        }
    }
    out
}

fn is_verbish(word: &str) -> bool {
    let w = word.to_lowercase();
    matches!(
        w.as_str(),
        "is" | "are"
            | "rests"
            | "stands"
            | "sits"
            | "faces"
            | "and"
            | "next"
            | "beside"
            | "near"
            | "on"
            | "in"
            | "inside"
            | "with"
            | "of"
    )
}

impl Backend for MockBackend {
    fn id(&self, role: Role) -> String {
        format!("mock:{role}:seed={}", self.seed)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        request.validate()?;
        let mut rng = self.rng_for(request.role(), &request.body());
        let response = match request {
            Request::Caption(r) => Response::Caption(CaptionResponse {
                caption: self
                    .caption_fixtures
                    .get(&r.image_ref)
                    .cloned()
                    .unwrap_or_else(|| self.caption(&mut rng)),
            }),
            Request::GenerateImage(r) => {
                let payload = self.image_payload(r.size[0], r.size[1], &mut rng);
                let hash = canonical::sha256_hex(&payload);
                self.blobs
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(hash.clone(), payload);
                Response::GenerateImage(GenerateImageResponse {
                    image_ref: hash,
                    size: r.size,
                })
            }
            Request::Complete(r) => {
                let query = final_query(&r.prompt);
                let text = match r.task {
                    PromptRole::Summarize => query.to_string(),
                    PromptRole::Concept2text => {
                        let concepts: Vec<&str> = query.split(',').map(str::trim).collect();
                        self.describe_concepts(&concepts, &mut rng)
                    }
                    PromptRole::ExtractShort | PromptRole::ExtractLong => {
                        let long = r.task == PromptRole::ExtractLong;
                        let mut chunks = noun_chunks(query, if long { 4 } else { 2 }, long);
                        if chunks.is_empty() {
                            chunks.push(query.trim_end_matches('.').to_string());
                        }
                        chunks.join(", ")
                    }
                };
                Response::Complete(CompleteResponse { text })
            }
            Request::Detect(r) => Response::Detect(DetectResponse {
                detections: self
                    .detect_fixtures
                    .get(&(r.image_ref.clone(), r.phrase.clone()))
                    .cloned()
                    .unwrap_or_else(|| self.detections(&mut rng)),
            }),
            Request::Embed(r) => Response::Embed(EmbedResponse {
                embeddings: r.texts.iter().map(|t| self.embedding(t)).collect(),
            }),
        };
        response.validate()?;
        Ok(response)
    }

    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError> {
        self.blobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(hash)
            .cloned()
            .ok_or_else(|| BackendError::BlobNotFound(hash.to_string()))
    }
}
