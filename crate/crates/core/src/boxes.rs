//! Box geometry, detector filtering and layout text-box selection.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, GroundingPhrase};

pub const DEFAULT_DETECTOR_THRESHOLD: f64 = 0.7;
pub const DEFAULT_LAYOUT_CAP: usize = 10;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Largest pool solved exactly by [`select_max_compatible`].
pub const EXACT_SELECTION_LIMIT: usize = 25;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub phrase: GroundingPhrase,
}

/// Keeps the single most confident detection, and only if its confidence is
/// strictly greater than `threshold`. Ties go to the earlier detection.
pub fn select_top1_box(dets: &[Detection], threshold: f64) -> Option<&Detection> {
    let best = dets.iter().reduce(|best, d| {
        if d.confidence > best.confidence {
            d
        } else {
            best
        }
    })?;
    (best.confidence > threshold).then_some(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBoxItem {
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Per-image (phrase, box) inputs for layout-conditioned synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBoxPool {
    #[serde(default)]
    pub image_id: String,
    pub items: Vec<TextBoxItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
}

impl TextBoxPool {
    pub fn new(image_id: impl Into<String>, items: Vec<TextBoxItem>) -> Self {
        TextBoxPool {
            image_id: image_id.into(),
            items,
            embeddings: None,
        }
    }

    pub fn with_embeddings(mut self, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if embeddings.len() != self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "{} embeddings for {} items",
                embeddings.len(),
                self.items.len()
            )));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match &self.embeddings {
            Some(e) if e.len() != self.items.len() => Err(Error::Validation(format!(
                "pool {}: {} embeddings for {} items",
                self.image_id,
                e.len(),
                self.items.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Sub-pool with the given indices, which must be ascending.
    pub fn subset(&self, indices: &[usize]) -> TextBoxPool {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        TextBoxPool {
            image_id: self.image_id.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            embeddings: self
                .embeddings
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i].clone()).collect()),
        }
    }
}

fn check_cap(cap: usize) -> Result<()> {
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be >= 1".into()));
    }
    Ok(())
}

/// Uniform random `cap`-subset drawn with ChaCha8 seeded from `seed`;
/// pools within the cap come back unchanged.
pub fn select_random(pool: &TextBoxPool, cap: usize, seed: u64) -> Result<TextBoxPool> {
    check_cap(cap)?;
    pool.validate()?;
    if pool.len() <= cap {
        return Ok(pool.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool.len(), cap).into_vec();
    picked.sort_unstable();
    Ok(pool.subset(&picked))
}

/// Keeps the `cap` items whose mean `1 - cosine` to every other item is
/// largest. Ties go to the lower index.
pub fn select_by_dissimilarity(pool: &TextBoxPool, cap: usize) -> Result<TextBoxPool> {
    check_cap(cap)?;
    pool.validate()?;
    let embeddings = pool.embeddings.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("pool {} has no text embeddings", pool.image_id))
    })?;
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "pool {}: embedding {i} has zero or non-finite norm",
                    pool.image_id
                )));
            }
            Ok(e.iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    if pool.len() <= cap {
        return Ok(pool.clone());
    }
    let n = unit.len();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                    1.0 - cos
                })
                .sum();
            total / (n - 1) as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..cap].to_vec();
    keep.sort_unstable();
    Ok(pool.subset(&keep))
}

/// Result of the IoU-constrained selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatibleSet {
    /// Ascending indices into the input.
    pub indices: Vec<usize>,
    /// False when the pool exceeded [`EXACT_SELECTION_LIMIT`] and the greedy
    /// fallback was used.
    pub exact: bool,
}

/// Largest set of boxes whose pairwise IoU stays below `iou_threshold`.
///
/// Solved as a maximum independent set on the conflict graph. Pools up to
/// [`EXACT_SELECTION_LIMIT`] boxes are solved exactly and return the
/// lexicographically smallest optimal index set; larger pools fall back to a
/// greedy pass in ascending conflict degree.
pub fn max_compatible_indices(boxes: &[BBox], iou_threshold: f64) -> Result<CompatibleSet> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    let n = boxes.len();
    let conflicts: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| i != j && iou(&boxes[i], &boxes[j]) >= iou_threshold)
                .collect()
        })
        .collect();
    if n <= EXACT_SELECTION_LIMIT {
        let adj: Vec<u32> = conflicts
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &c)| c)
                    .fold(0u32, |m, (j, _)| m | (1 << j))
            })
            .collect();
        let mut search = MisSearch {
            adj: &adj,
            best: 0,
            best_size: 0,
        };
        let all = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
        search.run(0, all);
        let indices = (0..n).filter(|&i| search.best & (1 << i) != 0).collect();
        Ok(CompatibleSet {
            indices,
            exact: true,
        })
    } else {
        tracing::warn!(
            boxes = n,
            limit = EXACT_SELECTION_LIMIT,
            "pool too large for exact selection, using greedy fallback"
        );
        let degree: Vec<usize> = conflicts
            .iter()
            .map(|row| row.iter().filter(|&&c| c).count())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (degree[i], i));
        let mut chosen: Vec<usize> = Vec::new();
        for i in order {
            if chosen.iter().all(|&j| !conflicts[i][j]) {
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        Ok(CompatibleSet {
            indices: chosen,
            exact: false,
        })
    }
}

/// Branch and bound over bitmask vertex sets. Branching includes the lowest
/// candidate before excluding it, so leaves are visited in lexicographic
/// order and the first optimum found is the lexicographically smallest.
struct MisSearch<'a> {
    adj: &'a [u32],
    best: u32,
    best_size: u32,
}

impl MisSearch<'_> {
    fn run(&mut self, chosen: u32, candidates: u32) {
        let size = chosen.count_ones();
        if candidates == 0 {
            if size > self.best_size {
                self.best = chosen;
                self.best_size = size;
            }
            return;
        }
        if size + self.clique_cover_bound(candidates) <= self.best_size {
            return;
        }
        let v = candidates.trailing_zeros();
        let bit = 1u32 << v;
        self.run(chosen | bit, candidates & !bit & !self.adj[v as usize]);
        self.run(chosen, candidates & !bit);
    }

    /// Number of cliques in a greedy clique cover of `candidates`; an
    /// independent set takes at most one vertex per clique.
    fn clique_cover_bound(&self, mut candidates: u32) -> u32 {
        let mut cliques = 0;
        while candidates != 0 {
            let v = candidates.trailing_zeros();
            let mut clique_ok = self.adj[v as usize] & candidates;
            candidates &= !(1 << v);
            while clique_ok != 0 {
                let u = clique_ok.trailing_zeros();
                candidates &= !(1 << u);
                clique_ok &= self.adj[u as usize] & !(1 << u);
            }
            cliques += 1;
        }
        cliques
    }
}

pub fn select_max_compatible(pool: &TextBoxPool, iou_threshold: f64) -> Result<TextBoxPool> {
    pool.validate()?;
    let boxes: Vec<BBox> = pool.items.iter().map(|it| it.bbox).collect();
    let set = max_compatible_indices(&boxes, iou_threshold)?;
    Ok(pool.subset(&set.indices))
}
