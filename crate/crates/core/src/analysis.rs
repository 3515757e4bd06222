//! Diversity, coverage and similarity statistics comparing synthetic text
//! with the real text of the same image.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EmbedRequest};
use crate::error::{Error, Result};
use crate::eval::csv_field;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextGroup {
    pub image_id: String,
    pub synthetic: Vec<String>,
    pub real: Vec<String>,
}

/// Type-token ratio: distinct tokens over total tokens.
pub fn ttr(text: &str) -> Result<f64> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Empty("text for type-token ratio"));
    }
    let types: HashSet<&String> = tokens.iter().collect();
    Ok(types.len() as f64 / tokens.len() as f64)
}

/// `|a ∩ b| / min(|a|, |b|)`.
pub fn overlap_coefficient<S: AsRef<str> + Ord>(a: &BTreeSet<S>, b: &BTreeSet<S>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("vocabulary set"));
    }
    let a: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let shared = a.intersection(&b).count();
    Ok(shared as f64 / a.len().min(b.len()) as f64)
}

/// Unique tokens over a list of texts.
pub fn vocabulary<S: AsRef<str>>(texts: &[S]) -> BTreeSet<String> {
    texts.iter().flat_map(|t| tokenize(t.as_ref())).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each synthetic text, the best cosine against the image's real texts;
/// averaged over synthetic texts.
pub fn similarity_from_embeddings(synthetic: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::Empty("embeddings for similarity"));
    }
    let total: f64 = synthetic
        .iter()
        .map(|s| {
            real.iter()
                .map(|r| cosine(s, r))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok((total / synthetic.len() as f64).clamp(-1.0, 1.0))
}

pub fn image_similarity(group: &ImageTextGroup, embed: &dyn Backend) -> Result<f64> {
    if group.synthetic.is_empty() || group.real.is_empty() {
        return Err(Error::Empty("image text group"));
    }
    let mut texts = group.synthetic.clone();
    texts.extend(group.real.iter().cloned());
    let embeddings = embed.embed(&EmbedRequest { texts })?.embeddings;
    if embeddings.len() != group.synthetic.len() + group.real.len() {
        return Err(Error::Validation(format!(
            "embed backend returned {} vectors for {} texts",
            embeddings.len(),
            group.synthetic.len() + group.real.len()
        )));
    }
    let (syn, real) = embeddings.split_at(group.synthetic.len());
    similarity_from_embeddings(syn, real)
}

/// Equal-width bins over `[lo, hi)`, the last bin closed at `hi`. Values
/// outside the range land in the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs at least one bin".into(),
        ));
    }
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::InvalidArgument(format!(
            "histogram range [{lo}, {hi}] is empty"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if v.is_nan() || v <= lo {
            0
        } else if v >= hi {
            bins - 1
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(counts)
}

pub fn histogram_csv(counts: &[u64], lo: f64, hi: f64) -> String {
    let width = (hi - lo) / counts.len() as f64;
    let mut out = String::from("bin_left,bin_right,count\n");
    for (i, c) in counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let right = if i + 1 == counts.len() {
            hi
        } else {
            left + width
        };
        let _ = writeln!(out, "{left},{right},{c}");
    }
    out
}

/// Groups `(image_id, text)` pairs from both corpora by image, keeping only
/// images that have both kinds of text.
pub fn group_by_image(
    synthetic: impl IntoIterator<Item = (String, String)>,
    real: impl IntoIterator<Item = (String, String)>,
) -> Vec<ImageTextGroup> {
    let mut groups: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for (id, text) in synthetic {
        groups.entry(id).or_default().0.push(text);
    }
    for (id, text) in real {
        groups.entry(id).or_default().1.push(text);
    }
    groups
        .into_iter()
        .filter(|(_, (s, r))| !s.is_empty() && !r.is_empty())
        .map(|(image_id, (synthetic, real))| ImageTextGroup {
            image_id,
            synthetic,
            real,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub image_id: String,
    pub synthetic_ttr: f64,
    pub real_ttr: f64,
    pub overlap: f64,
    pub similarity: f64,
}

/// Per-image statistics, groups evaluated in parallel and returned in order.
pub fn analyze_groups(groups: &[ImageTextGroup], embed: &dyn Backend) -> Result<Vec<ImageStats>> {
    use rayon::prelude::*;
    groups
        .par_iter()
        .map(|g| {
            Ok(ImageStats {
                image_id: g.image_id.clone(),
                synthetic_ttr: ttr(&g.synthetic.join(" "))?,
                real_ttr: ttr(&g.real.join(" "))?,
                overlap: overlap_coefficient(&vocabulary(&g.synthetic), &vocabulary(&g.real))?,
                similarity: image_similarity(g, embed)?,
            })
        })
        .collect()
}

pub fn stats_csv(stats: &[ImageStats], columns: &[&str]) -> String {
    let mut out = format!("image_id,{}\n", columns.join(","));
    for s in stats {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| match *c {
                "synthetic_ttr" => s.synthetic_ttr.to_string(),
                "real_ttr" => s.real_ttr.to_string(),
                "overlap" => s.overlap.to_string(),
                "similarity" => s.similarity.to_string(),
                other => panic!("unknown stats column {other}"),
            })
            .collect();
        let _ = writeln!(out, "{},{}", csv_field(&s.image_id), cells.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ttr_counts() {
        assert!((ttr("red red red").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ttr("one two three").unwrap(), 1.0);
        assert_eq!(ttr("a dog and a cat").unwrap(), 0.8);
        assert_eq!(ttr("A dog, a DOG.").unwrap(), 0.5);
        assert!(ttr("  ... ").is_err());
    }

    #[test]
    fn overlap_counts() {
        assert_eq!(
            overlap_coefficient(&set(&["a", "b"]), &set(&["a", "b"])).unwrap(),
            1.0
        );
        assert_eq!(
            overlap_coefficient(&set(&["a", "b"]), &set(&["b", "c", "d"])).unwrap(),
            0.5
        );
        assert_eq!(
            overlap_coefficient(&set(&["a"]), &set(&["b"])).unwrap(),
            0.0
        );
        assert_eq!(
            overlap_coefficient(&set(&["a"]), &set(&["a", "b", "c"])).unwrap(),
            1.0
        );
        assert!(overlap_coefficient(&set(&[]), &set(&["a"])).is_err());
    }

    #[test]
    fn similarity_mean_of_maxima() {
        let syn = vec![vec![0.4, (1.0f64 - 0.16).sqrt()], vec![0.8, 0.6]];
        let real = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!((similarity_from_embeddings(&syn, &real).unwrap() - 0.6).abs() < 1e-12);
        let one = vec![vec![0.8, 0.6]];
        assert!((similarity_from_embeddings(&one, &real).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_through_backend() {
        let mock = MockBackend::new(4);
        let g = ImageTextGroup {
            image_id: "i".into(),
            synthetic: vec!["a red kite".into()],
            real: vec!["a red kite".into()],
        };
        assert!((image_similarity(&g, &mock).unwrap() - 1.0).abs() < 1e-6);
        let dup = ImageTextGroup {
            real: vec!["a red kite".into(), "a red kite".into(), "sky".into()],
            ..g.clone()
        };
        assert!((image_similarity(&dup, &mock).unwrap() - 1.0).abs() < 1e-6);
        let empty = ImageTextGroup { real: vec![], ..g };
        assert!(image_similarity(&empty, &mock).is_err());
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(
            histogram(&[0.0, 0.5, 1.0], 0.0, 1.0, 2).unwrap(),
            vec![1, 2]
        );
        assert_eq!(histogram(&[], 0.0, 1.0, 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(histogram(&[0.0; 4], 0.0, 1.0, 3).unwrap(), vec![4, 0, 0]);
        assert_eq!(histogram(&[-5.0, 7.0], 0.0, 1.0, 2).unwrap(), vec![1, 1]);
        assert!(histogram(&[1.0], 1.0, 1.0, 2).is_err());
        assert!(histogram(&[1.0], 0.0, 1.0, 0).is_err());
        assert_eq!(
            histogram_csv(&[1, 2], 0.0, 1.0),
            "bin_left,bin_right,count\n0,0.5,1\n0.5,1,2\n"
        );
    }

    #[test]
    fn grouping_keeps_paired_images() {
        let groups = group_by_image(
            [
                ("b".to_string(), "x".to_string()),
                ("a".into(), "y".into()),
                ("c".into(), "z".into()),
            ],
            [("a".to_string(), "w".to_string()), ("b".into(), "v".into())],
        );
        let ids: Vec<_> = groups.iter().map(|g| g.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
