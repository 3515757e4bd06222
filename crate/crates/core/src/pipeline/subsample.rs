use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::canonical;
use crate::error::{Error, Result};
use crate::model::DatasetManifest;

use super::store::Dataset;

/// Number of records kept for `fraction` of `n`, rounded half away from zero.
pub fn subsample_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Draws `repeats` independent subsets of `round(fraction * N)` records.
/// Repeat `i` is seeded with `seed + i`; record order is preserved and each
/// subset gets its own manifest linked to the parent digest.
pub fn subsample(
    dataset: &Dataset,
    fraction: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let n = dataset.len();
    let k = subsample_size(n, fraction);
    let parent = dataset.manifest.digest();
    (0..repeats)
        .map(|i| {
            let repeat_seed = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed);
            let mut picked = index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            let lines: Vec<String> = picked.iter().map(|&j| dataset.lines()[j].clone()).collect();
            let mut stage_hashes = dataset.manifest.stage_hashes.clone();
            stage_hashes.insert(
                "records".into(),
                canonical::sha256_hex(lines.concat().as_bytes()),
            );
            stage_hashes.insert("parent".into(), parent.clone());
            let config_snapshot = canonical::to_canonical_value(&serde_json::json!({
                "parent": dataset.manifest.config_snapshot,
                "subsample": {
                    "fraction": fraction,
                    "repeat": i,
                    "seed": repeat_seed,
                },
            }));
            let manifest = DatasetManifest {
                records: lines.len() as u64,
                config_snapshot,
                stage_hashes,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                seed: repeat_seed,
            };
            Dataset::new(manifest, lines)
        })
        .collect()
}
