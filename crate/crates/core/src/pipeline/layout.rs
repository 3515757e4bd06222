use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EmbedRequest};
use crate::boxes::{
    max_compatible_indices, select_by_dissimilarity, select_random, TextBoxPool,
    DEFAULT_IOU_THRESHOLD, DEFAULT_LAYOUT_CAP,
};
use crate::error::{Error, Result};
use crate::model::BBox;

use super::synth::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutStrategy {
    /// Keep every item.
    All,
    /// Seeded uniform subset of at most `cap` items.
    Random,
    /// The `cap` most mutually dissimilar phrases.
    Text,
    /// Largest set of boxes with pairwise IoU below the threshold.
    Iou,
}

impl LayoutStrategy {
    pub const ALL: [LayoutStrategy; 4] = [
        LayoutStrategy::All,
        LayoutStrategy::Random,
        LayoutStrategy::Text,
        LayoutStrategy::Iou,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutStrategy::All => "all",
            LayoutStrategy::Random => "random",
            LayoutStrategy::Text => "text",
            LayoutStrategy::Iou => "iou",
        }
    }
}

impl fmt::Display for LayoutStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayoutStrategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layout strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutOptions {
    pub strategy: LayoutStrategy,
    pub cap: usize,
    pub iou_threshold: f64,
    pub seed: u64,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            strategy: LayoutStrategy::All,
            cap: DEFAULT_LAYOUT_CAP,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub pools: u64,
    pub input_items: u64,
    pub output_items: u64,
    /// Pools too large for the exact IoU solver.
    pub greedy_pools: u64,
}

/// Applies one selection strategy to every pool. Random draws use a
/// per-pool seed derived from `seed` and the pool position.
pub fn run_layout_selection(
    pools: &[TextBoxPool],
    options: &LayoutOptions,
) -> Result<(Vec<TextBoxPool>, LayoutStats)> {
    let selected: Vec<(TextBoxPool, bool)> = pools
        .par_iter()
        .enumerate()
        .map(|(i, pool)| {
            pool.validate()?;
            match options.strategy {
                LayoutStrategy::All => Ok((pool.clone(), true)),
                LayoutStrategy::Random => {
                    let seed = derive_seed(options.seed, &i.to_string());
                    Ok((select_random(pool, options.cap, seed)?, true))
                }
                LayoutStrategy::Text => Ok((select_by_dissimilarity(pool, options.cap)?, true)),
                LayoutStrategy::Iou => {
                    let boxes: Vec<BBox> = pool.items.iter().map(|it| it.bbox).collect();
                    let set = max_compatible_indices(&boxes, options.iou_threshold)?;
                    Ok((pool.subset(&set.indices), set.exact))
                }
            }
        })
        .collect::<Result<_>>()?;
    let stats = LayoutStats {
        pools: pools.len() as u64,
        input_items: pools.iter().map(|p| p.len() as u64).sum(),
        output_items: selected.iter().map(|(p, _)| p.len() as u64).sum(),
        greedy_pools: selected.iter().filter(|(_, exact)| !exact).count() as u64,
    };
    Ok((selected.into_iter().map(|(p, _)| p).collect(), stats))
}

/// Embeds the phrases of pools that have no embeddings yet.
pub fn fill_embeddings(pools: &mut [TextBoxPool], backend: &dyn Backend) -> Result<()> {
    for pool in pools
        .iter_mut()
        .filter(|p| p.embeddings.is_none() && !p.is_empty())
    {
        let texts = pool.items.iter().map(|it| it.phrase.clone()).collect();
        let embeddings = backend.embed(&EmbedRequest { texts })?.embeddings;
        *pool =
            std::mem::replace(pool, TextBoxPool::new("", vec![])).with_embeddings(embeddings)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::boxes::TextBoxItem;

    fn pool(n: usize) -> TextBoxPool {
        let items = (0..n)
            .map(|i| {
                let x = 0.02 * i as f64;
                TextBoxItem {
                    phrase: format!("object {i}"),
                    bbox: BBox::new(x, 0.1, x + 0.3, 0.5).unwrap(),
                }
            })
            .collect();
        TextBoxPool::new(format!("img-{n}"), items)
    }

    #[test]
    fn strategies_respect_caps_and_order() {
        let pools = vec![pool(14), pool(3)];
        for strategy in [LayoutStrategy::Random, LayoutStrategy::All] {
            let opts = LayoutOptions {
                strategy,
                ..LayoutOptions::default()
            };
            let (out, stats) = run_layout_selection(&pools, &opts).unwrap();
            assert_eq!(stats.input_items, 17);
            if strategy == LayoutStrategy::Random {
                assert_eq!(out[0].len(), 10);
            }
            assert_eq!(out[1], pools[1]);
            for p in &out {
                let pos: Vec<usize> = p
                    .items
                    .iter()
                    .map(|it| {
                        pools[0]
                            .items
                            .iter()
                            .chain(&pools[1].items)
                            .position(|x| x == it)
                            .unwrap()
                    })
                    .collect();
                assert!(pos.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn iou_strategy_reports_exactness() {
        let (out, stats) = run_layout_selection(
            &[pool(30), pool(5)],
            &LayoutOptions {
                strategy: LayoutStrategy::Iou,
                ..LayoutOptions::default()
            },
        )
        .unwrap();
        assert_eq!(stats.greedy_pools, 1);
        assert!(!out[1].is_empty());
    }

    #[test]
    fn text_strategy_needs_embeddings() {
        let mut pools = vec![pool(12)];
        let opts = LayoutOptions {
            strategy: LayoutStrategy::Text,
            ..LayoutOptions::default()
        };
        assert!(run_layout_selection(&pools, &opts).is_err());
        fill_embeddings(&mut pools, &MockBackend::new(1)).unwrap();
        assert_eq!(pools[0].image_id, "img-12");
        let (out, _) = run_layout_selection(&pools, &opts).unwrap();
        assert_eq!(out[0].len(), 10);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in LayoutStrategy::ALL {
            assert_eq!(s.as_str().parse::<LayoutStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<LayoutStrategy>().is_err());
    }
}
