//! Central finite-difference checks of the analytic loss gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amc::{itc_forward_backward, l_amc, l_max, l_mean, AmcConfig, LossWithGrad};
use crate::error::Result;
use crate::model::{rasterize_box, BBox, BoxMask, Heatmap};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Minimum distance from any kink (hinge zero, tied maxima) for an instance
/// to count as non-degenerate.
const KINK_MARGIN: f64 = 1e-3;

/// `‖a - b‖ / (‖a‖ + ‖b‖)`, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Worst relative error per loss.
    pub max_relative_error: BTreeMap<String, f64>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn second_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        if v > a {
            (v, a)
        } else {
            (a, b.max(v))
        }
    })
}

/// Random heatmap and mask whose losses are smooth at the sampled point.
pub fn smooth_amc_instance(rng: &mut impl Rng, cfg: &AmcConfig) -> (Heatmap, BoxMask) {
    loop {
        let h = rng.gen_range(2..=16);
        let w = rng.gen_range(2..=16);
        let (x0, x1) = ordered(rng);
        let (y0, y1) = ordered(rng);
        let Ok(bbox) = BBox::new(x0, y0, x1, y1) else {
            continue;
        };
        let Ok(mask) = rasterize_box(&bbox, h, w) else {
            continue;
        };
        let values: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.01..1.0)).collect();
        let map = Heatmap::new(h, w, values).expect("finite non-negative values");
        let side = |want: bool| {
            map.values()
                .iter()
                .zip(mask.cells())
                .filter(move |(_, &m)| m == want)
                .map(|(&v, _)| v)
        };
        let (in_max, in_second) = second_max(side(true));
        let (out_max, out_second) = second_max(side(false));
        let mean = |want: bool| side(want).sum::<f64>() / side(want).count() as f64;
        let pre_max = out_max - in_max + cfg.delta1;
        let pre_mean = mean(false) - mean(true) + cfg.delta2;
        let smooth = (in_max - in_second).abs() > KINK_MARGIN
            && (out_max - out_second).abs() > KINK_MARGIN
            && pre_max.abs() > KINK_MARGIN
            && pre_mean.abs() > KINK_MARGIN;
        if smooth {
            return (map, mask);
        }
    }
}

fn ordered(rng: &mut impl Rng) -> (f64, f64) {
    let a: f64 = rng.gen_range(0.0..1.0);
    let b: f64 = rng.gen_range(0.0..1.0);
    (a.min(b), a.max(b))
}

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn check_map_loss(
    map: &Heatmap,
    h: f64,
    analytic: LossWithGrad,
    loss: impl Fn(&Heatmap) -> Result<LossWithGrad>,
) -> f64 {
    let (rows, cols) = map.shape();
    let numeric = numeric_gradient(map.values(), h, |x| {
        let probe = Heatmap::new(rows, cols, x.to_vec()).expect("perturbation stays valid");
        loss(&probe)
            .expect("same shape as the checked instance")
            .value
    });
    relative_error(&analytic.grad, &numeric)
}

/// Checks `l_max`, `l_mean`, `l_amc` and the contrastive loss on `trials`
/// random smooth instances each.
pub fn run_gradcheck(trials: usize, seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let cfg = AmcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        trials,
        step: h,
        tolerance,
        ..GradCheckReport::default()
    };
    let note = |name: &str, err: f64, report: &mut GradCheckReport| {
        let worst = report
            .max_relative_error
            .entry(name.to_string())
            .or_insert(0.0);
        *worst = worst.max(err);
        if err.is_nan() || err >= tolerance {
            report.failures += 1;
        }
    };
    for _ in 0..trials {
        let (map, mask) = smooth_amc_instance(&mut rng, &cfg);
        let err = check_map_loss(&map, h, l_max(&map, &mask, cfg.delta1)?, |m| {
            l_max(m, &mask, cfg.delta1)
        });
        note("l_max", err, &mut report);
        let err = check_map_loss(&map, h, l_mean(&map, &mask, cfg.delta2)?, |m| {
            l_mean(m, &mask, cfg.delta2)
        });
        note("l_mean", err, &mut report);
        let err = check_map_loss(&map, h, l_amc(&map, &mask, &cfg)?, |m| {
            l_amc(m, &mask, &cfg)
        });
        note("l_amc", err, &mut report);

        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=8);
        let temperature = rng.gen_range(0.05..1.0);
        let images = unit_rows(&mut rng, n, d);
        let texts = unit_rows(&mut rng, n, d);
        let analytic = itc_forward_backward(&images, &texts, temperature)?;
        let mut flat: Vec<f64> = images.iter().chain(&texts).flatten().copied().collect();
        let numeric = numeric_gradient(&flat, h, |x| {
            let rows: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            itc_forward_backward(&rows[..n], &rows[n..], temperature)
                .expect("shapes unchanged")
                .value
        });
        flat = analytic
            .grad_image
            .iter()
            .chain(&analytic.grad_text)
            .flatten()
            .copied()
            .collect();
        note("itc_loss", relative_error(&flat, &numeric), &mut report);
    }
    Ok(report)
}
