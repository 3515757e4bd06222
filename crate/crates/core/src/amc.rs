//! Attention-mask-consistency losses with analytic subgradients, plus the
//! in-batch contrastive and matching losses of the base vision-language model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoxMask, Heatmap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmcConfig {
    /// Margin of the max-term.
    pub delta1: f64,
    /// Margin of the mean-term.
    pub delta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for AmcConfig {
    fn default() -> Self {
        AmcConfig {
            delta1: 0.5,
            delta2: 0.1,
            lambda1: 0.8,
            lambda2: 0.2,
        }
    }
}

impl AmcConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss value with its (sub)gradient with respect to the heatmap, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    pub shape: (usize, usize),
}

impl LossWithGrad {
    fn zero(shape: (usize, usize)) -> Self {
        LossWithGrad {
            value: 0.0,
            grad: vec![0.0; shape.0 * shape.1],
            shape,
        }
    }

    pub fn grad_at(&self, row: usize, col: usize) -> f64 {
        self.grad[row * self.shape.1 + col]
    }
}

fn check_pair(heatmap: &Heatmap, mask: &BoxMask) -> Result<()> {
    if heatmap.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: heatmap.shape(),
            actual: mask.shape(),
        });
    }
    mask.ensure_non_degenerate()
}

fn check_margin(name: &str, margin: f64) -> Result<()> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and >= 0, got {margin}"
        )));
    }
    Ok(())
}

/// First maximum among cells where `mask == want`, as (index, value).
fn masked_argmax(heatmap: &Heatmap, mask: &BoxMask, want: bool) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, (&v, &m)) in heatmap.values().iter().zip(mask.cells()).enumerate() {
        if m == want && v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Max-term hinge: the largest score inside the box should beat the largest
/// score outside by `delta1`.
///
/// Heatmaps are non-negative, so the max over `(1 - B) * G` equals the max
/// over the outside cells. Ties pick the first cell in row-major order.
pub fn l_max(heatmap: &Heatmap, mask: &BoxMask, delta1: f64) -> Result<LossWithGrad> {
    check_pair(heatmap, mask)?;
    check_margin("delta1", delta1)?;
    let (out_idx, out_max) = masked_argmax(heatmap, mask, false);
    let (in_idx, in_max) = masked_argmax(heatmap, mask, true);
    let pre = out_max - in_max + delta1;
    let mut loss = LossWithGrad::zero(heatmap.shape());
    if pre > 0.0 {
        loss.value = pre;
        loss.grad[out_idx] += 1.0;
        loss.grad[in_idx] -= 1.0;
    }
    Ok(loss)
}

/// Mean-term hinge: the mean score inside the box should beat the mean
/// outside by `delta2`.
pub fn l_mean(heatmap: &Heatmap, mask: &BoxMask, delta2: f64) -> Result<LossWithGrad> {
    check_pair(heatmap, mask)?;
    check_margin("delta2", delta2)?;
    let (mut in_sum, mut out_sum) = (0.0, 0.0);
    for (&v, &m) in heatmap.values().iter().zip(mask.cells()) {
        if m {
            in_sum += v;
        } else {
            out_sum += v;
        }
    }
    let n_in = mask.inside_count();
    let n_out = mask.cells().len() - n_in;
    let pre = out_sum / n_out as f64 - in_sum / n_in as f64 + delta2;
    let mut loss = LossWithGrad::zero(heatmap.shape());
    if pre > 0.0 {
        loss.value = pre;
        let (g_in, g_out) = (-1.0 / n_in as f64, 1.0 / n_out as f64);
        for (g, &m) in loss.grad.iter_mut().zip(mask.cells()) {
            *g = if m { g_in } else { g_out };
        }
    }
    Ok(loss)
}

/// `lambda1 * l_max + lambda2 * l_mean`, gradients combined the same way.
pub fn l_amc(heatmap: &Heatmap, mask: &BoxMask, cfg: &AmcConfig) -> Result<LossWithGrad> {
    cfg.validate()?;
    let max_term = l_max(heatmap, mask, cfg.delta1)?;
    let mean_term = l_mean(heatmap, mask, cfg.delta2)?;
    Ok(LossWithGrad {
        value: cfg.lambda1 * max_term.value + cfg.lambda2 * mean_term.value,
        grad: max_term
            .grad
            .iter()
            .zip(&mean_term.grad)
            .map(|(a, b)| cfg.lambda1 * a + cfg.lambda2 * b)
            .collect(),
        shape: heatmap.shape(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub per_sample: Vec<LossWithGrad>,
    /// Arithmetic mean of the per-sample values.
    pub mean: f64,
}

/// Evaluates `l_amc` over a batch in parallel; results keep input order.
pub fn batch_amc(samples: &[(Heatmap, BoxMask)], cfg: &AmcConfig) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(Error::Empty("AMC batch"));
    }
    let per_sample = samples
        .par_iter()
        .map(|(h, m)| l_amc(h, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_sample.iter().map(|l| l.value).sum::<f64>() / per_sample.len() as f64;
    Ok(BatchLoss { per_sample, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItcLoss {
    pub value: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
}

const NORM_TOLERANCE: f64 = 1e-6;

/// Symmetric in-batch contrastive loss over cosine logits scaled by
/// `1 / temperature`. Row `i` of each side forms the positive pair.
pub fn itc_loss(
    image_embeds: &[Vec<f64>],
    text_embeds: &[Vec<f64>],
    temperature: f64,
) -> Result<ItcLoss> {
    for (side, rows) in [("image", image_embeds), ("text", text_embeds)] {
        for (i, row) in rows.iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "{side} embedding {i} has L2 norm {norm}, expected 1"
                )));
            }
        }
    }
    itc_forward_backward(image_embeds, text_embeds, temperature)
}

/// Same as [`itc_loss`] without the unit-norm check, treating every entry as
/// a free variable. Used for gradient checking at perturbed points.
pub fn itc_forward_backward(
    image_embeds: &[Vec<f64>],
    text_embeds: &[Vec<f64>],
    temperature: f64,
) -> Result<ItcLoss> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = image_embeds.len();
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if text_embeds.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} image embeddings but {} text embeddings",
            text_embeds.len()
        )));
    }
    let d = image_embeds[0].len();
    if image_embeds.iter().chain(text_embeds).any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("embedding dimensions differ".into()));
    }

    let logits: Vec<Vec<f64>> = image_embeds
        .iter()
        .map(|img| {
            text_embeds
                .iter()
                .map(|txt| dot(img, txt) / temperature)
                .collect()
        })
        .collect();

    // d(loss)/d(logits), accumulated from both directions.
    let mut dlogits = vec![vec![0.0; n]; n];
    let scale = 0.5 / n as f64;
    let mut value = 0.0;

    for i in 0..n {
        let row = &logits[i];
        let lse = log_sum_exp(row.iter().copied());
        value += scale * (lse - row[i]);
        for j in 0..n {
            dlogits[i][j] += scale * ((row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| logits[i][j]));
        value += scale * (lse - logits[j][j]);
        for i in 0..n {
            dlogits[i][j] += scale * ((logits[i][j] - lse).exp() - if i == j { 1.0 } else { 0.0 });
        }
    }

    let mut grad_image = vec![vec![0.0; d]; n];
    let mut grad_text = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dlogits[i][j] / temperature;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_image[i][k] += g * text_embeds[j][k];
                grad_text[j][k] += g * image_embeds[i][k];
            }
        }
    }

    Ok(ItcLoss {
        value,
        grad_image,
        grad_text,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

const PROB_EPS: f64 = 1e-12;

/// Binary cross-entropy of a match probability against its label.
/// The probability is clamped to `[1e-12, 1 - 1e-12]`.
pub fn itm_loss(match_prob: f64, is_match: bool) -> f64 {
    let p = match_prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if is_match {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
