//! GradCAM over externally supplied activations and gradients, plus
//! resampling helpers for comparing heatmaps against pixel-space boxes.

use crate::error::{Error, Result};
use crate::model::Heatmap;

/// `K` channels of `h x w` activations with their loss gradients, each
/// stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    channels: usize,
    height: usize,
    width: usize,
    activations: Vec<f64>,
    gradients: Vec<f64>,
}

impl ActivationStack {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        activations: Vec<f64>,
        gradients: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "activation stack dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let n = channels * height * width;
        if activations.len() != n || gradients.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} activations and gradients, got {} and {}",
                activations.len(),
                gradients.len()
            )));
        }
        if activations.iter().chain(&gradients).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "activation stack contains non-finite entries".into(),
            ));
        }
        Ok(ActivationStack {
            channels,
            height,
            width,
            activations,
            gradients,
        })
    }

    /// Builds a stack from per-channel row lists.
    pub fn from_channels(
        activations: &[Vec<Vec<f64>>],
        gradients: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let channels = activations.len();
        let height = activations.first().map_or(0, Vec::len);
        let width = activations
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len);
        let flatten = |chs: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
            if chs.len() != channels
                || chs
                    .iter()
                    .any(|c| c.len() != height || c.iter().any(|r| r.len() != width))
            {
                return Err(Error::InvalidArgument(
                    "activation and gradient shapes disagree".into(),
                ));
            }
            Ok(chs.iter().flatten().flatten().copied().collect())
        };
        ActivationStack::new(
            channels,
            height,
            width,
            flatten(activations)?,
            flatten(gradients)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn plane(&self, k: usize) -> std::ops::Range<usize> {
        let size = self.height * self.width;
        k * size..(k + 1) * size
    }
}

/// Classic GradCAM: channel weights are the spatial mean of the gradients,
/// and the map is the rectified weighted sum of activation planes.
pub fn gradcam(stack: &ActivationStack) -> Heatmap {
    let size = stack.height * stack.width;
    let mut out = vec![0.0; size];
    for k in 0..stack.channels {
        let range = stack.plane(k);
        let weight = stack.gradients[range.clone()].iter().sum::<f64>() / size as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&stack.activations[range]) {
            *o += weight * a;
        }
    }
    for v in &mut out {
        *v = v.max(0.0);
    }
    Heatmap::new(stack.height, stack.width, out).expect("rectified finite map")
}

/// Half-pixel bilinear resampling: `src = (dst + 0.5) * (S / D) - 0.5`,
/// clamped to `[0, S - 1]`.
pub fn upsample_bilinear(map: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output dims must be positive, got {out_h}x{out_w}"
        )));
    }
    let (in_h, in_w) = map.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let ys = sample_positions(in_h, out_h);
    let xs = sample_positions(in_w, out_w);
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            // rounding can dip a hair below zero between equal neighbours
            values.push((top * (1.0 - fy) + bottom * fy).max(0.0));
        }
    }
    Heatmap::new(out_h, out_w, values)
}

/// For each output index: (lower source index, upper source index, weight of upper).
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_minmax(map: &Heatmap) -> Heatmap {
    let min = map.values().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        map.values()
            .iter()
            .map(|v| (v - min) / (max - min))
            .collect()
    } else {
        vec![0.0; map.values().len()]
    };
    Heatmap::new(map.height(), map.width(), values).expect("normalized map is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(h: &Heatmap) -> Vec<Vec<f64>> {
        h.values().chunks(h.width()).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn single_channel_unit_gradients() {
        let stack = ActivationStack::from_channels(
            &[vec![vec![1.0, -2.0], vec![3.0, 0.0]]],
            &[vec![vec![1.0, 1.0], vec![1.0, 1.0]]],
        )
        .unwrap();
        assert_eq!(rows(&gradcam(&stack)), vec![vec![1.0, 0.0], vec![3.0, 0.0]]);
    }

    #[test]
    fn zero_gradients_give_zero_map() {
        let stack = ActivationStack::from_channels(
            &[vec![vec![1.0, 5.0], vec![3.0, 2.0]]],
            &[vec![vec![0.0, 0.0], vec![0.0, 0.0]]],
        )
        .unwrap();
        assert!(gradcam(&stack).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_weighted_sum() {
        let stack = ActivationStack::from_channels(
            &[
                vec![vec![1.0, 0.0], vec![0.0, 0.0]],
                vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            ],
            &[
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![-1.0, -1.0], vec![-1.0, -1.0]],
            ],
        )
        .unwrap();
        assert_eq!(rows(&gradcam(&stack)), vec![vec![0.5, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn stack_validation() {
        assert!(ActivationStack::new(1, 1, 2, vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(ActivationStack::new(1, 1, 1, vec![f64::INFINITY], vec![0.0]).is_err());
        assert!(
            ActivationStack::from_channels(&[vec![vec![1.0]]], &[vec![vec![1.0, 2.0]]]).is_err()
        );
    }

    #[test]
    fn upsample_constant_map() {
        let m = Heatmap::new(2, 2, vec![0.7; 4]).unwrap();
        let up = upsample_bilinear(&m, 8, 8).unwrap();
        assert_eq!(up.shape(), (8, 8));
        assert!(up.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_identity() {
        let m = Heatmap::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).unwrap();
        assert_eq!(upsample_bilinear(&m, 2, 3).unwrap(), m);
    }

    #[test]
    fn upsample_ramp() {
        let m = Heatmap::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let up = upsample_bilinear(&m, 1, 4).unwrap();
        assert_eq!(up.values(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(upsample_bilinear(&m, 0, 4).is_err());
    }

    #[test]
    fn minmax_cases() {
        let m = Heatmap::from_rows(&[vec![0.0, 2.0], vec![4.0, 2.0]]).unwrap();
        assert_eq!(normalize_minmax(&m).values(), &[0.0, 0.5, 1.0, 0.5]);
        let c = Heatmap::new(2, 2, vec![3.0; 4]).unwrap();
        assert!(normalize_minmax(&c).values().iter().all(|&v| v == 0.0));
        let unit = Heatmap::from_rows(&[vec![0.0, 0.3], vec![1.0, 0.6]]).unwrap();
        assert_eq!(normalize_minmax(&unit), unit);
    }
}
