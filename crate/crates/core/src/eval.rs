//! Pointing-game evaluation: a sample is a hit when the heatmap's peak,
//! taken at image resolution, lands inside any ground-truth box.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::upsample_bilinear;
use crate::model::{BBox, Heatmap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub sample_id: String,
    pub heatmap: Heatmap,
    pub image_h: usize,
    pub image_w: usize,
    pub gt_boxes: Vec<BBox>,
}

/// One line of a heatmap stream, without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapLine {
    pub sample_id: String,
    pub heatmap: Heatmap,
    pub image_h: usize,
    pub image_w: usize,
}

/// One line of a ground-truth stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLine {
    pub sample_id: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub hit: bool,
    /// Peak location `(row, col)` in image pixels.
    pub loc: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
    pub per_sample: Vec<SampleOutcome>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,hit,row,col\n");
        for s in &self.per_sample {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                csv_field(&s.sample_id),
                u8::from(s.hit),
                s.loc.0,
                s.loc.1
            );
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn pointing_hit(sample: &EvalSample) -> Result<(bool, (usize, usize))> {
    if sample.gt_boxes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample {} has no ground-truth boxes",
            sample.sample_id
        )));
    }
    let full = upsample_bilinear(&sample.heatmap, sample.image_h, sample.image_w)?;
    let (row, col) = full.argmax();
    let x = (col as f64 + 0.5) / sample.image_w as f64;
    let y = (row as f64 + 0.5) / sample.image_h as f64;
    let hit = sample.gt_boxes.iter().any(|b| b.contains(x, y));
    Ok((hit, (row, col)))
}

pub fn pointing_accuracy(samples: &[EvalSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| {
            pointing_hit(s).map(|(hit, loc)| SampleOutcome {
                sample_id: s.sample_id.clone(),
                hit,
                loc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hits = per_sample.iter().filter(|s| s.hit).count();
    let total = per_sample.len();
    Ok(EvalReport {
        hits,
        total,
        accuracy: hits as f64 / total as f64,
        per_sample,
    })
}

/// Pairs heatmaps with ground truth by `sample_id`, keeping heatmap order.
pub fn join_samples(
    heatmaps: Vec<HeatmapLine>,
    ground_truth: Vec<GroundTruthLine>,
) -> Result<Vec<EvalSample>> {
    let mut gt: HashMap<String, Vec<BBox>> = HashMap::with_capacity(ground_truth.len());
    for line in ground_truth {
        gt.entry(line.sample_id).or_default().extend(line.boxes);
    }
    heatmaps
        .into_iter()
        .map(|h| {
            let gt_boxes = gt.remove(&h.sample_id).ok_or_else(|| {
                Error::Validation(format!("no ground truth for sample {}", h.sample_id))
            })?;
            Ok(EvalSample {
                sample_id: h.sample_id,
                heatmap: h.heatmap,
                image_h: h.image_h,
                image_w: h.image_w,
                gt_boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, heatmap: Heatmap, boxes: Vec<BBox>) -> EvalSample {
        EvalSample {
            sample_id: id.into(),
            image_h: heatmap.height() * 4,
            image_w: heatmap.width() * 4,
            heatmap,
            gt_boxes: boxes,
        }
    }

    #[test]
    fn peak_in_box_is_hit() {
        let mut v = vec![0.0; 16];
        v[5] = 1.0; // row 1, col 1
        let h = Heatmap::new(4, 4, v).unwrap();
        let b = BBox::new(0.2, 0.2, 0.5, 0.5).unwrap();
        let (hit, loc) = pointing_hit(&sample("a", h, vec![b])).unwrap();
        assert!(hit);
        assert!((4..8).contains(&loc.0) && (4..8).contains(&loc.1));
    }

    #[test]
    fn zero_map_points_at_origin() {
        let h = Heatmap::zeros(3, 3).unwrap();
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(
            pointing_hit(&sample("z", h, vec![b])).unwrap(),
            (false, (0, 0))
        );
    }

    #[test]
    fn union_of_boxes() {
        let h = Heatmap::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let left = BBox::new(0.0, 0.0, 0.4, 1.0).unwrap();
        let right = BBox::new(0.6, 0.0, 1.0, 1.0).unwrap();
        assert!(!pointing_hit(&sample("l", h.clone(), vec![left])).unwrap().0);
        assert!(pointing_hit(&sample("lr", h, vec![left, right])).unwrap().0);
    }

    #[test]
    fn accuracy_arithmetic() {
        let inside = BBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        let h_hit = Heatmap::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let h_miss = Heatmap::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let one = pointing_accuracy(&[sample("0", h_hit.clone(), vec![inside])]).unwrap();
        assert_eq!(one.accuracy, 1.0);
        let four: Vec<_> = [&h_hit, &h_hit, &h_miss, &h_hit]
            .iter()
            .enumerate()
            .map(|(i, h)| sample(&i.to_string(), (*h).clone(), vec![inside]))
            .collect();
        let report = pointing_accuracy(&four).unwrap();
        assert_eq!((report.hits, report.total, report.accuracy), (3, 4, 0.75));
        assert_eq!(report.per_sample[2].sample_id, "2");
        assert!(report.to_csv().starts_with("sample_id,hit,row,col\n0,1,"));
    }

    #[test]
    fn errors() {
        assert!(pointing_accuracy(&[]).is_err());
        let h = Heatmap::zeros(2, 2).unwrap();
        assert!(pointing_hit(&sample("e", h, vec![])).is_err());
    }

    #[test]
    fn join_by_id() {
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let h = Heatmap::zeros(2, 2).unwrap();
        let lines = vec![HeatmapLine {
            sample_id: "x".into(),
            heatmap: h.clone(),
            image_h: 8,
            image_w: 8,
        }];
        let gt = vec![GroundTruthLine {
            sample_id: "x".into(),
            boxes: vec![b],
        }];
        let joined = join_samples(lines.clone(), gt).unwrap();
        assert_eq!(joined[0].gt_boxes, vec![b]);
        assert!(join_samples(lines, vec![]).is_err());
    }
}
