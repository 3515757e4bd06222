//! Domain types shared by every stage: heatmaps, boxes, masks, phrases and
//! the persisted grounding records.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};

/// Row-major grid of non-negative relevance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHeatmap")]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawHeatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl TryFrom<RawHeatmap> for Heatmap {
    type Error = Error;

    fn try_from(raw: RawHeatmap) -> Result<Self> {
        Heatmap::new(raw.height, raw.width, raw.values)
    }
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidHeatmap(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidHeatmap(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidHeatmap(format!(
                "value {v} at row {} col {} is not a finite non-negative score",
                idx / width,
                idx % width
            )));
        }
        Ok(Heatmap {
            height,
            width,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidHeatmap("ragged rows".into()));
        }
        Heatmap::new(height, width, rows.concat())
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Heatmap::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// First maximum in row-major order, as `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let idx = first_argmax(self.values.iter().copied());
        (idx / self.width, idx % self.width)
    }

    pub fn transpose(&self) -> Heatmap {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                values.push(self.get(r, c));
            }
        }
        Heatmap {
            height: self.width,
            width: self.height,
            values,
        }
    }

    /// Multiplies every score by `factor`, which must be finite and non-negative.
    pub fn scaled(&self, factor: f64) -> Result<Heatmap> {
        Heatmap::new(
            self.height,
            self.width,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Index of the first maximum. Callers guarantee a non-empty iterator.
pub(crate) fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Axis-aligned rectangle in normalized image coordinates.
///
/// Serialized on the wire as `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        let in_range = coords
            .iter()
            .all(|c| c.is_finite() && (0.0..=1.0).contains(c));
        if !in_range || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(coords));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Converts a pixel-space box to normalized coordinates, clamping to the image.
    pub fn from_pixels(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        image_w: u32,
        image_h: u32,
    ) -> Result<Self> {
        let (w, h) = (f64::from(image_w), f64::from(image_h));
        BBox::new(
            (x_min / w).clamp(0.0, 1.0),
            (y_min / h).clamp(0.0, 1.0),
            (x_max / w).clamp(0.0, 1.0),
            (y_max / h).clamp(0.0, 1.0),
        )
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-box containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BBox({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Binary rasterization of a box on a `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl BoxMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || mask.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask of {} cells does not fit {height}x{width}",
                mask.len()
            )));
        }
        Ok(BoxMask {
            height,
            width,
            mask,
        })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("ragged mask rows".into()));
        }
        let mask = rows.iter().flatten().map(|&v| v != 0).collect();
        BoxMask::new(height, width, mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn inside_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_degenerate(&self) -> bool {
        let inside = self.inside_count();
        inside == 0 || inside == self.mask.len()
    }

    pub fn ensure_non_degenerate(&self) -> Result<()> {
        match self.inside_count() {
            0 => Err(Error::DegenerateMask("no cell inside the box".into())),
            n if n == self.mask.len() => {
                Err(Error::DegenerateMask("every cell inside the box".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn transpose(&self) -> BoxMask {
        let mut mask = Vec::with_capacity(self.mask.len());
        for c in 0..self.width {
            for r in 0..self.height {
                mask.push(self.get(r, c));
            }
        }
        BoxMask {
            height: self.width,
            width: self.height,
            mask,
        }
    }
}

/// Rasterizes `bbox` onto a `height x width` grid.
///
/// Cell `(i, j)` is set iff its center `((j + 0.5) / width, (i + 0.5) / height)`
/// lies inside the closed box. Masks that come out all-zero or all-one are
/// rejected since the consistency losses are undefined on them.
pub fn rasterize_box(bbox: &BBox, height: usize, width: usize) -> Result<BoxMask> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    let mut mask = Vec::with_capacity(height * width);
    for i in 0..height {
        let cy = (i as f64 + 0.5) / height as f64;
        for j in 0..width {
            let cx = (j as f64 + 0.5) / width as f64;
            mask.push(bbox.contains(cx, cy));
        }
    }
    let mask = BoxMask::new(height, width, mask)?;
    mask.ensure_non_degenerate()?;
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseSource {
    Real,
    LlmShort,
    LlmLong,
    CommaSplit,
    PeriodSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPhrase")]
pub struct GroundingPhrase {
    text: String,
    source: PhraseSource,
    image_id: String,
}

#[derive(Deserialize)]
struct RawPhrase {
    text: String,
    source: PhraseSource,
    image_id: String,
}

impl TryFrom<RawPhrase> for GroundingPhrase {
    type Error = Error;

    fn try_from(raw: RawPhrase) -> Result<Self> {
        GroundingPhrase::new(raw.text, raw.source, raw.image_id)
    }
}

impl GroundingPhrase {
    pub fn new(
        text: impl Into<String>,
        source: PhraseSource,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Validation("phrase text is empty".into()));
        }
        if text.trim() != text {
            return Err(Error::Validation(format!(
                "phrase {text:?} has surrounding whitespace"
            )));
        }
        Ok(GroundingPhrase {
            text,
            source,
            image_id: image_id.into(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> PhraseSource {
        self.source
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }
}

/// Content hash plus storage location of an image payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub hash: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Caption,
    Recaption,
    Concept2text,
}

/// Where phrases are extracted from: the first image description, or a
/// fresh caption of the synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Caption,
    Recaption,
}

impl Paradigm {
    pub fn stage_count(self) -> usize {
        match self {
            Paradigm::Caption => 4,
            Paradigm::Recaption => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTraceEntry {
    pub stage: String,
    pub backend: String,
    pub request_hash: String,
}

/// One image-phrase-box triplet with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub image_ref: ImageRef,
    pub phrase: GroundingPhrase,
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    pub pipeline: PipelineKind,
    pub paradigm: Paradigm,
    pub stage_trace: Vec<StageTraceEntry>,
}

impl GroundingRecord {
    pub fn validate(&self, detector_threshold: f64) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Validation("record has no boxes".into()));
        }
        if self.boxes.len() != self.confidences.len() {
            return Err(Error::Validation(format!(
                "{} boxes but {} confidences",
                self.boxes.len(),
                self.confidences.len()
            )));
        }
        for &c in &self.confidences {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Validation(format!("confidence {c} outside [0, 1]")));
            }
            if c <= detector_threshold {
                return Err(Error::Validation(format!(
                    "confidence {c} not above detector threshold {detector_threshold}"
                )));
            }
        }
        let expected = self.paradigm.stage_count();
        if self.stage_trace.len() != expected {
            return Err(Error::Validation(format!(
                "stage trace has {} entries, {:?} paradigm defines {expected}",
                self.stage_trace.len(),
                self.paradigm
            )));
        }
        let pipeline_matches = matches!(
            (self.pipeline, self.paradigm),
            (PipelineKind::Concept2text, _)
                | (PipelineKind::Caption, Paradigm::Caption)
                | (PipelineKind::Recaption, Paradigm::Recaption)
        );
        if !pipeline_matches {
            return Err(Error::Validation(format!(
                "pipeline {:?} inconsistent with paradigm {:?}",
                self.pipeline, self.paradigm
            )));
        }
        Ok(())
    }
}

/// Content-addressed index of a synthesized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: u64,
    pub config_snapshot: serde_json::Value,
    pub stage_hashes: BTreeMap<String, String>,
    pub created_at: String,
    pub seed: u64,
}

impl DatasetManifest {
    /// Digest over everything except `created_at`.
    pub fn digest(&self) -> String {
        let body = serde_json::json!({
            "records": self.records,
            "config_snapshot": self.config_snapshot,
            "stage_hashes": self.stage_hashes,
            "seed": self.seed,
        });
        canonical::sha256_hex(canonical::to_canonical_string(&body).as_bytes())
    }

    /// Checks that `record_stream` (the exact JSONL bytes) matches the
    /// manifest's record digest and count.
    pub fn verify_records(&self, record_stream: &[u8]) -> Result<()> {
        let expected = self
            .stage_hashes
            .get("records")
            .ok_or_else(|| Error::Validation("manifest has no records digest".into()))?;
        let actual = canonical::sha256_hex(record_stream);
        if &actual != expected {
            return Err(Error::Validation(format!(
                "record digest {actual} does not match manifest {expected}"
            )));
        }
        let lines = record_stream
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .count() as u64;
        if lines != self.records {
            return Err(Error::Validation(format!(
                "manifest lists {} records, stream has {lines}",
                self.records
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn full_cover_box_is_degenerate() {
        for (h, w) in [(1, 1), (2, 3), (7, 7)] {
            let err = rasterize_box(&bx(0.0, 0.0, 1.0, 1.0), h, w).unwrap_err();
            assert!(matches!(err, Error::DegenerateMask(_)));
        }
    }

    #[test]
    fn left_half_on_2x2() {
        let m = rasterize_box(&bx(0.0, 0.0, 0.5, 1.0), 2, 2).unwrap();
        assert_eq!(m, BoxMask::from_rows(&[vec![1, 0], vec![1, 0]]).unwrap());
    }

    #[test]
    fn centered_box_on_4x4_sets_four_cells() {
        let m = rasterize_box(&bx(0.25, 0.25, 0.75, 0.75), 4, 4).unwrap();
        // centers at 0.125, 0.375, 0.625, 0.875; only the middle two fall inside
        let expected = BoxMask::from_rows(&[
            vec![0, 0, 0, 0],
            vec![0, 1, 1, 0],
            vec![0, 1, 1, 0],
            vec![0, 0, 0, 0],
        ])
        .unwrap();
        assert_eq!(m, expected);
    }

    #[test]
    fn tiny_box_between_centers_is_rejected() {
        let err = rasterize_box(&bx(0.01, 0.01, 0.02, 0.02), 4, 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask(_)));
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0.6, 0, 0.5, 1]").is_err());
        let b: BBox = serde_json::from_str("[0.1, 0.2, 0.3, 0.4]").unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.1,0.2,0.3,0.4]");
    }

    #[test]
    fn pixel_boxes_are_normalized() {
        let b = BBox::from_pixels(64.0, 0.0, 128.0, 256.0, 256, 256).unwrap();
        assert_eq!(b.to_array(), [0.25, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn heatmap_rejects_negative_and_nan() {
        assert!(Heatmap::new(1, 2, vec![0.0, -1e-9]).is_err());
        assert!(Heatmap::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Heatmap::new(0, 2, vec![]).is_err());
        assert!(Heatmap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(
            serde_json::from_str::<Heatmap>(r#"{"height":1,"width":1,"values":[-1]}"#).is_err()
        );
    }

    #[test]
    fn argmax_takes_first_row_major() {
        let h = Heatmap::from_rows(&[vec![0.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(h.argmax(), (0, 1));
        assert_eq!(Heatmap::zeros(3, 3).unwrap().argmax(), (0, 0));
    }

    #[test]
    fn phrase_rejects_whitespace() {
        assert!(GroundingPhrase::new(" a dog", PhraseSource::Real, "i").is_err());
        assert!(GroundingPhrase::new("", PhraseSource::Real, "i").is_err());
        assert!(GroundingPhrase::new("a dog", PhraseSource::Real, "i").is_ok());
    }
}
