use std::path::Path;

use crate::boxes::DEFAULT_DETECTOR_THRESHOLD;
use crate::canonical;
use crate::error::{Error, Result};
use crate::model::{DatasetManifest, GroundingRecord};

use super::cache::write_atomic;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Canonical JSONL line for one record, newline included.
pub fn record_line(record: &GroundingRecord) -> String {
    let mut line = canonical::to_canonical_string(record);
    line.push('\n');
    line
}

/// A record stream with its manifest. Lines are kept verbatim so that
/// subsets hash exactly as they are written.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    lines: Vec<String>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, lines: Vec<String>) -> Result<Self> {
        let dataset = Dataset { manifest, lines };
        dataset.manifest.verify_records(&dataset.bytes())?;
        Ok(dataset)
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.lines.concat().into_bytes()
    }

    /// Detector threshold the dataset was built with.
    pub fn detector_threshold(&self) -> f64 {
        self.manifest
            .config_snapshot
            .get("detector_threshold")
            .and_then(|v| v.as_f64())
            .unwrap_or(DEFAULT_DETECTOR_THRESHOLD)
    }

    /// Parses and re-validates every record.
    pub fn records(&self) -> Result<Vec<GroundingRecord>> {
        let threshold = self.detector_threshold();
        self.lines
            .iter()
            .enumerate()
            .map(|(i, line)| {
                let rec: GroundingRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
                rec.validate(threshold)
                    .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
                Ok(rec)
            })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let records_path = dir.join(RECORDS_FILE);
        let bytes = std::fs::read(&records_path).map_err(|e| Error::io(&records_path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Validation(format!("{}: {e}", records_path.display())))?;
        let lines = text.split_inclusive('\n').map(str::to_string).collect();
        let dataset = Dataset::new(manifest, lines)?;
        dataset.records()?;
        Ok(dataset)
    }

    /// Writes records, then the manifest, each atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(RECORDS_FILE), &self.bytes())?;
        let manifest =
            serde_json::to_string_pretty(&canonical::to_canonical_value(&self.manifest))?;
        write_atomic(&dir.join(MANIFEST_FILE), format!("{manifest}\n").as_bytes())
    }
}
