//! Dataset plumbing: a line-oriented manifest format, caption templating,
//! sequence assembly, multispectral band handling, a procedural scene
//! renderer, and probes that invert the renderer's metadata bindings.

pub mod caption;
pub mod color;
pub mod io;
pub mod probe;
pub mod sequence;
pub mod synthetic;

pub use caption::build_caption;
pub use sequence::{pad_sequence, resize_bilinear, select_bands, BandImage};
pub use synthetic::{generate_synthetic_dataset, GenConfig, GenMode, SceneClass, SyntheticSceneSpec};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metadata::{normalize_metadata, MetadataRanges, MetadataRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Fmow,
    Satlas,
    Spacenet,
    Texas,
    Xbd,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmow" => Ok(DatasetKind::Fmow),
            "satlas" => Ok(DatasetKind::Satlas),
            "spacenet" => Ok(DatasetKind::Spacenet),
            "texas" => Ok(DatasetKind::Texas),
            "xbd" => Ok(DatasetKind::Xbd),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// One manifest line: an image, its caption, labels, and metadata. Optional
/// fields bind temporal sequences, super-resolution pairs, and inpainting
/// masks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub dataset: DatasetKind,
    pub caption: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    pub lon: f64,
    pub lat: f64,
    pub gsd: f64,
    pub cloud_cover: f64,
    pub year: f64,
    pub month: f64,
    pub day: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowres: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl ManifestRecord {
    pub fn metadata(&self) -> MetadataRecord {
        MetadataRecord {
            lon: self.lon,
            lat: self.lat,
            gsd: self.gsd,
            cloud_cover: self.cloud_cover,
            year: self.year,
            month: self.month,
            day: self.day,
        }
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a manifest; parse failures report the 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub records: usize,
    pub clamp_warnings: usize,
    pub errors: Vec<String>,
}

/// Checks parseability, file existence and metadata ranges. Range excursions
/// are clamp warnings, not errors.
pub fn validate_manifest(path: &Path, ranges: &MetadataRanges) -> Result<ValidationReport> {
    let records = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut report = ValidationReport {
        records: records.len(),
        ..Default::default()
    };
    for (i, rec) in records.iter().enumerate() {
        let line = i + 1;
        for rel in [Some(&rec.image), rec.lowres.as_ref(), rec.corrupted.as_ref(), rec.mask.as_ref()]
            .into_iter()
            .flatten()
        {
            let p = base.join(rel);
            if !p.exists() {
                report
                    .errors
                    .push(format!("line {line}: missing file {}", p.display()));
            }
        }
        let (_, clamped) = normalize_metadata(&rec.metadata(), ranges);
        report.clamp_warnings += clamped;
    }
    Ok(report)
}
