//! In-memory dataset: at desk scale every image fits comfortably, so the
//! loader reads the whole manifest up front and training samples index into
//! it deterministically.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD};

use crate::data::io::{load_band_image, load_rgb_png, to_model_range};
use crate::data::sequence::day_number;
use crate::data::{load_manifest, BandImage, ManifestRecord};
use crate::metadata::{normalize_metadata, MetadataRanges};
use crate::{Error, Result};

pub struct Sample {
    pub record: ManifestRecord,
    /// `[3, h, w]` in `[-1, 1]`.
    pub image: ArrayD<f32>,
    pub lowres: Option<BandImage>,
    pub corrupted: Option<ArrayD<f32>>,
    pub mask: Option<Array2<bool>>,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    /// sequence id -> sample indices in chronological order
    pub sequences: BTreeMap<String, Vec<usize>>,
    pub clamp_warnings: usize,
}

impl Dataset {
    pub fn load(manifest: &Path, ranges: &MetadataRanges) -> Result<Self> {
        let records = load_manifest(manifest)?;
        if records.is_empty() {
            return Err(Error::Data(format!("{}: empty manifest", manifest.display())));
        }
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(records.len());
        let mut clamp_warnings = 0usize;
        for rec in records {
            let (_, clamped) = normalize_metadata(&rec.metadata(), ranges);
            clamp_warnings += clamped;
            let image = to_model_range(&load_rgb_png(&base.join(&rec.image))?);
            let lowres = match &rec.lowres {
                Some(rel) => Some(load_band_image(&base.join(rel))?),
                None => None,
            };
            let corrupted = match &rec.corrupted {
                Some(rel) => Some(to_model_range(&load_rgb_png(&base.join(rel))?)),
                None => None,
            };
            let mask = match &rec.mask {
                Some(rel) => {
                    let m = load_rgb_png(&base.join(rel))?;
                    let (h, w) = (m.shape()[1], m.shape()[2]);
                    Some(Array2::from_shape_fn((h, w), |(y, x)| m[[0, y, x]] > 0.5))
                }
                None => None,
            };
            samples.push(Sample {
                record: rec,
                image,
                lowres,
                corrupted,
                mask,
            });
        }

        let mut sequences: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if let Some(seq) = &s.record.sequence_id {
                sequences.entry(seq.clone()).or_default().push(i);
            }
        }
        for indices in sequences.values_mut() {
            indices.sort_by(|&a, &b| {
                day_number(&samples[a].record.metadata())
                    .partial_cmp(&day_number(&samples[b].record.metadata()))
                    .unwrap()
                    .then(a.cmp(&b))
            });
        }

        Ok(Dataset {
            samples,
            sequences,
            clamp_warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
