//! Caption templating: per-dataset templates whose droppable segments are
//! independently removed at a configurable rate, with placeholder
//! substitution from the sample's labels.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::DatasetKind;
use crate::metadata::MetadataRecord;
use crate::{Error, Result};

/// One template segment: fixed segments always render, droppable segments
/// are removed with probability `dropout` (or when a referenced label is
/// missing).
#[derive(Clone, Debug)]
pub struct Segment {
    pub droppable: bool,
    pub text: &'static str,
}

#[derive(Clone, Debug)]
pub struct CaptionTemplate {
    pub kind: DatasetKind,
    pub segments: Vec<Segment>,
}

fn seg(text: &'static str) -> Segment {
    Segment {
        droppable: false,
        text,
    }
}

fn opt(text: &'static str) -> Segment {
    Segment {
        droppable: true,
        text,
    }
}

pub fn template_for(kind: DatasetKind) -> CaptionTemplate {
    let segments = match kind {
        DatasetKind::Fmow => vec![
            seg("a"),
            opt("fmow"),
            seg("satellite image"),
            opt("of a <object>"),
            opt("in <country>"),
        ],
        DatasetKind::Spacenet => vec![
            seg("a"),
            opt("spacenet"),
            seg("satellite image"),
            opt("of <object>"),
            opt("in <city>"),
        ],
        DatasetKind::Satlas => vec![
            seg("a"),
            opt("satlas"),
            seg("satellite image"),
            opt("of <object>"),
        ],
        DatasetKind::Texas => vec![
            seg("a"),
            opt("satlas"),
            seg("satellite image"),
            opt("of houses"),
            opt("built in <year_built>"),
            opt("covering <num_acres> acres"),
        ],
        DatasetKind::Xbd => vec![
            seg("a"),
            opt("fmow"),
            seg("satellite image"),
            opt("<phase>"),
            seg("being affected by a <disaster_type> natural disaster"),
        ],
        DatasetKind::Synthetic => vec![
            seg("a"),
            opt("synthetic"),
            seg("satellite image"),
            opt("of a <object>"),
            opt("in <country>"),
        ],
    };
    CaptionTemplate { kind, segments }
}

fn substitute(text: &str, labels: &BTreeMap<String, String>) -> Option<String> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        out.push_str(&rest[..start]);
        let end = rest[start..].find('>')? + start;
        let key = &rest[start + 1..end];
        out.push_str(labels.get(key)?);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

/// Renders a caption. Each droppable segment is removed independently with
/// probability `dropout_rate`; segments referencing missing labels are
/// auto-dropped. Fixed segments with missing labels are an error.
pub fn build_caption(
    kind: DatasetKind,
    labels: &BTreeMap<String, String>,
    rng: &mut ChaCha8Rng,
    dropout_rate: f64,
) -> Result<String> {
    let template = template_for(kind);
    let mut parts: Vec<String> = Vec::new();
    for segment in &template.segments {
        if segment.droppable && rng.random::<f64>() < dropout_rate {
            continue;
        }
        match substitute(segment.text, labels) {
            Some(rendered) => parts.push(rendered),
            None if segment.droppable => continue,
            None => {
                return Err(Error::Data(format!(
                    "caption segment '{}' references a missing label",
                    segment.text
                )))
            }
        }
    }
    Ok(parts.join(" "))
}

/// Optional baseline: metadata spelled into the caption text.
pub fn append_metadata_caption(caption: &str, md: &MetadataRecord) -> String {
    format!(
        "{caption} located at {:.4}, {:.4}, gsd {:.2}, on {}-{}-{}",
        md.lat, md.lon, md.gsd, md.year as i64, md.month as i64, md.day as i64
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn zero_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn golden_strings_zero_dropout() {
        let cases: Vec<(DatasetKind, BTreeMap<String, String>, &str)> = vec![
            (
                DatasetKind::Fmow,
                labels(&[("object", "stadium"), ("country", "France")]),
                "a fmow satellite image of a stadium in France",
            ),
            (
                DatasetKind::Spacenet,
                labels(&[("object", "buildings"), ("city", "Khartoum")]),
                "a spacenet satellite image of buildings in Khartoum",
            ),
            (
                DatasetKind::Satlas,
                labels(&[("object", "a wind farm")]),
                "a satlas satellite image of a wind farm",
            ),
            (
                DatasetKind::Texas,
                labels(&[("year_built", "2015"), ("num_acres", "0.3")]),
                "a satlas satellite image of houses built in 2015 covering 0.3 acres",
            ),
            (
                DatasetKind::Xbd,
                labels(&[("phase", "after"), ("disaster_type", "flooding")]),
                "a fmow satellite image after being affected by a flooding natural disaster",
            ),
        ];
        for (kind, l, expect) in cases {
            let got = build_caption(kind, &l, &mut zero_rng(), 0.0).unwrap();
            assert_eq!(got, expect, "{kind:?}");
        }
    }

    #[test]
    fn full_dropout_keeps_fixed_text_only() {
        let l = labels(&[("object", "stadium"), ("country", "France")]);
        let got = build_caption(DatasetKind::Fmow, &l, &mut zero_rng(), 1.0).unwrap();
        assert_eq!(got, "a satellite image");
    }

    #[test]
    fn missing_label_auto_drops_segment() {
        let l = labels(&[("object", "stadium")]);
        let got = build_caption(DatasetKind::Fmow, &l, &mut zero_rng(), 0.0).unwrap();
        assert_eq!(got, "a fmow satellite image of a stadium");
    }

    #[test]
    fn missing_required_label_errors() {
        let l = labels(&[("phase", "before")]);
        assert!(build_caption(DatasetKind::Xbd, &l, &mut zero_rng(), 0.0).is_err());
    }

    #[test]
    fn caption_determinism() {
        let l = labels(&[("object", "port"), ("country", "Veridia")]);
        let a = build_caption(DatasetKind::Fmow, &l, &mut ChaCha8Rng::seed_from_u64(9), 0.3).unwrap();
        let b = build_caption(DatasetKind::Fmow, &l, &mut ChaCha8Rng::seed_from_u64(9), 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_segment_dropout_rate_and_independence() {
        let l = labels(&[("object", "stadium"), ("country", "France")]);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let trials = 10_000;
        // droppable segments: "fmow", "of a stadium", "in France"
        let mut dropped = [0usize; 3];
        let mut joint = [[0usize; 3]; 3];
        for _ in 0..trials {
            let got = build_caption(DatasetKind::Fmow, &l, &mut rng, 0.1).unwrap();
            let miss = [
                !got.contains("fmow"),
                !got.contains("of a stadium"),
                !got.contains("in France"),
            ];
            for i in 0..3 {
                if miss[i] {
                    dropped[i] += 1;
                }
                for j in 0..3 {
                    if miss[i] && miss[j] {
                        joint[i][j] += 1;
                    }
                }
            }
        }
        for (i, &d) in dropped.iter().enumerate() {
            let rate = d as f64 / trials as f64;
            assert!((0.08..=0.12).contains(&rate), "segment {i}: rate {rate}");
        }
        // pairwise correlation must be ~0
        for i in 0..3 {
            for j in (i + 1)..3 {
                let pi = dropped[i] as f64 / trials as f64;
                let pj = dropped[j] as f64 / trials as f64;
                let pij = joint[i][j] as f64 / trials as f64;
                let denom = (pi * (1.0 - pi) * pj * (1.0 - pj)).sqrt();
                let rho = (pij - pi * pj) / denom;
                assert!(rho.abs() < 0.05, "segments {i},{j}: rho {rho}");
            }
        }
    }

    #[test]
    fn metadata_caption_baseline() {
        let md = MetadataRecord {
            lon: 2.35,
            lat: 48.85,
            gsd: 1.5,
            cloud_cover: 0.0,
            year: 2017.0,
            month: 3.0,
            day: 9.0,
        };
        let s = append_metadata_caption("a satellite image", &md);
        assert_eq!(
            s,
            "a satellite image located at 48.8500, 2.3500, gsd 1.50, on 2017-3-9"
        );
    }
}
