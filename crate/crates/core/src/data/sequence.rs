//! Sequence assembly (padding to a fixed length), Sentinel band selection,
//! and control-image resizing.

use ndarray::{ArrayD, IxDyn};

use crate::metadata::MetadataRecord;
use crate::{Error, Result};

pub const SENTINEL2_BANDS: [&str; 13] = [
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12",
];
pub const DROPPED_BANDS: [&str; 3] = ["B1", "B9", "B10"];

/// A multi-band image with named channels.
#[derive(Clone, Debug)]
pub struct BandImage {
    pub data: ArrayD<f32>,
    pub bands: Vec<String>,
}

impl BandImage {
    pub fn new(data: ArrayD<f32>, bands: Vec<String>) -> Result<Self> {
        if data.ndim() != 3 || data.shape()[0] != bands.len() {
            return Err(Error::Data(format!(
                "band image {:?} disagrees with {} band names",
                data.shape(),
                bands.len()
            )));
        }
        Ok(BandImage { data, bands })
    }
}

/// Drops Sentinel-2 bands B1, B9 and B10, preserving the order of the
/// remaining ten. Requires exactly the 13-band input; re-application to an
/// already-reduced image is an error, not a silent pass.
pub fn select_bands(ms: &BandImage) -> Result<BandImage> {
    if ms.bands.len() != 13 || ms.bands != SENTINEL2_BANDS {
        return Err(Error::Data(format!(
            "select_bands expects the 13 Sentinel-2 bands in order, got {:?}",
            ms.bands
        )));
    }
    let keep: Vec<usize> = ms
        .bands
        .iter()
        .enumerate()
        .filter(|(_, b)| !DROPPED_BANDS.contains(&b.as_str()))
        .map(|(i, _)| i)
        .collect();
    let (h, w) = (ms.data.shape()[1], ms.data.shape()[2]);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[keep.len(), h, w]));
    for (dst, &src) in keep.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[dst, y, x]] = ms.data[[src, y, x]];
            }
        }
    }
    Ok(BandImage {
        data: out,
        bands: keep.iter().map(|&i| ms.bands[i].clone()).collect(),
    })
}

/// Bilinear resize of a `[c, h, w]` image to `target_h x target_w`,
/// preserving the channel count. Pixel-center sampling.
pub fn resize_bilinear(img: &ArrayD<f32>, target_h: usize, target_w: usize) -> ArrayD<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == target_h && w == target_w {
        return img.clone();
    }
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[c, target_h, target_w]));
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    for ci in 0..c {
        for ty in 0..target_h {
            let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for tx in 0..target_w {
                let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = img[[ci, y0, x0]] as f64;
                let v01 = img[[ci, y0, x1]] as f64;
                let v10 = img[[ci, y1, x0]] as f64;
                let v11 = img[[ci, y1, x1]] as f64;
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                out[[ci, ty, tx]] = v as f32;
            }
        }
    }
    out
}

/// Monotone pseudo-calendar day number, used only for ordering and
/// nearest-date selection.
pub fn day_number(md: &MetadataRecord) -> f64 {
    md.year * 372.0 + md.month * 31.0 + md.day
}

/// Pads or truncates a frame list to exactly `t_target` frames:
/// fewer frames append copies of the chronologically latest frame, more
/// frames keep the `t_target` closest to the target date. Output is in
/// chronological order. Fewer than two input frames is a skip condition.
pub fn pad_sequence<F: Clone>(
    frames: &[(F, MetadataRecord)],
    t_target: usize,
    target: &MetadataRecord,
) -> Result<Vec<(F, MetadataRecord)>> {
    assert!(t_target >= 1);
    if frames.len() < 2 {
        return Err(Error::Data(format!(
            "sequence with {} frame(s) skipped: locations with a single image are excluded",
            frames.len()
        )));
    }
    let mut ordered: Vec<(F, MetadataRecord)> = frames.to_vec();
    ordered.sort_by_key(|(_, md)| md.date_key());
    if ordered.len() < t_target {
        let latest = ordered.last().cloned().expect("nonempty");
        while ordered.len() < t_target {
            ordered.push(latest.clone());
        }
    } else if ordered.len() > t_target {
        let target_day = day_number(target);
        let mut by_dist: Vec<(usize, f64)> = ordered
            .iter()
            .enumerate()
            .map(|(i, (_, md))| (i, (day_number(md) - target_day).abs()))
            .collect();
        by_dist.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = by_dist[..t_target].iter().map(|(i, _)| *i).collect();
        keep.sort_unstable();
        ordered = keep.into_iter().map(|i| ordered[i].clone()).collect();
    }
    Ok(ordered)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn md(year: f64, month: f64, day: f64) -> MetadataRecord {
        MetadataRecord {
            lon: 0.0,
            lat: 0.0,
            gsd: 1.0,
            cloud_cover: 0.0,
            year,
            month,
            day,
        }
    }

    #[test]
    fn pad_exact_length_unchanged() {
        let frames: Vec<(u32, MetadataRecord)> = (0..4).map(|i| (i, md(2010.0 + i as f64, 6.0, 1.0))).collect();
        let out = pad_sequence(&frames, 4, &md(2020.0, 1.0, 1.0)).unwrap();
        assert_eq!(out.iter().map(|(f, _)| *f).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn pad_appends_latest_copies() {
        let frames = vec![(10u32, md(2014.0, 3.0, 5.0)), (20u32, md(2016.0, 8.0, 2.0))];
        let out = pad_sequence(&frames, 4, &md(2020.0, 1.0, 1.0)).unwrap();
        let ids: Vec<u32> = out.iter().map(|(f, _)| *f).collect();
        assert_eq!(ids, vec![10, 20, 20, 20]);
        assert_eq!(out[2].1, out[1].1);
        assert_eq!(out[3].1, out[1].1);
    }

    #[test]
    fn single_frame_is_skipped() {
        let frames = vec![(1u32, md(2014.0, 1.0, 1.0))];
        assert!(pad_sequence(&frames, 4, &md(2020.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn truncation_keeps_closest_to_target() {
        let frames: Vec<(u32, MetadataRecord)> = (0..6)
            .map(|i| (i, md(2010.0 + i as f64, 6.0, 1.0)))
            .collect();
        let out = pad_sequence(&frames, 3, &md(2015.0, 6.0, 1.0)).unwrap();
        let ids: Vec<u32> = out.iter().map(|(f, _)| *f).collect();
        assert_eq!(ids, vec![3, 4, 5]);
        // chronological order maintained
        for w in out.windows(2) {
            assert!(day_number(&w[0].1) <= day_number(&w[1].1));
        }
    }

    #[test]
    fn pad_output_length_always_target() {
        for n in 2..8usize {
            let frames: Vec<(usize, MetadataRecord)> =
                (0..n).map(|i| (i, md(2010.0 + i as f64, 2.0, 2.0))).collect();
            let out = pad_sequence(&frames, 4, &md(2012.0, 1.0, 1.0)).unwrap();
            assert_eq!(out.len(), 4);
        }
    }

    #[test]
    fn band_selection() {
        let data = ArrayD::<f32>::from_shape_fn(IxDyn(&[13, 2, 2]), |ix| ix[0] as f32);
        let ms = BandImage::new(data, SENTINEL2_BANDS.iter().map(|s| s.to_string()).collect())
            .unwrap();
        let out = select_bands(&ms).unwrap();
        assert_eq!(out.data.shape(), &[10, 2, 2]);
        assert_eq!(
            out.bands,
            vec!["B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12"]
        );
        // order preserved: band values keep their original channel index
        assert_eq!(out.data[[0, 0, 0]], 1.0);
        assert_eq!(out.data[[9, 0, 0]], 12.0);
        // idempotence guard
        assert!(select_bands(&out).is_err());
    }

    #[test]
    fn resize_identity_and_channel_preservation() {
        let img = ArrayD::<f32>::from_shape_fn(IxDyn(&[13, 8, 8]), |ix| {
            (ix[0] * 64 + ix[1] * 8 + ix[2]) as f32 / 832.0
        });
        let same = resize_bilinear(&img, 8, 8);
        assert_eq!(same, img);
        let up = resize_bilinear(&img, 16, 16);
        assert_eq!(up.shape(), &[13, 16, 16]);
    }

    #[test]
    fn resize_preserves_mean_on_smooth_image() {
        // gaussian blob
        let img = ArrayD::<f32>::from_shape_fn(IxDyn(&[1, 16, 16]), |ix| {
            let dy = ix[1] as f64 - 7.5;
            let dx = ix[2] as f64 - 7.5;
            (0.2 + 0.6 * (-(dy * dy + dx * dx) / 40.0).exp()) as f32
        });
        let up = resize_bilinear(&img, 64, 64);
        let mean_src: f64 = img.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        let mean_up: f64 = up.iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
        assert!(
            (mean_src - mean_up).abs() / mean_src < 0.02,
            "{mean_src} vs {mean_up}"
        );
    }
}
