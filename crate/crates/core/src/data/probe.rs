//! Inverse of the renderer's metadata bindings: recovers month from the hue
//! histogram, the gsd blur bucket from normalized high-frequency energy, and
//! cloud cover from the occlusion mask. Exact on rendered scenes, best-effort
//! (with confidences) on model samples.

use ndarray::{Array2, ArrayD};

use super::color::{hue_distance, rgb_to_hsv};
use super::synthetic::{palette_hue, BLUR_SIGMAS};

#[derive(Clone, Copy, Debug)]
pub struct ProbeOutcome {
    pub month: u32,
    pub month_confidence: f64,
    pub gsd_bucket: usize,
    pub gsd_confidence: f64,
    pub cloud_fraction: f64,
    pub cloud_confidence: f64,
}

const CLOUD_VALUE_MIN: f64 = 0.945;
const CLOUD_SAT_MAX: f64 = 0.08;
const COLORED_SAT_MIN: f64 = 0.25;

/// Blur-curve thresholds separating the four gsd buckets, calibrated on the
/// renderer (see `examples/calibrate_probe.rs`): buckets 0/1 and 1/2 split on
/// the 0-vs-1-blur energy ratio, buckets 2/3 on the 1-vs-5-blur ratio.
pub const GSD_R01_SHARP: f64 = 8.8;
pub const GSD_R01_MID: f64 = 1.95;
pub const GSD_R15_SOFT: f64 = 1.148;

fn luminance(rgb: &ArrayD<f32>) -> Array2<f64> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (rgb[[0, y, x]] as f64 + rgb[[1, y, x]] as f64 + rgb[[2, y, x]] as f64) / 3.0
    })
}

fn blur_unit(lum: &Array2<f64>) -> Array2<f64> {
    // 5-tap Gaussian, sigma 1, edge replicate, separable
    let k = [0.06136, 0.24477, 0.40842, 0.24477, 0.06136];
    let (h, w) = lum.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kv * lum[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn laplacian_energy(lum: &Array2<f64>, valid: &Array2<bool>) -> f64 {
    let (h, w) = lum.dim();
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if !(valid[[y, x]]
                && valid[[y - 1, x]]
                && valid[[y + 1, x]]
                && valid[[y, x - 1]]
                && valid[[y, x + 1]])
            {
                continue;
            }
            let lap = 4.0 * lum[[y, x]]
                - lum[[y - 1, x]]
                - lum[[y + 1, x]]
                - lum[[y, x - 1]]
                - lum[[y, x + 1]];
            acc += lap * lap;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Laplacian energies of the luminance after 0, 1, 3 and 5 extra unit
/// blurs, over cloud-free pixels (cloud borders dilated away). Ratios along
/// this curve reveal the image's intrinsic blur scale independent of its
/// content.
pub fn blur_response(rgb: &ArrayD<f32>) -> [f64; 4] {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let lum = luminance(rgb);
    let mut valid = Array2::<bool>::from_elem((h, w), true);
    for y in 0..h {
        for x in 0..w {
            let (_, s, v) = rgb_to_hsv(
                rgb[[0, y, x]] as f64,
                rgb[[1, y, x]] as f64,
                rgb[[2, y, x]] as f64,
            );
            if v > CLOUD_VALUE_MIN && s < CLOUD_SAT_MAX {
                valid[[y, x]] = false;
            }
        }
    }
    // dilate the cloud exclusion so smeared cloud borders never count
    let dilated = {
        let mut d = valid.clone();
        let radius = 7isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                if valid[[y as usize, x as usize]] {
                    continue;
                }
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                            d[[ny as usize, nx as usize]] = false;
                        }
                    }
                }
            }
        }
        d
    };
    let mut out = [0.0f64; 4];
    let mut cur = lum;
    let mut blurs = 0usize;
    for (slot, &target) in [0usize, 1, 3, 5].iter().enumerate() {
        while blurs < target {
            cur = blur_unit(&cur);
            blurs += 1;
        }
        out[slot] = laplacian_energy(&cur, &dilated);
    }
    out
}

/// Headline blur statistic (energy before vs after one unit blur).
pub fn high_frequency_ratio(rgb: &ArrayD<f32>) -> f64 {
    let e = blur_response(rgb);
    if e[0] < 1e-14 || e[1] < 1e-14 {
        return 0.0;
    }
    e[0] / e[1]
}

/// Recovers `(month, gsd bucket, cloud fraction)` with confidences.
pub fn probe_metadata(rgb: &ArrayD<f32>) -> ProbeOutcome {
    assert_eq!(rgb.ndim(), 3);
    assert_eq!(rgb.shape()[0], 3, "probe expects an rgb image");
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let total = (h * w) as f64;

    let mut cloud_count = 0usize;
    let mut colored = 0usize;
    let mut bins = [0usize; 12];
    let mut lum_sum = 0.0f64;
    let mut lum_sq = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (
                rgb[[0, y, x]] as f64,
                rgb[[1, y, x]] as f64,
                rgb[[2, y, x]] as f64,
            );
            let lum = (r + g + b) / 3.0;
            lum_sum += lum;
            lum_sq += lum * lum;
            let (hue, s, v) = rgb_to_hsv(r, g, b);
            if v > CLOUD_VALUE_MIN && s < CLOUD_SAT_MAX {
                cloud_count += 1;
            } else if s > COLORED_SAT_MIN {
                colored += 1;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for m in 1..=12u32 {
                    let d = hue_distance(hue, palette_hue(m as f64));
                    if d < best_d {
                        best_d = d;
                        best = m as usize;
                    }
                }
                bins[best - 1] += 1;
            }
        }
    }

    let lum_mean = lum_sum / total;
    let lum_var = lum_sq / total - lum_mean * lum_mean;
    let degenerate = lum_var < 1e-6;

    let (month, month_confidence) = if colored == 0 || degenerate {
        (1, 0.0)
    } else {
        let (mi, &mc) = bins
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .expect("12 bins");
        let share = mc as f64 / colored as f64;
        let coverage = (colored as f64 / total / 0.05).min(1.0);
        ((mi + 1) as u32, share * coverage)
    };

    let response = blur_response(rgb);
    let (gsd_bucket, gsd_confidence) = if degenerate || response[1] < 1e-14 || response[3] < 1e-14
    {
        (0, 0.0)
    } else {
        let r01 = response[0] / response[1];
        let r15 = response[1] / response[3];
        let bucket = if r01 > GSD_R01_SHARP {
            0
        } else if r01 > GSD_R01_MID {
            1
        } else if r15 > GSD_R15_SOFT {
            2
        } else {
            3
        };
        // log-space distance to the deciding boundary
        let margin = match bucket {
            0 => (r01.ln() - GSD_R01_SHARP.ln()).abs(),
            1 => (r01.ln() - GSD_R01_SHARP.ln())
                .abs()
                .min((r01.ln() - GSD_R01_MID.ln()).abs()),
            2 => (r01.ln() - GSD_R01_MID.ln())
                .abs()
                .min((r15.ln() - GSD_R15_SOFT.ln()).abs()),
            _ => (r15.ln() - GSD_R15_SOFT.ln()).abs(),
        };
        (bucket, (margin / 0.5).min(1.0))
    };

    let cloud_fraction = cloud_count as f64 / total;
    let cloud_confidence = if degenerate { 0.0 } else { 1.0 };

    ProbeOutcome {
        month,
        month_confidence,
        gsd_bucket,
        gsd_confidence,
        cloud_fraction,
        cloud_confidence,
    }
}

/// True blur sigma for a bucket (probe calibration helper).
pub fn bucket_sigma(bucket: usize) -> f64 {
    BLUR_SIGMAS[bucket.min(BLUR_SIGMAS.len() - 1)]
}
