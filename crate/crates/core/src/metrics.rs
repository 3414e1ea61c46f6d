//! Reference-based image quality metrics and geographic binned aggregation.
//! Images are `[c, h, w]` arrays on a known value range (`max_val`).

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::metadata::MetadataRecord;
use crate::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean squared error over all elements.
pub fn mse(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse: shape mismatch");
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Peak signal-to-noise ratio in dB, capped at 100 when the error vanishes.
pub fn psnr(a: &ArrayD<f32>, b: &ArrayD<f32>, max_val: f64) -> f64 {
    assert!(max_val > 0.0, "psnr: max_val must be positive");
    let err = mse(a, b);
    if err < 1e-10 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / err).log10()).min(PSNR_CAP_DB)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and the
/// standard `k1 = 0.01`, `k2 = 0.03` stabilizers, averaged over all valid
/// window positions and channels.
pub fn ssim(a: &ArrayD<f32>, b: &ArrayD<f32>, window: usize, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if window % 2 == 0 {
        return Err(Error::Config("ssim: window must be odd".into()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < window || w < window {
        return Err(Error::Data(format!(
            "ssim: image {h}x{w} smaller than the {window}-pixel window"
        )));
    }
    let kernel = gaussian_kernel(window, 1.5);
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let half = window / 2;

    // separable weighted moments per channel
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ci in 0..c {
        let ha = h - 2 * half;
        let wa = w - 2 * half;
        // horizontal pass
        let mut ax = vec![0.0f64; h * wa];
        let mut bx = vec![0.0f64; h * wa];
        let mut aax = vec![0.0f64; h * wa];
        let mut bbx = vec![0.0f64; h * wa];
        let mut abx = vec![0.0f64; h * wa];
        for y in 0..h {
            for x in 0..wa {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ki, kv) in kernel.iter().enumerate() {
                    let av = a[[ci, y, x + ki]] as f64;
                    let bv = b[[ci, y, x + ki]] as f64;
                    sa += kv * av;
                    sb += kv * bv;
                    saa += kv * av * av;
                    sbb += kv * bv * bv;
                    sab += kv * av * bv;
                }
                ax[y * wa + x] = sa;
                bx[y * wa + x] = sb;
                aax[y * wa + x] = saa;
                bbx[y * wa + x] = sbb;
                abx[y * wa + x] = sab;
            }
        }
        // vertical pass + SSIM accumulation
        for y in 0..ha {
            for x in 0..wa {
                let (mut mu_a, mut mu_b, mut m_aa, mut m_bb, mut m_ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ki, kv) in kernel.iter().enumerate() {
                    let idx = (y + ki) * wa + x;
                    mu_a += kv * ax[idx];
                    mu_b += kv * bx[idx];
                    m_aa += kv * aax[idx];
                    m_bb += kv * bbx[idx];
                    m_ab += kv * abx[idx];
                }
                let var_a = m_aa - mu_a * mu_a;
                let var_b = m_bb - mu_b * mu_b;
                let cov = m_ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Externally supplied perceptual metrics plug into this interface; the
/// built-in suite never depends on them.
pub trait PairMetric {
    fn name(&self) -> &str;
    fn compute(&self, pred: &ArrayD<f32>, reference: &ArrayD<f32>) -> Result<f64>;
}

pub struct MseMetric;
impl PairMetric for MseMetric {
    fn name(&self) -> &str {
        "mse"
    }
    fn compute(&self, p: &ArrayD<f32>, r: &ArrayD<f32>) -> Result<f64> {
        Ok(mse(p, r))
    }
}

pub struct PsnrMetric {
    pub max_val: f64,
}
impl PairMetric for PsnrMetric {
    fn name(&self) -> &str {
        "psnr"
    }
    fn compute(&self, p: &ArrayD<f32>, r: &ArrayD<f32>) -> Result<f64> {
        Ok(psnr(p, r, self.max_val))
    }
}

pub struct SsimMetric {
    pub max_val: f64,
    pub window: usize,
}
impl PairMetric for SsimMetric {
    fn name(&self) -> &str {
        "ssim"
    }
    fn compute(&self, p: &ArrayD<f32>, r: &ArrayD<f32>) -> Result<f64> {
        ssim(p, r, self.window, self.max_val)
    }
}

pub fn builtin_metric(name: &str, max_val: f64) -> Result<Box<dyn PairMetric>> {
    match name {
        "mse" => Ok(Box::new(MseMetric)),
        "psnr" => Ok(Box::new(PsnrMetric { max_val })),
        "ssim" => Ok(Box::new(SsimMetric { max_val, window: 11 })),
        other => Err(Error::Config(format!(
            "unknown metric '{other}' (built in: psnr, ssim, mse)"
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub metric: String,
    pub value: f64,
    pub metadata: MetadataRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-sample records plus per-metric aggregates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleScore>,
    pub aggregates: Vec<Aggregate>,
}

impl MetricReport {
    pub fn push(&mut self, score: SampleScore) {
        self.samples.push(score);
    }

    /// Recomputes aggregates from the per-sample records.
    pub fn finalize(&mut self) {
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &self.samples {
            by_metric.entry(s.metric.clone()).or_default().push(s.value);
        }
        self.aggregates = by_metric
            .into_iter()
            .map(|(metric, vals)| {
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                Aggregate {
                    metric,
                    mean,
                    std: var.sqrt(),
                    count: n,
                }
            })
            .collect();
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("score serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub lat_bin: i64,
    pub lon_bin: i64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub low_confidence: bool,
}

pub const LOW_CONFIDENCE_COUNT: usize = 5;

/// Buckets per-sample scores into `cell_deg`-degree latitude/longitude cells.
/// Cells with fewer than [`LOW_CONFIDENCE_COUNT`] samples are flagged.
pub fn binned_aggregate(report: &MetricReport, cell_deg: f64) -> Vec<GridCell> {
    assert!(cell_deg > 0.0);
    let mut cells: BTreeMap<(String, i64, i64), Vec<f64>> = BTreeMap::new();
    for s in &report.samples {
        let lat_bin = (s.metadata.lat / cell_deg).floor() as i64;
        let lon_bin = (s.metadata.lon / cell_deg).floor() as i64;
        cells
            .entry((s.metric.clone(), lat_bin, lon_bin))
            .or_default()
            .push(s.value);
    }
    cells
        .into_iter()
        .map(|((metric, lat_bin, lon_bin), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            GridCell {
                lat_bin,
                lon_bin,
                metric,
                mean,
                std: var.sqrt(),
                count: n,
                low_confidence: n < LOW_CONFIDENCE_COUNT,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(vals: &[f32], c: usize, h: usize, w: usize) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), vals.to_vec()).unwrap()
    }

    fn rand_img(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ArrayD<f32> {
        let mut a = ArrayD::<f32>::zeros(IxDyn(&[c, h, w]));
        for v in a.iter_mut() {
            *v = rng.random::<f32>();
        }
        a
    }

    #[test]
    fn psnr_cap_and_zero_db() {
        let a = img(&[0.1, 0.9, 0.5, 0.3], 1, 2, 2);
        assert_eq!(psnr(&a, &a, 1.0), 100.0);
        // mse == max_val^2 -> 0 dB
        let z = img(&[0.0, 0.0, 0.0, 0.0], 1, 2, 2);
        let o = img(&[1.0, 1.0, 1.0, 1.0], 1, 2, 2);
        assert!((psnr(&z, &o, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn psnr_constant_offset_twenty_db() {
        let a = ArrayD::<f32>::from_elem(IxDyn(&[1, 4, 4]), 0.4);
        let b = ArrayD::<f32>::from_elem(IxDyn(&[1, 4, 4]), 0.5);
        let p = psnr(&a, &b, 1.0);
        assert!((p - 20.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn psnr_symmetric_and_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_img(&mut rng, 3, 16, 16);
        let mut prev = f64::INFINITY;
        for sigma in [0.01f32, 0.05, 0.1] {
            let mut noisy = a.clone();
            let mut r2 = ChaCha8Rng::seed_from_u64(7);
            for v in noisy.iter_mut() {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut r2,
                );
                *v += sigma * z as f32;
            }
            let p = psnr(&a, &noisy, 1.0);
            let q = psnr(&noisy, &a, 1.0);
            assert!((p - q).abs() < 1e-9);
            assert!(p < prev, "psnr must fall as noise grows");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = rand_img(&mut rng, 1, 16, 16);
        assert!((ssim(&r, &r, 11, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // zero-mean structure in every window: high-frequency sinusoid
        let a = ArrayD::<f32>::from_shape_fn(IxDyn(&[1, 16, 16]), |ix| {
            0.3 * (std::f32::consts::PI * ix[1] as f32 / 2.0).sin()
                * (std::f32::consts::PI * ix[2] as f32 / 2.0).sin()
        });
        let neg = a.mapv(|v| -v);
        assert!(ssim(&a, &neg, 11, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ArrayD::<f32>::zeros(IxDyn(&[1, 8, 8]));
        assert!(ssim(&a, &a, 11, 1.0).is_err());
    }

    /// Straight-from-definition SSIM: explicit nested loops, no separable
    /// optimization. Kept independent of the production path.
    fn ssim_oracle(a: &ArrayD<f32>, b: &ArrayD<f32>, window: usize, max_val: f64) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let half = (window / 2) as isize;
        let mut kernel2 = vec![0.0f64; window * window];
        let k1 = gaussian_kernel(window, 1.5);
        for y in 0..window {
            for x in 0..window {
                kernel2[y * window + x] = k1[y] * k1[x];
            }
        }
        let mut total = 0.0;
        let mut count = 0usize;
        let c1 = (0.01 * max_val).powi(2);
        let c2 = (0.03 * max_val).powi(2);
        for ci in 0..c {
            for cy in half..(h as isize - half) {
                for cx in half..(w as isize - half) {
                    let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
                    for ky in -half..=half {
                        for kx in -half..=half {
                            let kv = kernel2[((ky + half) * window as isize + kx + half) as usize];
                            mu_a += kv * a[[ci, (cy + ky) as usize, (cx + kx) as usize]] as f64;
                            mu_b += kv * b[[ci, (cy + ky) as usize, (cx + kx) as usize]] as f64;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                    for ky in -half..=half {
                        for kx in -half..=half {
                            let kv = kernel2[((ky + half) * window as isize + kx + half) as usize];
                            let av = a[[ci, (cy + ky) as usize, (cx + kx) as usize]] as f64;
                            let bv = b[[ci, (cy + ky) as usize, (cx + kx) as usize]] as f64;
                            va += kv * (av - mu_a) * (av - mu_a);
                            vb += kv * (bv - mu_b) * (bv - mu_b);
                            cov += kv * (av - mu_a) * (bv - mu_b);
                        }
                    }
                    total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_definition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let a = rand_img(&mut rng, 1, 32, 32);
            let b = rand_img(&mut rng, 1, 32, 32);
            let fast = ssim(&a, &b, 11, 1.0).unwrap();
            let slow = ssim_oracle(&a, &b, 11, 1.0);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
            let sym = ssim(&b, &a, 11, 1.0).unwrap();
            assert!((fast - sym).abs() < 1e-9);
        }
    }

    fn md_at(lat: f64, lon: f64) -> MetadataRecord {
        MetadataRecord {
            lon,
            lat,
            gsd: 1.0,
            cloud_cover: 0.0,
            year: 2020.0,
            month: 6.0,
            day: 15.0,
        }
    }

    #[test]
    fn report_aggregate_consistency() {
        let mut report = MetricReport::default();
        for (i, v) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            report.push(SampleScore {
                sample_id: format!("s{i}"),
                metric: "psnr".into(),
                value: v,
                metadata: md_at(0.0, 0.0),
            });
        }
        report.finalize();
        let agg = &report.aggregates[0];
        assert_eq!(agg.count, 4);
        let mean = report.samples.iter().map(|s| s.value).sum::<f64>() / 4.0;
        assert!((agg.mean - mean).abs() < 1e-9);
    }

    #[test]
    fn binned_single_coordinate_matches_global() {
        let mut report = MetricReport::default();
        for v in [2.0, 4.0, 6.0] {
            report.push(SampleScore {
                sample_id: "x".into(),
                metric: "mse".into(),
                value: v,
                metadata: md_at(10.0, 20.0),
            });
        }
        report.finalize();
        let cells = binned_aggregate(&report, 10.0);
        assert_eq!(cells.len(), 1);
        assert!((cells[0].mean - 4.0).abs() < 1e-12);
        assert_eq!(cells[0].count, 3);
    }

    #[test]
    fn binned_hemispheres_and_conservation() {
        let mut report = MetricReport::default();
        report.push(SampleScore {
            sample_id: "n".into(),
            metric: "mse".into(),
            value: 1.0,
            metadata: md_at(45.0, 10.0),
        });
        report.push(SampleScore {
            sample_id: "s".into(),
            metric: "mse".into(),
            value: 2.0,
            metadata: md_at(-45.0, 10.0),
        });
        let cells = binned_aggregate(&report, 10.0);
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|c| c.count == 1 && c.low_confidence));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut big = MetricReport::default();
        for i in 0..1000 {
            big.push(SampleScore {
                sample_id: format!("{i}"),
                metric: "psnr".into(),
                value: rng.random::<f64>(),
                metadata: md_at(
                    rng.random::<f64>() * 180.0 - 90.0,
                    rng.random::<f64>() * 360.0 - 180.0,
                ),
            });
        }
        let cells = binned_aggregate(&big, 10.0);
        let total: usize = cells.iter().map(|c| c.count).sum();
        assert_eq!(total, 1000);
    }
}
