//! Numerical-metadata conditioning: range normalization, sinusoidal
//! projection, per-field MLP embeddings summed into the timestep embedding,
//! and whole-vector dropout for the guidance null branch.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use terradiff_autograd::{Builder, Element, Init, ParamId, ParamStore, Tape, Var};

use crate::{Error, Result};

pub const NUM_FIELDS: usize = 7;
pub const FIELD_NAMES: [&str; NUM_FIELDS] =
    ["lon", "lat", "gsd", "cloud_cover", "year", "month", "day"];
pub const NORM_SCALE: f64 = 1000.0;
const OMEGA: f64 = 10_000.0;

/// The seven numerical covariates attached to every image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub lon: f64,
    pub lat: f64,
    pub gsd: f64,
    pub cloud_cover: f64,
    pub year: f64,
    pub month: f64,
    pub day: f64,
}

impl MetadataRecord {
    pub fn values(&self) -> [f64; NUM_FIELDS] {
        [
            self.lon,
            self.lat,
            self.gsd,
            self.cloud_cover,
            self.year,
            self.month,
            self.day,
        ]
    }

    pub fn from_values(v: [f64; NUM_FIELDS]) -> Self {
        MetadataRecord {
            lon: v[0],
            lat: v[1],
            gsd: v[2],
            cloud_cover: v[3],
            year: v[4],
            month: v[5],
            day: v[6],
        }
    }

    pub fn set(&mut self, field: &str, value: f64) -> Result<()> {
        match field {
            "lon" => self.lon = value,
            "lat" => self.lat = value,
            "gsd" => self.gsd = value,
            "cloud_cover" => self.cloud_cover = value,
            "year" => self.year = value,
            "month" => self.month = value,
            "day" => self.day = value,
            other => {
                return Err(Error::Config(format!(
                    "unknown metadata key '{other}' (valid keys: {})",
                    FIELD_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Chronological sort key; ties broken by the remaining fields so equal
    /// records compare equal.
    pub fn date_key(&self) -> (i64, i64, i64, [i64; 4]) {
        let q = |v: f64| (v * 1e6).round() as i64;
        (
            q(self.year),
            q(self.month),
            q(self.day),
            [q(self.lon), q(self.lat), q(self.gsd), q(self.cloud_cover)],
        )
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FieldRange {
    pub low: f64,
    pub high: f64,
}

/// Per-field normalization ranges; defaults are the reference table values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetadataRanges(pub [FieldRange; NUM_FIELDS]);

impl Default for MetadataRanges {
    fn default() -> Self {
        MetadataRanges([
            FieldRange { low: -180.0, high: 180.0 }, // lon
            FieldRange { low: -90.0, high: 90.0 },   // lat
            FieldRange { low: 0.0, high: 10.0 },     // gsd
            FieldRange { low: 0.0, high: 1.0 },      // cloud_cover
            FieldRange { low: 1980.0, high: 2100.0 }, // year
            FieldRange { low: 0.0, high: 12.0 },     // month
            FieldRange { low: 0.0, high: 31.0 },     // day
        ])
    }
}

/// Metadata mapped into `[0, 1000]` per field: low -> 0, high -> 1000.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedMetadata {
    pub values: [f64; NUM_FIELDS],
}

/// Affine normalization with clamping; returns how many fields were clamped.
pub fn normalize_metadata(
    rec: &MetadataRecord,
    ranges: &MetadataRanges,
) -> (NormalizedMetadata, usize) {
    let mut out = [0.0; NUM_FIELDS];
    let mut clamped = 0;
    for (j, raw) in rec.values().into_iter().enumerate() {
        let FieldRange { low, high } = ranges.0[j];
        let v = if raw < low {
            clamped += 1;
            low
        } else if raw > high {
            clamped += 1;
            high
        } else {
            raw
        };
        out[j] = (v - low) / (high - low) * NORM_SCALE;
    }
    (NormalizedMetadata { values: out }, clamped)
}

/// Inverse of [`normalize_metadata`] on in-range values.
pub fn denormalize_metadata(norm: &NormalizedMetadata, ranges: &MetadataRanges) -> MetadataRecord {
    let mut out = [0.0; NUM_FIELDS];
    for j in 0..NUM_FIELDS {
        let FieldRange { low, high } = ranges.0[j];
        out[j] = norm.values[j] / NORM_SCALE * (high - low) + low;
    }
    MetadataRecord::from_values(out)
}

/// Sinusoidal projection of a normalized scalar:
/// `out[2i] = sin(k * Omega^(-2i/d))`, `out[2i+1] = cos(k * Omega^(-2i/d))`.
pub fn sinusoidal_project(k: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("projection dim must be even, got {d}")));
    }
    if !k.is_finite() {
        return Err(Error::Numerical(format!("projection input not finite: {k}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = OMEGA.powf(-2.0 * i as f64 / d as f64);
        out[2 * i] = (k * freq).sin();
        out[2 * i + 1] = (k * freq).cos();
    }
    Ok(out)
}

fn projection_rows<E: Element>(ks: &[f64], d: usize) -> ArrayD<E> {
    let mut out = ArrayD::<E>::zeros(IxDyn(&[ks.len(), d]));
    for (r, &k) in ks.iter().enumerate() {
        let row = sinusoidal_project(k, d).expect("projection dim validated at build");
        for (c, v) in row.into_iter().enumerate() {
            out[[r, c]] = E::from_f64(v);
        }
    }
    out
}

struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn build<E: Element>(b: &mut Builder<'_, E>, d_in: usize, d_out: usize, zero_final: bool) -> Self {
        let w1 = b.param("w1", &[d_out, d_in], Init::UniformFanIn(d_in));
        let b1 = b.param("b1", &[d_out], Init::Zeros);
        let (w2_init, b2_init) = if zero_final {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::UniformFanIn(d_out), Init::Zeros)
        };
        let w2 = b.param("w2", &[d_out, d_out], w2_init);
        let b2 = b.param("b2", &[d_out], b2_init);
        Mlp { w1, b1, w2, b2 }
    }

    fn forward<E: Element>(&self, tape: &Tape<E>, store: &ParamStore<E>, x: Var) -> Var {
        let h = tape.linear(x, tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.silu(h);
        tape.linear(h, tape.param(store, self.w2), tape.param(store, self.b2))
    }
}

/// One two-layer perceptron per metadata field plus one for the timestep,
/// all consuming the same sinusoidal projection dimension.
pub struct EmbedderSet {
    fields: Vec<Mlp>,
    timestep: Mlp,
    pub proj_dim: usize,
    pub cond_dim: usize,
}

impl EmbedderSet {
    /// Field MLPs get a zero-initialized final layer so metadata conditioning
    /// starts as a no-op; the timestep MLP is regularly initialized.
    pub fn build<E: Element>(b: &mut Builder<'_, E>, proj_dim: usize, cond_dim: usize) -> Self {
        assert!(proj_dim % 2 == 0, "proj_dim must be even");
        let mut fields = Vec::with_capacity(NUM_FIELDS);
        for name in FIELD_NAMES {
            let mut scope = b.scope(&format!("cond.md_{name}"));
            fields.push(Mlp::build(&mut scope, proj_dim, cond_dim, true));
        }
        let mut scope = b.scope("cond.time");
        let timestep = Mlp::build(&mut scope, proj_dim, cond_dim, false);
        EmbedderSet {
            fields,
            timestep,
            proj_dim,
            cond_dim,
        }
    }

    /// Embeds one normalized metadata value per batch row for field `j`.
    pub fn embed_field<E: Element>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
        j: usize,
        ks: &[f64],
    ) -> Var {
        assert!(j < NUM_FIELDS, "metadata field index {j} out of range");
        let proj = tape.leaf(projection_rows::<E>(ks, self.proj_dim));
        self.fields[j].forward(tape, store, proj)
    }

    /// Embeds raw timesteps (already on the `[0, 1000]` scale).
    pub fn embed_timestep<E: Element>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
        ts: &[usize],
    ) -> Var {
        let ks: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let proj = tape.leaf(projection_rows::<E>(&ks, self.proj_dim));
        self.timestep.forward(tape, store, proj)
    }

    /// Summed metadata embedding `m` for a batch of records, accumulated in
    /// field order (fixed summation tree).
    pub fn metadata_sum<E: Element>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
        recs: &[MetadataRecord],
        ranges: &MetadataRanges,
    ) -> Var {
        let norms: Vec<NormalizedMetadata> = recs
            .iter()
            .map(|r| normalize_metadata(r, ranges).0)
            .collect();
        let mut acc: Option<Var> = None;
        for j in 0..NUM_FIELDS {
            let ks: Vec<f64> = norms.iter().map(|n| n.values[j]).collect();
            let e = self.embed_field(tape, store, j, &ks);
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e),
            });
        }
        acc.expect("at least one field")
    }

    /// Full conditioning vector `c = m + t`, with optional per-sample keep
    /// mask applied to `m` (the guidance null branch zeroes the whole vector).
    pub fn combine<E: Element>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
        recs: &[MetadataRecord],
        ts: &[usize],
        ranges: &MetadataRanges,
        keep: Option<&[bool]>,
    ) -> Var {
        assert_eq!(recs.len(), ts.len());
        let m = self.metadata_sum(tape, store, recs, ranges);
        let m = match keep {
            None => m,
            Some(mask) => {
                assert_eq!(mask.len(), recs.len());
                let mut k = ArrayD::<E>::zeros(IxDyn(&[recs.len(), 1]));
                for (i, &keep_i) in mask.iter().enumerate() {
                    k[[i, 0]] = if keep_i { E::one() } else { E::zero() };
                }
                tape.mul_const(m, &k)
            }
        };
        let t = self.embed_timestep(tape, store, ts);
        tape.add(m, t)
    }

    /// Timestep-only conditioning (the trained null branch).
    pub fn combine_null<E: Element>(
        &self,
        tape: &Tape<E>,
        store: &ParamStore<E>,
        ts: &[usize],
    ) -> Var {
        self.embed_timestep(tape, store, ts)
    }
}

/// Whole-vector dropout: with probability `p` the metadata vector becomes all
/// zeros, never per-coordinate.
pub fn metadata_dropout<E: Element>(m: &ArrayD<E>, p: f64, rng: &mut ChaCha8Rng) -> ArrayD<E> {
    assert!((0.0..=1.0).contains(&p), "dropout probability out of range");
    if rng.random::<f64>() < p {
        ArrayD::zeros(m.raw_dim())
    } else {
        m.clone()
    }
}

/// Draws the per-sample keep mask for a batch (false = dropped).
pub fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() >= p).collect()
}
