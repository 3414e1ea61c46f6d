//! Procedural satellite-scene renderer and dataset generator.
//!
//! Rendering is a pure function of `(seed, spec)`. Metadata is bound to
//! pixels in invertible ways the probe module can recover:
//!   - month  -> global hue from a 12-step seasonal palette (every colored
//!     pixel carries exactly the palette hue; structures and water are gray)
//!   - gsd    -> Gaussian blur radius, in four buckets
//!   - cloud_cover -> exact fraction of occluded (near-white) pixels
//!   - lat    -> texture frequency of the terrain value noise
//!
//! Temporal sequences share a seed and location; later dates render a
//! superset of earlier structures.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{append_metadata_caption, build_caption};
use super::color::hsv_to_rgb;
use super::io::{save_band_image, save_rgb_png};
use super::sequence::{day_number, resize_bilinear, BandImage};
use super::{manifest_path, save_manifest, DatasetKind, ManifestRecord};
use crate::metadata::MetadataRecord;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 8;
/// Maximum terrain/structure brightness; clouds render strictly above this.
pub const TERRAIN_VALUE_CAP: f64 = 0.92;
pub const CLOUD_VALUE_FLOOR: f64 = 0.97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneClass {
    Field,
    HousingGrid,
    River,
    RoadGrid,
    Forest,
    Stadium,
    Port,
    Bare,
}

pub const ALL_CLASSES: [SceneClass; NUM_CLASSES] = [
    SceneClass::Field,
    SceneClass::HousingGrid,
    SceneClass::River,
    SceneClass::RoadGrid,
    SceneClass::Forest,
    SceneClass::Stadium,
    SceneClass::Port,
    SceneClass::Bare,
];

/// Classes whose temporal sequences add structures over time.
pub const DEVELOPING_CLASSES: [SceneClass; 3] =
    [SceneClass::HousingGrid, SceneClass::RoadGrid, SceneClass::Port];

impl SceneClass {
    pub fn name(&self) -> &'static str {
        match self {
            SceneClass::Field => "field",
            SceneClass::HousingGrid => "housing grid",
            SceneClass::River => "river",
            SceneClass::RoadGrid => "road grid",
            SceneClass::Forest => "forest",
            SceneClass::Stadium => "stadium",
            SceneClass::Port => "port",
            SceneClass::Bare => "bare ground",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub metadata: MetadataRecord,
    pub class: SceneClass,
}

pub struct RenderedScene {
    /// `[3, s, s]` in `[0, 1]`.
    pub rgb: ArrayD<f32>,
    pub structures: Array2<bool>,
    pub clouds: Array2<bool>,
}

/// Seasonal palette: hue (in turns) for month `1..=12`.
pub fn palette_hue(month: f64) -> f64 {
    let m = month.round().clamp(1.0, 12.0);
    (m - 1.0) / 12.0
}

/// Blur radius buckets over the gsd range `[0, 10]`.
pub fn gsd_bucket(gsd: f64) -> usize {
    ((gsd / 2.5).floor() as usize).min(3)
}

pub const BLUR_SIGMAS: [f64; 4] = [0.0, 0.8, 2.4, 6.0];

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
fn value_noise(size: usize, freq: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = freq + 1;
    let mut lattice = Array2::<f64>::zeros((g + 1, g + 1));
    for v in lattice.iter_mut() {
        *v = rng.random::<f64>();
    }
    let mut out = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * g as f64;
            let fx = x as f64 / size as f64 * g as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let v = lattice[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + lattice[[y0, x0 + 1]] * (1.0 - wy) * wx
                + lattice[[y0 + 1, x0]] * wy * (1.0 - wx)
                + lattice[[y0 + 1, x0 + 1]] * wy * wx;
            out[[y, x]] = v;
        }
    }
    out
}

struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    value: f64,
}

fn draw_rect(
    val: &mut Array2<f64>,
    sat: &mut Array2<f64>,
    structures: &mut Array2<bool>,
    rect: &Rect,
    size: usize,
) {
    for y in rect.y..(rect.y + rect.h).min(size) {
        for x in rect.x..(rect.x + rect.w).min(size) {
            val[[y, x]] = rect.value;
            sat[[y, x]] = 0.03;
            structures[[y, x]] = true;
        }
    }
}

/// Number of development structures present at the spec's date.
fn development_count(md: &MetadataRecord, max_candidates: usize) -> usize {
    let day0 = 2010.0 * 372.0;
    let grown = ((day_number(md) - day0) / 250.0).floor().max(0.0) as usize;
    (3 + grown).min(max_candidates)
}

fn gaussian_blur_rgb(rgb: &mut ArrayD<f32>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }
    let (c, h, w) = (rgb.shape()[0], rgb.shape()[1], rgb.shape()[2]);
    // horizontal then vertical, edge replicate
    let mut tmp = rgb.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * rgb[[ci, y, sx as usize]] as f64;
                }
                tmp[[ci, y, x]] = acc as f32;
            }
        }
    }
    for ci in 0..c {
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[[ci, sy as usize, x]] as f64;
                }
                rgb[[ci, y, x]] = acc as f32;
            }
        }
    }
}

/// Renders a scene at `size x size`. Pure in `(spec, size)`.
pub fn render_scene(spec: &SyntheticSceneSpec, size: usize) -> RenderedScene {
    let md = &spec.metadata;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));

    // latitude -> texture frequency
    let freq = 2 + (((md.lat + 90.0) / 180.0).clamp(0.0, 1.0) * 6.0).round() as usize;
    let noise = value_noise(size, freq, &mut layout_rng);
    let fine = value_noise(size, freq * 3, &mut layout_rng);
    let mid = value_noise(size, 14, &mut layout_rng);

    let mut val = Array2::<f64>::zeros((size, size));
    let mut sat = Array2::<f64>::zeros((size, size));
    let mut structures = Array2::<bool>::from_elem((size, size), false);
    // per-pixel grain keeps unblurred scenes separable from blurred ones
    let mut grain = Array2::<f64>::zeros((size, size));
    for v in grain.iter_mut() {
        *v = layout_rng.random::<f64>() - 0.5;
    }
    for y in 0..size {
        for x in 0..size {
            val[[y, x]] = 0.40 + 0.26 * noise[[y, x]] + 0.10 * fine[[y, x]] + 0.12 * mid[[y, x]] + 0.1 * grain[[y, x]];
            sat[[y, x]] = 0.55 + 0.25 * fine[[y, x]];
        }
    }

    match spec.class {
        SceneClass::Field => {
            let row_freq = 0.5 + layout_rng.random::<f64>() * 0.6;
            let phase = layout_rng.random::<f64>() * 6.28;
            for y in 0..size {
                for x in 0..size {
                    let stripe = ((y as f64 * row_freq + phase).sin() * 0.5 + 0.5) * 0.18;
                    val[[y, x]] = (val[[y, x]] - 0.09 + stripe).clamp(0.1, 1.0);
                }
            }
            let boundary = layout_rng.random_range(0..size);
            for y in 0..size {
                let x = boundary.min(size - 2);
                val[[y, x]] *= 0.55;
                val[[y, x + 1]] *= 0.55;
            }
        }
        SceneClass::HousingGrid | SceneClass::RoadGrid | SceneClass::Port => {
            if spec.class == SceneClass::RoadGrid {
                let pitch = 10 + layout_rng.random_range(0..6);
                let offset = layout_rng.random_range(0..pitch);
                for y in 0..size {
                    for x in 0..size {
                        if (y + offset) % pitch < 2 || (x + offset) % pitch < 2 {
                            val[[y, x]] = 0.2;
                            sat[[y, x]] = 0.03;
                            structures[[y, x]] = true;
                        }
                    }
                }
            }
            if spec.class == SceneClass::Port {
                let shore = (size as f64 * 0.62) as usize;
                let wave = value_noise(size, 3, &mut layout_rng);
                for y in 0..size {
                    for x in 0..size {
                        let edge = shore as f64 + (wave[[0, x]] - 0.5) * 10.0;
                        if (y as f64) > edge {
                            val[[y, x]] = 0.28 + 0.05 * fine[[y, x]];
                            sat[[y, x]] = 0.05;
                        }
                    }
                }
            }
            // development candidates in a fixed seed-determined order
            let max_candidates = 24;
            let mut rects = Vec::with_capacity(max_candidates);
            for _ in 0..max_candidates {
                let h = 3 + layout_rng.random_range(0..4);
                let w = 3 + layout_rng.random_range(0..4);
                let y = layout_rng.random_range(0..size - h);
                let x = layout_rng.random_range(0..size - w);
                let value = 0.55 + layout_rng.random::<f64>() * 0.3;
                rects.push(Rect { y, x, h, w, value });
            }
            let n = development_count(md, max_candidates);
            for rect in rects.iter().take(n) {
                draw_rect(&mut val, &mut sat, &mut structures, rect, size);
            }
        }
        SceneClass::River => {
            let amp = 6.0 + layout_rng.random::<f64>() * 10.0;
            let period = 20.0 + layout_rng.random::<f64>() * 30.0;
            let phase = layout_rng.random::<f64>() * 6.28;
            let center = size as f64 / 2.0 + layout_rng.random_range(-8..8) as f64;
            let width = 3.0 + layout_rng.random::<f64>() * 3.0;
            for y in 0..size {
                let cx = center + amp * ((y as f64) / period * 6.28 + phase).sin();
                for x in 0..size {
                    let d = (x as f64 - cx).abs();
                    if d < width {
                        val[[y, x]] = 0.26 + 0.04 * fine[[y, x]];
                        sat[[y, x]] = 0.05;
                    } else if d < width + 2.0 {
                        val[[y, x]] *= 0.8;
                    }
                }
            }
        }
        SceneClass::Forest => {
            let blobs = value_noise(size, freq * 2, &mut layout_rng);
            for y in 0..size {
                for x in 0..size {
                    if blobs[[y, x]] > 0.45 {
                        val[[y, x]] = 0.24 + 0.22 * fine[[y, x]];
                    }
                    sat[[y, x]] = (sat[[y, x]] + 0.15).min(0.9);
                }
            }
        }
        SceneClass::Stadium => {
            let cy = size as f64 / 2.0 + layout_rng.random_range(-6..6) as f64;
            let cx = size as f64 / 2.0 + layout_rng.random_range(-6..6) as f64;
            let ry = size as f64 * (0.18 + layout_rng.random::<f64>() * 0.08);
            let rx = size as f64 * (0.24 + layout_rng.random::<f64>() * 0.08);
            for y in 0..size {
                for x in 0..size {
                    let e = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                    if (0.78..=1.0).contains(&e) {
                        val[[y, x]] = 0.78;
                        sat[[y, x]] = 0.03;
                        structures[[y, x]] = true;
                    } else if e < 0.78 {
                        val[[y, x]] = 0.6 + 0.1 * fine[[y, x]];
                    }
                }
            }
        }
        SceneClass::Bare => {
            for y in 0..size {
                for x in 0..size {
                    val[[y, x]] = 0.42 + 0.20 * noise[[y, x]] + 0.08 * fine[[y, x]] + 0.14 * mid[[y, x]] + 0.1 * grain[[y, x]];
                    sat[[y, x]] = 0.4 + 0.2 * fine[[y, x]];
                }
            }
        }
    }

    // compose RGB: one global hue, gray structures
    let hue = palette_hue(md.month);
    let mut rgb = ArrayD::<f32>::zeros(IxDyn(&[3, size, size]));
    for y in 0..size {
        for x in 0..size {
            let v = val[[y, x]].clamp(0.05, TERRAIN_VALUE_CAP);
            let s = sat[[y, x]].clamp(0.0, 0.95);
            let (r, g, b) = hsv_to_rgb(hue, s, v);
            rgb[[0, y, x]] = r as f32;
            rgb[[1, y, x]] = g as f32;
            rgb[[2, y, x]] = b as f32;
        }
    }

    // gsd -> blur
    gaussian_blur_rgb(&mut rgb, BLUR_SIGMAS[gsd_bucket(md.gsd)]);

    // cloud_cover -> exact occluded fraction
    let mut clouds = Array2::<bool>::from_elem((size, size), false);
    let cover = md.cloud_cover.clamp(0.0, 1.0);
    let k = (cover * (size * size) as f64).round() as usize;
    if k > 0 {
        let mut cloud_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
        let field = value_noise(size, 3, &mut cloud_rng);
        let texture = value_noise(size, 9, &mut cloud_rng);
        let mut order: Vec<(usize, usize)> = (0..size * size).map(|i| (i / size, i % size)).collect();
        order.sort_by(|a, b| {
            field[[b.0, b.1]]
                .partial_cmp(&field[[a.0, a.1]])
                .unwrap()
                .then((a.0 * size + a.1).cmp(&(b.0 * size + b.1)))
        });
        for &(y, x) in order.iter().take(k) {
            let v = (CLOUD_VALUE_FLOOR + 0.03 * texture[[y, x]]) as f32;
            rgb[[0, y, x]] = v;
            rgb[[1, y, x]] = v;
            rgb[[2, y, x]] = v;
            clouds[[y, x]] = true;
        }
    }

    RenderedScene {
        rgb,
        structures,
        clouds,
    }
}

/// Fixed fictional gazetteer keyed on a coarse lon/lat grid.
const COUNTRIES: [&str; 12] = [
    "Veridia", "Artemis", "Norland", "Caspia", "Meridia", "Solenne", "Kestrel", "Tyria", "Auren",
    "Pelagia", "Vostria", "Zephyra",
];

pub fn country_for(lon: f64, lat: f64) -> &'static str {
    let gx = ((lon + 180.0) / 30.0).floor() as i64;
    let gy = ((lat + 90.0) / 30.0).floor() as i64;
    COUNTRIES[((gx * 7 + gy * 13).rem_euclid(12)) as usize]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Single,
    Temporal,
    Superres,
    Inpaint,
}

impl std::str::FromStr for GenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(GenMode::Single),
            "temporal" => Ok(GenMode::Temporal),
            "superres" => Ok(GenMode::Superres),
            "inpaint" => Ok(GenMode::Inpaint),
            other => Err(Error::Config(format!(
                "unknown gen mode '{other}' (single|temporal|superres|inpaint)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub mode: GenMode,
    pub image_size: usize,
    pub lowres_size: usize,
    pub caption_dropout: f64,
    pub metadata_in_caption: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: GenMode::Single,
            image_size: 64,
            lowres_size: 16,
            caption_dropout: 0.1,
            metadata_in_caption: false,
        }
    }
}

pub struct GenSummary {
    pub records: usize,
    pub sequences: usize,
}

fn sample_metadata(rng: &mut ChaCha8Rng) -> MetadataRecord {
    MetadataRecord {
        lon: rng.random::<f64>() * 360.0 - 180.0,
        lat: rng.random::<f64>() * 130.0 - 60.0,
        gsd: 0.3 + rng.random::<f64>() * 4.1,
        cloud_cover: if rng.random::<f64>() < 0.6 {
            0.0
        } else {
            rng.random::<f64>() * 0.25
        },
        year: (2010 + rng.random_range(0..15)) as f64,
        month: (1 + rng.random_range(0..12)) as f64,
        day: (1 + rng.random_range(0..28)) as f64,
    }
}

/// Ten synthetic bands derived from an RGB image (deterministic mixes).
pub fn rgb_to_ten_bands(rgb: &ArrayD<f32>) -> BandImage {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let mixes: [(f32, f32, f32); 10] = [
        (0.0, 0.0, 1.0),   // B2
        (0.0, 1.0, 0.0),   // B3
        (1.0, 0.0, 0.0),   // B4
        (0.6, 0.4, 0.0),   // B5
        (0.4, 0.6, 0.0),   // B6
        (0.2, 0.8, 0.0),   // B7
        (0.0, 0.9, 0.1),   // B8
        (0.1, 0.8, 0.1),   // B8A
        (0.7, 0.0, 0.3),   // B11
        (0.5, 0.0, 0.5),   // B12
    ];
    let names = ["B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12"];
    let mut data = ArrayD::<f32>::zeros(IxDyn(&[10, h, w]));
    for (bi, (mr, mg, mb)) in mixes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                data[[bi, y, x]] =
                    mr * rgb[[0, y, x]] + mg * rgb[[1, y, x]] + mb * rgb[[2, y, x]];
            }
        }
    }
    BandImage::new(data, names.iter().map(|s| s.to_string()).collect()).expect("consistent")
}

fn labels_for(class: SceneClass, md: &MetadataRecord) -> BTreeMap<String, String> {
    let mut labels = BTreeMap::new();
    labels.insert("object".to_string(), class.name().to_string());
    labels.insert("country".to_string(), country_for(md.lon, md.lat).to_string());
    labels
}

/// Writes `n` samples (or sequences/pairs, depending on mode) plus the
/// manifest. Byte-identical output for identical `(n, seed, config)`.
pub fn generate_synthetic_dataset(
    n: usize,
    seed: u64,
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<GenSummary> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let mut caption_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut sequences = 0usize;

    match cfg.mode {
        GenMode::Single => {
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10 + i as u64));
                let md = sample_metadata(&mut rng);
                let class = ALL_CLASSES[i % NUM_CLASSES];
                let spec = SyntheticSceneSpec {
                    seed: derive_seed(seed, 1000 + i as u64),
                    metadata: md,
                    class,
                };
                let scene = render_scene(&spec, cfg.image_size);
                let id = format!("syn_{i:06}");
                let rel = format!("images/{id}.png");
                save_rgb_png(&images.join(format!("{id}.png")), &scene.rgb)?;
                let labels = labels_for(class, &md);
                let mut caption =
                    build_caption(DatasetKind::Synthetic, &labels, &mut caption_rng, cfg.caption_dropout)?;
                if cfg.metadata_in_caption {
                    caption = append_metadata_caption(&caption, &md);
                }
                records.push(ManifestRecord {
                    id,
                    image: rel,
                    dataset: DatasetKind::Synthetic,
                    caption,
                    labels,
                    lon: md.lon,
                    lat: md.lat,
                    gsd: md.gsd,
                    cloud_cover: md.cloud_cover,
                    year: md.year,
                    month: md.month,
                    day: md.day,
                    sequence_id: None,
                    frame_index: None,
                    lowres: None,
                    corrupted: None,
                    mask: None,
                });
            }
        }
        GenMode::Temporal => {
            for s in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10 + s as u64));
                let mut md = sample_metadata(&mut rng);
                md.cloud_cover = 0.0;
                md.gsd = 0.5 + rng.random::<f64>() * 1.5;
                let class = DEVELOPING_CLASSES[s % DEVELOPING_CLASSES.len()];
                let frames = 2 + rng.random_range(0..4); // 2..=5
                let scene_seed = derive_seed(seed, 5000 + s as u64);
                let seq_id = format!("seq_{s:05}");
                let mut year = 2010.0 + rng.random_range(0..4) as f64;
                for f in 0..frames {
                    let mut fmd = md;
                    fmd.year = year;
                    fmd.month = (1 + rng.random_range(0..12)) as f64;
                    fmd.day = (1 + rng.random_range(0..28)) as f64;
                    year += 1.0 + rng.random_range(0..3) as f64;
                    let spec = SyntheticSceneSpec {
                        seed: scene_seed,
                        metadata: fmd,
                        class,
                    };
                    let scene = render_scene(&spec, cfg.image_size);
                    let id = format!("seq_{s:05}_f{f}");
                    let rel = format!("images/{id}.png");
                    save_rgb_png(&images.join(format!("{id}.png")), &scene.rgb)?;
                    let labels = labels_for(class, &fmd);
                    let caption = build_caption(
                        DatasetKind::Synthetic,
                        &labels,
                        &mut caption_rng,
                        cfg.caption_dropout,
                    )?;
                    records.push(ManifestRecord {
                        id,
                        image: rel,
                        dataset: DatasetKind::Synthetic,
                        caption,
                        labels,
                        lon: fmd.lon,
                        lat: fmd.lat,
                        gsd: fmd.gsd,
                        cloud_cover: fmd.cloud_cover,
                        year: fmd.year,
                        month: fmd.month,
                        day: fmd.day,
                        sequence_id: Some(seq_id.clone()),
                        frame_index: Some(f as u32),
                        lowres: None,
                        corrupted: None,
                        mask: None,
                    });
                }
                sequences += 1;
            }
        }
        GenMode::Superres => {
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10 + i as u64));
                let mut md = sample_metadata(&mut rng);
                md.cloud_cover = 0.0;
                md.gsd = 0.4 + rng.random::<f64>() * 1.2;
                // bias toward structured scenes where detail matters
                let class = match i % 4 {
                    0 => SceneClass::HousingGrid,
                    1 => SceneClass::RoadGrid,
                    2 => SceneClass::Stadium,
                    _ => ALL_CLASSES[i % NUM_CLASSES],
                };
                let spec = SyntheticSceneSpec {
                    seed: derive_seed(seed, 7000 + i as u64),
                    metadata: md,
                    class,
                };
                let scene = render_scene(&spec, cfg.image_size);
                let id = format!("sr_{i:06}");
                let rel = format!("images/{id}.png");
                save_rgb_png(&images.join(format!("{id}.png")), &scene.rgb)?;
                let low = resize_bilinear(&scene.rgb, cfg.lowres_size, cfg.lowres_size);
                let bands = rgb_to_ten_bands(&low);
                let lr_rel = format!("images/{id}_lr.bin");
                save_band_image(&images.join(format!("{id}_lr.bin")), &bands)?;
                let labels = labels_for(class, &md);
                let caption = build_caption(
                    DatasetKind::Synthetic,
                    &labels,
                    &mut caption_rng,
                    cfg.caption_dropout,
                )?;
                records.push(ManifestRecord {
                    id,
                    image: rel,
                    dataset: DatasetKind::Synthetic,
                    caption,
                    labels,
                    lon: md.lon,
                    lat: md.lat,
                    gsd: md.gsd,
                    cloud_cover: md.cloud_cover,
                    year: md.year,
                    month: md.month,
                    day: md.day,
                    sequence_id: None,
                    frame_index: None,
                    lowres: Some(lr_rel),
                    corrupted: None,
                    mask: None,
                });
            }
        }
        GenMode::Inpaint => {
            let disasters = ["flooding", "fire", "wind", "earthquake"];
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10 + i as u64));
                let mut md = sample_metadata(&mut rng);
                md.cloud_cover = 0.0;
                let class = DEVELOPING_CLASSES[i % DEVELOPING_CLASSES.len()];
                let spec = SyntheticSceneSpec {
                    seed: derive_seed(seed, 9000 + i as u64),
                    metadata: md,
                    class,
                };
                let scene = render_scene(&spec, cfg.image_size);
                let id = format!("inp_{i:06}");
                save_rgb_png(&images.join(format!("{id}.png")), &scene.rgb)?;

                // box mask covering 25-40% of the area
                let size = cfg.image_size;
                let frac = 0.25 + rng.random::<f64>() * 0.15;
                let mh = ((size as f64) * frac.sqrt()) as usize;
                let my = rng.random_range(0..size - mh);
                let mx = rng.random_range(0..size - mh);
                let mut mask = ArrayD::<f32>::zeros(IxDyn(&[3, size, size]));
                let mut corrupted = scene.rgb.clone();
                let kind = i % 3;
                for y in my..my + mh {
                    for x in mx..mx + mh {
                        for ci in 0..3 {
                            mask[[ci, y, x]] = 1.0;
                            corrupted[[ci, y, x]] = match kind {
                                0 => 0.98, // cloud-white
                                1 => rng.random::<f32>(),
                                _ => 0.0,
                            };
                        }
                    }
                }
                save_rgb_png(&images.join(format!("{id}_corrupt.png")), &corrupted)?;
                save_rgb_png(&images.join(format!("{id}_mask.png")), &mask)?;

                let mut labels = labels_for(class, &md);
                labels.insert("phase".into(), "after".into());
                labels.insert(
                    "disaster_type".into(),
                    disasters[i % disasters.len()].to_string(),
                );
                let caption = build_caption(
                    DatasetKind::Xbd,
                    &labels,
                    &mut caption_rng,
                    cfg.caption_dropout,
                )?;
                records.push(ManifestRecord {
                    id: id.clone(),
                    image: format!("images/{id}.png"),
                    dataset: DatasetKind::Synthetic,
                    caption,
                    labels,
                    lon: md.lon,
                    lat: md.lat,
                    gsd: md.gsd,
                    cloud_cover: md.cloud_cover,
                    year: md.year,
                    month: md.month,
                    day: md.day,
                    sequence_id: None,
                    frame_index: None,
                    lowres: None,
                    corrupted: Some(format!("images/{id}_corrupt.png")),
                    mask: Some(format!("images/{id}_mask.png")),
                });
            }
        }
    }

    save_manifest(&manifest_path(out_dir), &records)?;
    Ok(GenSummary {
        records: records.len(),
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::color::{hue_distance, rgb_to_hsv};
    use crate::data::probe::probe_metadata;

    fn md(month: f64, gsd: f64, cloud: f64) -> MetadataRecord {
        MetadataRecord {
            lon: 11.0,
            lat: 47.0,
            gsd,
            cloud_cover: cloud,
            year: 2016.0,
            month,
            day: 12.0,
        }
    }

    #[test]
    fn rendering_is_pure_in_seed_and_spec() {
        let spec = SyntheticSceneSpec {
            seed: 99,
            metadata: md(5.0, 1.0, 0.1),
            class: SceneClass::HousingGrid,
        };
        let a = render_scene(&spec, 64);
        let b = render_scene(&spec, 64);
        assert!(a
            .rgb
            .iter()
            .zip(b.rgb.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn month_binding_shifts_mean_hue_by_exact_palette_gap() {
        for class in ALL_CLASSES {
            let base = SyntheticSceneSpec {
                seed: 7,
                metadata: md(1.0, 0.5, 0.0),
                class,
            };
            let mut july = base;
            july.metadata.month = 7.0;
            let jan_img = render_scene(&base, 64).rgb;
            let jul_img = render_scene(&july, 64).rgb;
            let mean_hue = |img: &ndarray::ArrayD<f32>| -> f64 {
                // circular mean over colored pixels
                let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
                for y in 0..64 {
                    for x in 0..64 {
                        let (h, s, _) = rgb_to_hsv(
                            img[[0, y, x]] as f64,
                            img[[1, y, x]] as f64,
                            img[[2, y, x]] as f64,
                        );
                        if s > 0.25 {
                            sx += (h * std::f64::consts::TAU).cos();
                            sy += (h * std::f64::consts::TAU).sin();
                            n += 1;
                        }
                    }
                }
                assert!(n > 0);
                (sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0)
            };
            let gap = hue_distance(mean_hue(&jan_img), mean_hue(&jul_img));
            let expected = hue_distance(palette_hue(1.0), palette_hue(7.0));
            assert!(
                (gap - expected).abs() < 1e-6,
                "{class:?}: gap {gap} vs palette {expected}"
            );
        }
    }

    #[test]
    fn cloud_cover_binds_exact_pixel_fraction() {
        for cover in [0.0, 0.1, 0.33] {
            let spec = SyntheticSceneSpec {
                seed: 21,
                metadata: md(4.0, 1.0, cover),
                class: SceneClass::Field,
            };
            let scene = render_scene(&spec, 64);
            let n: usize = scene.clouds.iter().filter(|&&c| c).count();
            assert_eq!(n, (cover * 4096.0).round() as usize);
        }
    }

    #[test]
    fn temporal_development_is_monotone_superset() {
        for class in DEVELOPING_CLASSES {
            let early = SyntheticSceneSpec {
                seed: 5,
                metadata: MetadataRecord {
                    year: 2012.0,
                    ..md(6.0, 1.0, 0.0)
                },
                class,
            };
            let mut late = early;
            late.metadata.year = 2015.0;
            let a = render_scene(&early, 64);
            let b = render_scene(&late, 64);
            let na = a.structures.iter().filter(|&&s| s).count();
            let nb = b.structures.iter().filter(|&&s| s).count();
            assert!(nb > na, "{class:?}: later date must add structures");
            for (sa, sb) in a.structures.iter().zip(b.structures.iter()) {
                assert!(!sa || *sb, "{class:?}: earlier structures must persist");
            }
        }
    }

    #[test]
    fn probe_round_trip_month_and_cloud() {
        let mut wrong = 0usize;
        for seed in 0..50u64 {
            let month = 1.0 + (seed % 12) as f64;
            let spec = SyntheticSceneSpec {
                seed,
                metadata: md(month, 1.0, 0.0),
                class: ALL_CLASSES[(seed % 8) as usize],
            };
            let scene = render_scene(&spec, 64);
            let probe = probe_metadata(&scene.rgb);
            if probe.month != month as u32 {
                wrong += 1;
            }
            assert!(probe.cloud_fraction < 0.02, "cloud-free scene probed {}", probe.cloud_fraction);
        }
        assert_eq!(wrong, 0, "month recovery must be exact on renders");
    }

    #[test]
    fn probe_low_confidence_on_uniform_gray() {
        let gray = ndarray::ArrayD::<f32>::from_elem(ndarray::IxDyn(&[3, 64, 64]), 0.5);
        let probe = probe_metadata(&gray);
        assert_eq!(probe.month_confidence, 0.0);
        assert_eq!(probe.gsd_confidence, 0.0);
        assert_eq!(probe.cloud_confidence, 0.0);
    }

    #[test]
    fn ten_band_mix_shapes() {
        let rgb = ndarray::ArrayD::<f32>::from_elem(ndarray::IxDyn(&[3, 8, 8]), 0.25);
        let bands = rgb_to_ten_bands(&rgb);
        assert_eq!(bands.data.shape(), &[10, 8, 8]);
        assert_eq!(bands.bands.len(), 10);
        assert!(bands.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
