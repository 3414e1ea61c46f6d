//! Image file I/O: 8-bit PNG for RGB, flat little-endian f32 binaries with a
//! JSON sidecar for multispectral data.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::sequence::BandImage;
use crate::{Error, Result};

/// Saves a `[3, h, w]` image with values in `[0, 1]` as 8-bit PNG.
pub fn save_rgb_png(path: &Path, img: &ArrayD<f32>) -> Result<()> {
    assert_eq!(img.ndim(), 3);
    assert_eq!(img.shape()[0], 3, "save_rgb_png expects 3 channels");
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(Error::from)
}

/// Loads an 8-bit PNG into `[3, h, w]` with values in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<ArrayD<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, h as usize, w as usize]));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BandSidecar {
    shape: Vec<usize>,
    bands: Vec<String>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Writes a band image as a flat little-endian f32 binary plus a JSON
/// sidecar carrying shape and band names.
pub fn save_band_image(path: &Path, img: &BandImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data.len() * 4);
    for v in img.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let sidecar = BandSidecar {
        shape: img.data.shape().to_vec(),
        bands: img.bands.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| Error::io(sp.display().to_string(), e))
}

pub fn load_band_image(path: &Path) -> Result<BandImage> {
    let sp = sidecar_path(path);
    let sidecar: BandSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sp).map_err(|e| Error::io(sp.display().to_string(), e))?,
    )?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let expect = sidecar.shape.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = ArrayD::from_shape_vec(IxDyn(&sidecar.shape), values)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    BandImage::new(data, sidecar.bands)
}

/// `[0, 1]` image to the `[-1, 1]` model range.
pub fn to_model_range(img: &ArrayD<f32>) -> ArrayD<f32> {
    img.mapv(|v| v * 2.0 - 1.0)
}

/// `[-1, 1]` model output back to a clipped `[0, 1]` image.
pub fn from_model_range(img: &ArrayD<f32>) -> ArrayD<f32> {
    img.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ArrayD::<f32>::from_shape_fn(IxDyn(&[3, 5, 7]), |ix| {
            ((ix[0] * 89 + ix[1] * 13 + ix[2] * 3) % 256) as f32 / 255.0
        });
        save_rgb_png(&path, &img).unwrap();
        let back = load_rgb_png(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn band_image_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ms.bin");
        let data = ArrayD::<f32>::from_shape_fn(IxDyn(&[4, 3, 3]), |ix| {
            (ix[0] as f32 - 1.5) * 0.3331 + ix[1] as f32 * 0.01 + ix[2] as f32
        });
        let img = BandImage::new(data, vec!["A".into(), "B".into(), "C".into(), "D".into()])
            .unwrap();
        save_band_image(&path, &img).unwrap();
        let back = load_band_image(&path).unwrap();
        assert_eq!(back.bands, img.bands);
        assert!(img
            .data
            .iter()
            .zip(back.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
