//! PNG persistence for image tensors.
//!
//! Images live in memory as `[3,H,W]` tensors in [-1,1] and on disk as
//! 8-bit RGB PNG. The u8 mapping rounds half away from zero, so a
//! save/load round trip is idempotent on already-quantized values.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// [-1,1] value to the nearest 8-bit level.
fn to_u8(v: f64) -> u8 {
    let unit = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    (unit * 255.0).round() as u8
}

/// 8-bit level back to [-1,1].
fn from_u8(v: u8) -> f64 {
    (v as f64 / 255.0) * 2.0 - 1.0
}

/// Writes a `[3,H,W]` tensor in [-1,1] as RGB PNG.
pub fn save_image_png(path: impl AsRef<Path>, img: &ArrayD<f64>) -> Result<()> {
    let path = path.as_ref();
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!(
            "expected a [3,H,W] image, got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = Rgb([
                to_u8(img[[0, i, j]]),
                to_u8(img[[1, i, j]]),
                to_u8(img[[2, i, j]]),
            ]);
            buf.put_pixel(j as u32, i as u32, px);
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB PNG into a `[3,H,W]` tensor in [-1,1].
pub fn load_image_png(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out[[c, i, j]] = from_u8(px[c]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::clean_image;

    #[test]
    fn save_load_round_trip_is_idempotent_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = clean_image(3, 0);
        save_image_png(&path, &img).unwrap();
        let once = load_image_png(&path).unwrap();
        assert_eq!(once.shape(), img.shape());
        // Quantization error bounded by half a level.
        let max_err = (&once - &img).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(max_err <= 1.0 / 255.0 + 1e-12, "max error {max_err}");

        // A second round trip through disk reproduces the bytes exactly.
        save_image_png(&path, &once).unwrap();
        let twice = load_image_png(&path).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn save_rejects_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let gray = ArrayD::zeros(IxDyn(&[1, 8, 8]));
        assert!(save_image_png(&path, &gray).is_err());
    }

    #[test]
    fn load_missing_file_reports_image_error() {
        let err = load_image_png("/nonexistent/missing.png").unwrap_err();
        assert_eq!(err.kind(), "image");
    }
}
