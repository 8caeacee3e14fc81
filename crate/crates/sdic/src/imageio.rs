//! The in-memory image type and its PNG boundary.
//!
//! Pipelines operate on real `3×H×W` tensors with values in `[−1, 1]`;
//! 8-bit quantization happens only when an image crosses the file boundary,
//! with the linear map `[−1,1] ↔ [0,255]` and round-half-away-from-zero.

use crate::{shape_err, Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;
use tapegrad::Scalar;

/// A `3×H×W` raster in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S: Scalar>(pub ArrayD<S>);

impl<S: Scalar> Image<S> {
    pub fn new(data: ArrayD<S>) -> Result<Self> {
        let sh = data.shape();
        if sh.len() != 3 || sh[0] != 3 || sh[1] != sh[2] {
            return Err(shape_err("image", "[3, H, H]", sh));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(Image(data))
    }

    pub fn side(&self) -> usize {
        self.0.shape()[1]
    }

    /// Clamp all entries into `[−1, 1]` in place.
    pub fn clamp(&mut self) {
        let one = S::one();
        self.0.mapv_inplace(|v| v.min(one).max(-one));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.side();
        let mut out = vec![0u8; h * h * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..h {
                    out[(y * h + x) * 3 + c] = quantize(self.0[[c, y, x]].to_f64_lossy());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], side: usize) -> Result<Self> {
        if bytes.len() != side * side * 3 {
            return Err(Error::Format(format!(
                "rgb buffer length {} does not match side {side}",
                bytes.len()
            )));
        }
        let data = ArrayD::from_shape_fn(IxDyn(&[3, side, side]), |ix| {
            S::lit(dequantize(bytes[(ix[1] * side + ix[2]) * 3 + ix[0]]))
        });
        Ok(Image(data))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let h = self.side() as u32;
        image::RgbImage::from_raw(h, h, self.to_bytes())
            .expect("buffer sized for image")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?
            .to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Format(format!(
                "png {} is not square",
                path.display()
            )));
        }
        Self::from_bytes(img.as_raw(), img.width() as usize)
    }
}

/// `[−1,1] → {0..255}`, linear with round-half-away-from-zero, clamped.
pub fn quantize(v: f64) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
    scaled.round() as u8
}

/// `{0..255} → [−1,1]`, the linear inverse map.
pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_endpoints_and_midpoint() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-2.0), 0);
        // exactly halfway between codes 127 and 128 rounds away from zero
        assert_eq!(quantize(127.5 / 255.0 * 2.0 - 1.0), 128);
    }

    #[test]
    fn dequantize_then_quantize_is_identity() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data = ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |ix| {
            dequantize(((ix[0] * 37 + ix[1] * 11 + ix[2] * 5) % 256) as u8)
        });
        let img: Image<f64> = Image::new(data).unwrap();
        img.save_png(&path).unwrap();
        let back: Image<f64> = Image::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(Image::new(ArrayD::<f64>::zeros(IxDyn(&[1, 8, 8]))).is_err());
        assert!(Image::new(ArrayD::<f64>::zeros(IxDyn(&[3, 8, 4]))).is_err());
        assert!(Image::new(ArrayD::from_elem(IxDyn(&[3, 8, 8]), f64::NAN)).is_err());
    }
}
