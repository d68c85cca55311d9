//! Image decoding, bilinear resize and normalization to the model input range.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 224;

/// 8-bit RGB pixels, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Sidecar header describing a raw `.rgb8` dump.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let format = image::guess_format(bytes)
            .map_err(|e| Error::ImageFormat(format!("unrecognized image data: {e}")))?;
        if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
            return Err(Error::ImageFormat(format!(
                "unsupported format {format:?}; expected PNG or JPEG"
            )));
        }
        let img = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| Error::ImageFormat(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    /// Encodes as PNG, used to echo the source image back to clients.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::ImageFormat(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Loads a PNG/JPEG file, or a raw `.rgb8` dump with its sidecar header.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "rgb8") {
            return Self::load_rgb8(path);
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Raw dump at `path`, dimensions read from `<path>.json`.
    pub fn load_rgb8(path: &Path) -> Result<Self> {
        let header_path = rgb8_header_path(path);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: RawHeader = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: header_path,
            source,
        })?;
        let pixels = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::new(header.width, header.height, pixels)
    }

    pub fn save_rgb8(&self, path: &Path) -> Result<()> {
        let header = RawHeader {
            width: self.width,
            height: self.height,
        };
        let header_path = rgb8_header_path(path);
        fs::write(path, &self.pixels).map_err(|e| Error::io(path, e))?;
        fs::write(
            &header_path,
            serde_json::to_string(&header).expect("header serializes"),
        )
        .map_err(|e| Error::io(&header_path, e))
    }
}

pub fn rgb8_header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Resizes to 224x224 and maps each channel value `v` to `(v/255 - 0.5)/0.5`.
pub fn preprocess(img: &RasterImage) -> Tensor {
    preprocess_to(img, INPUT_SIZE, INPUT_SIZE)
}

/// [`preprocess`] with an explicit output size, `[out_h, out_w, 3]`.
pub fn preprocess_to(img: &RasterImage, out_h: usize, out_w: usize) -> Tensor {
    let resized = resize_bilinear(img, out_h, out_w);
    let data = resized
        .into_iter()
        .map(|v| ((v / 255.0 - 0.5) / 0.5) as f32)
        .collect();
    Tensor::new(vec![out_h, out_w, 3], data).expect("resize output extents")
}

/// Bilinear resampling with half-pixel centers and edge clamping, no
/// antialiasing. Returns channel values in `[0, 255]`.
pub fn resize_bilinear(img: &RasterImage, out_h: usize, out_w: usize) -> Vec<f64> {
    if img.height == out_h && img.width == out_w {
        return img.pixels.iter().map(|&v| v as f64).collect();
    }
    let ys = sample_positions(img.height, out_h);
    let xs = sample_positions(img.width, out_w);
    let px = |y: usize, x: usize, c: usize| img.pixels[(y * img.width + x) * 3 + c] as f64;

    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// For each output index: the two source indices and the weight of the second.
fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(RasterImage::new(0, 4, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn native_size_passes_through_affine_map() {
        let pixels: Vec<u8> = (0..224 * 224 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = RasterImage::new(224, 224, pixels.clone()).unwrap();
        let t = preprocess(&img);
        assert_eq!(t.shape(), &[224, 224, 3]);
        for (&v, &p) in t.data().iter().zip(&pixels) {
            assert_eq!(v, ((p as f64 / 255.0 - 0.5) / 0.5) as f32);
        }
    }

    #[test]
    fn midpoint_and_black_endpoints() {
        let mid = RasterImage::new(224, 224, vec![127; 224 * 224 * 3]).unwrap();
        assert!(preprocess(&mid)
            .data()
            .iter()
            .all(|v| v.abs() <= 2.0 / 255.0));
        let mid = RasterImage::new(224, 224, vec![128; 224 * 224 * 3]).unwrap();
        assert!(preprocess(&mid)
            .data()
            .iter()
            .all(|v| v.abs() <= 2.0 / 255.0));

        let black = RasterImage::new(37, 50, vec![0; 37 * 50 * 3]).unwrap();
        assert!(preprocess(&black).data().iter().all(|&v| v == -1.0));
        let white = RasterImage::new(300, 20, vec![255; 300 * 20 * 3]).unwrap();
        assert!(preprocess(&white).data().iter().all(|&v| v == 1.0));
    }

    /// Tent-filter evaluation over every source pixel, independent of the
    /// two-tap implementation above.
    fn tent_resample(img: &RasterImage, out_h: usize, out_w: usize) -> Vec<f64> {
        let src = |i: usize, n_in: usize, n_out: usize| {
            ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
        };
        let mut out = vec![];
        for y in 0..out_h {
            let sy = src(y, img.height(), out_h);
            for x in 0..out_w {
                let sx = src(x, img.width(), out_w);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for iy in 0..img.height() {
                        let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                        if wy == 0.0 {
                            continue;
                        }
                        for ix in 0..img.width() {
                            let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                            acc += wy * wx * img.pixels()[(iy * img.width() + ix) * 3 + c] as f64;
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn checkerboard_downsample_matches_tent_oracle() {
        let n = 448;
        let pixels = (0..n * n)
            .flat_map(|i| {
                let v = if (i / n + i % n) % 2 == 0 { 255u8 } else { 0 };
                [v, 255 - v, v / 2]
            })
            .collect();
        let img = RasterImage::new(n, n, pixels).unwrap();
        let got = preprocess(&img);
        let oracle = tent_resample(&img, 224, 224);
        for (g, o) in got.data().iter().zip(oracle) {
            let expected = (o / 255.0 - 0.5) / 0.5;
            assert!((*g as f64 - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn upsample_matches_tent_oracle() {
        let pixels = (0..5 * 3 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = RasterImage::new(5, 3, pixels).unwrap();
        let got = resize_bilinear(&img, 11, 7);
        let oracle = tent_resample(&img, 11, 7);
        for (g, o) in got.iter().zip(oracle) {
            assert!((g - o).abs() < 1e-9);
        }
    }

    #[test]
    fn png_round_trip_and_format_errors() {
        let pixels = (0..6 * 4 * 3).map(|i| i as u8).collect();
        let img = RasterImage::new(6, 4, pixels).unwrap();
        let png = img.to_png().unwrap();
        assert_eq!(RasterImage::decode(&png).unwrap(), img);

        assert!(matches!(
            RasterImage::decode(b"definitely not an image"),
            Err(Error::ImageFormat(_))
        ));
        assert!(matches!(
            RasterImage::decode(&png[..png.len() / 2]),
            Err(Error::ImageFormat(_))
        ));
    }

    #[test]
    fn truncated_jpeg_is_a_format_error() {
        let img = RasterImage::new(32, 32, vec![90; 32 * 32 * 3]).unwrap();
        let mut jpeg = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut jpeg,
            img.pixels(),
            32,
            32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Jpeg,
        )
        .unwrap();
        let jpeg = jpeg.into_inner();
        assert!(RasterImage::decode(&jpeg).is_ok());
        assert!(matches!(
            RasterImage::decode(&jpeg[..jpeg.len() / 3]),
            Err(Error::ImageFormat(_))
        ));
    }

    #[test]
    fn rgb8_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.rgb8");
        let img = RasterImage::new(3, 2, (0..18).collect()).unwrap();
        img.save_rgb8(&path).unwrap();
        assert!(dir.path().join("fixture.rgb8.json").exists());
        assert_eq!(RasterImage::load(&path).unwrap(), img);
    }
}
