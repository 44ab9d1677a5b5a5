use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Real, Tensor};

/// Sample depth used when writing PNGs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads an 8- or 16-bit gray or RGB PNG as `[H, W, 1]` or `[H, W, 3]` in `[0, 1]`.
///
/// Alpha channels are discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| image_err(path, e.to_string()))?;
    if format != image::ImageFormat::Png {
        return Err(image_err(path, format!("unsupported format {:?}, only PNG is read", format)));
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_tensor = |c: usize, data: Vec<f32>| Tensor::from_vec(&[h, w, c], data);
    match img {
        DynamicImage::ImageLuma8(b) => to_tensor(1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            to_tensor(1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(b) => to_tensor(1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma16();
            to_tensor(1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageRgb8(b) => to_tensor(3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            to_tensor(3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let b = img.to_rgb16();
            to_tensor(3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other => Err(image_err(path, format!("unsupported pixel type {:?}", other.color()))),
    }
}

/// Clamps to `[0, 1]` and quantizes with round-half-to-even.
pub fn quantize<T: Real>(v: T, max: f64) -> f64 {
    (v.f64().clamp(0.0, 1.0) * max).round_ties_even()
}

/// Writes a 1- or 3-channel image as PNG.
pub fn save_image<T: Real>(img: &Tensor<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.hwc()?;
    let (w32, h32) = (w as u32, h as u32);
    let bad = || image_err(path, "buffer size mismatch");
    let dynimg = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
            match c {
                1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, raw).ok_or_else(bad)?),
                3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, raw).ok_or_else(bad)?),
                _ => return Err(image_err(path, format!("cannot save {} channels", c))),
            }
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            match c {
                1 => DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, raw).ok_or_else(bad)?),
                3 => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, raw).ok_or_else(bad)?),
                _ => return Err(image_err(path, format!("cannot save {} channels", c))),
            }
        }
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(1);
        let img = Tensor::from_fn(&[5, 7, 3], |_| rng.below(256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        save_image(&img, &p, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn half_rounds_to_even() {
        assert_eq!(quantize(0.5f32, 255.0), 128.0);
        assert_eq!(quantize(1.5f64 / 255.0, 255.0), 2.0);
        assert_eq!(quantize(2.5f64 / 255.0, 255.0), 2.0);
        assert_eq!(quantize(-0.2f32, 255.0), 0.0);
        assert_eq!(quantize(3.0f32, 255.0), 255.0);
    }

    #[test]
    fn sixteen_bit_gray_is_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[4, 6, 1], |i| i as f32 / 23.0);
        let p = dir.path().join("g.png");
        save_image(&img, &p, BitDepth::Sixteen).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), &[4, 6, 1]);
        assert!(back.max_abs_diff(&img).unwrap() < 1.0 / 65535.0);
    }

    #[test]
    fn rejects_non_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        assert!(matches!(load_image(dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
