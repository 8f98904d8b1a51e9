use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Reads an 8-bit grayscale or RGB PNG into a `(1, C, H, W)` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| ingest(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingest(e.to_string()))?
        .decode()
        .map_err(|e| ingest(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
        other => {
            return Err(ingest(format!(
                "unsupported pixel format {:?}, need 8-bit L or RGB",
                other.color()
            )))
        }
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + i] = f32::from(v) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, channels, h, w), data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single `(1, C, H, W)` tensor with `C` of 1 or 3 as an 8-bit PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.batch != 1 || !matches!(s.channels, 1 | 3) {
        return Err(Error::usage(format!(
            "can only save 1x1xHxW or 1x3xHxW images, got {s}"
        )));
    }
    let plane = s.plane();
    let data = image.data();
    let mut raw = Vec::with_capacity(data.len());
    for i in 0..plane {
        raw.extend((0..s.channels).map(|c| quantize(data[c * plane + i])));
    }
    let (w, h) = (s.width as u32, s.height as u32);
    let dynamic = if s.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer sized from shape"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer sized from shape"))
    };
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Ingest {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}
