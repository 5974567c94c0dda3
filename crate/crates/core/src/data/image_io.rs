//! Frame files. PPM/PGM are the native interchange formats; PNG is read and
//! written as well for convenience.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::color::RgbImage;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            msg: format!("{}: {other}", path.display()),
        },
    }
}

/// Reads an 8-bit image as a 1×3×H×W tensor in [0, 1]. Gray images are
/// replicated to three channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        raw[3 * (y * w + x) + c] as f32 / 255.0
    }))
}

/// Quantizes item 0 of a 3-channel tensor in [0, 1] to 8 bits.
pub fn tensor_to_rgb(t: &Tensor4<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::invalid("tensor_to_rgb", format!("expected 3 channels, got {s}")));
    }
    let mut pixels = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                pixels.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage {
        width: s.w,
        height: s.h,
        pixels,
    })
}

fn format_for(path: &Path) -> ImageFormat {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => ImageFormat::Png,
        _ => ImageFormat::Pnm,
    }
}

/// Writes binary PPM (P6) unless the extension asks for PNG.
pub fn write_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::invalid("write_rgb", "pixel buffer does not match extents"))?;
    let fmt = format_for(path);
    let dynimg = DynamicImage::ImageRgb8(buf);
    if fmt == ImageFormat::Pnm {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let enc = image::codecs::pnm::PnmEncoder::new(&mut out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary));
        dynimg.write_with_encoder(enc).map_err(|e| image_err(path, e))
    } else {
        dynimg.save_with_format(path, fmt).map_err(|e| image_err(path, e))
    }
}

/// Writes an 8-bit single-channel image as binary PGM (P5).
pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::invalid("write_gray", "pixel buffer does not match extents"))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let enc = image::codecs::pnm::PnmEncoder::new(&mut out)
        .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
    DynamicImage::ImageLuma8(buf)
        .write_with_encoder(enc)
        .map_err(|e| image_err(path, e))
}

pub fn write_frame(path: impl AsRef<Path>, t: &Tensor4<f32>) -> Result<()> {
    write_rgb(path, &tensor_to_rgb(t)?)
}
