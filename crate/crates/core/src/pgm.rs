//! 8-bit binary PGM (P5) reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::{Error, Image, Result};

/// Raw 8-bit grey levels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Gray8 {
    /// Maps levels 0..=255 linearly onto [0, 1].
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// Quantises [0, 1] values to the nearest level (clamping outside values).
    pub fn from_image(img: &Image) -> Self {
        Gray8 {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Pnm) {
        return Err(Error::format(path, "not a PGM file"));
    }
    let img = reader
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(
            path,
            format!("expected 8-bit greyscale, found {:?}", img.color()),
        ));
    }
    let gray = img.into_luma8();
    Ok(Gray8 {
        height: gray.height() as usize,
        width: gray.width() as usize,
        data: gray.into_raw(),
    })
}

pub fn write_pgm(path: &Path, img: &Gray8) -> Result<()> {
    if img.data.len() != img.height * img.width {
        return Err(Error::invalid("pgm buffer size does not match dimensions"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.data, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}
