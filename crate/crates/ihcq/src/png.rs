//! 8-bit PNG images: RGB tiles, grayscale masks and label maps.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use ihcq_core::annotations::LabelMap;
use ihcq_core::slide::{PatchImage, ResolutionSpec};

use crate::error::{Error, Result};
use crate::fsutil;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fsutil::read(path)?;
    ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))
}

/// Decode a PNG as 8-bit RGB (gray and alpha are converted).
pub fn read_rgb(path: &Path, mpp: ResolutionSpec) -> Result<PatchImage> {
    let img = decode(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(PatchImage::new(w, h, img.into_raw(), mpp)?)
}

/// Decode a PNG as 8-bit grayscale: `(width, height, values)`.
pub fn read_gray(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

fn encode(path: &Path, w: u32, h: u32, data: &[u8], color: ExtendedColorType) -> Result<()> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(data, w, h, color)
        .map_err(|e| Error::format(path, e))?;
    fsutil::write_atomic(path, &out)
}

pub fn write_rgb(path: &Path, img: &PatchImage) -> Result<()> {
    encode(path, img.width(), img.height(), img.pixels(), ExtendedColorType::Rgb8)
}

pub fn write_gray(path: &Path, w: u32, h: u32, data: &[u8]) -> Result<()> {
    encode(path, w, h, data, ExtendedColorType::L8)
}

/// Label map as grayscale PNG holding the raw codes 0, 1, 2.
pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    write_gray(path, map.width(), map.height(), map.values())
}
