//! Patch images, resolution normalization and background masking.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microns per pixel every patch is normalized to before inference.
pub const REFERENCE_MPP: f64 = 0.19;

/// Edge length of a reference patch, in pixels.
pub const REFERENCE_TILE: u32 = 1024;

/// Default luminance above which a pixel counts as white background.
pub const DEFAULT_WHITE_THRESHOLD: u8 = 235;

/// Default minimum tissue fraction for a tile to be processed.
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlideError {
    #[error("microns-per-pixel must be positive and finite, got {0}")]
    InvalidMpp(f64),
    #[error("image has zero dimension ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("resampling {width}x{height} by {scale} collapses to an empty image")]
    EmptyOutput { width: u32, height: u32, scale: f64 },
}

/// Physical resolution of an image in microns per pixel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ResolutionSpec(f64);

impl ResolutionSpec {
    pub fn new(mpp: f64) -> Result<Self, SlideError> {
        if mpp.is_finite() && mpp > 0.0 {
            Ok(Self(mpp))
        } else {
            Err(SlideError::InvalidMpp(mpp))
        }
    }

    pub const fn reference() -> Self {
        Self(REFERENCE_MPP)
    }

    pub fn mpp(self) -> f64 {
        self.0
    }

    /// Pixel-count scale factor going from `self` to `target`.
    pub fn scale_to(self, target: ResolutionSpec) -> f64 {
        self.0 / target.0
    }
}

impl Default for ResolutionSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl TryFrom<f64> for ResolutionSpec {
    type Error = SlideError;

    fn try_from(mpp: f64) -> Result<Self, Self::Error> {
        Self::new(mpp)
    }
}

impl From<ResolutionSpec> for f64 {
    fn from(r: ResolutionSpec) -> f64 {
        r.0
    }
}

/// Row-major interleaved 8-bit RGB image tagged with its resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    mpp: ResolutionSpec,
}

impl PatchImage {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        mpp: ResolutionSpec,
    ) -> Result<Self, SlideError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(SlideError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            mpp,
        })
    }

    /// An image filled with a single color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3], mpp: ResolutionSpec) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
            mpp,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn mpp(&self) -> ResolutionSpec {
        self.mpp
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Physical area covered by the patch in square millimetres.
    pub fn physical_area_mm2(&self) -> f64 {
        let um = self.mpp.mpp();
        (self.width as f64 * um) * (self.height as f64 * um) * 1e-6
    }
}

/// Output size for resampling `len` pixels by `scale`, rounded half away from zero.
pub fn resampled_len(len: u32, scale: f64) -> u32 {
    libm::round(len as f64 * scale) as u32
}

/// Bilinearly resample `img` so that it sits at resolution `target`.
///
/// Output dimensions are `round(dim * img.mpp / target.mpp)`. Sample positions
/// map pixel centers onto pixel centers so the physical extent is preserved.
/// When the resolutions are equal the buffer is returned untouched.
pub fn resample_to_reference(
    img: &PatchImage,
    target: ResolutionSpec,
) -> Result<PatchImage, SlideError> {
    if img.width == 0 || img.height == 0 {
        return Err(SlideError::ZeroDimension {
            width: img.width,
            height: img.height,
        });
    }
    if img.mpp == target {
        return Ok(img.clone());
    }
    let scale = img.mpp.scale_to(target);
    let out_w = resampled_len(img.width, scale);
    let out_h = resampled_len(img.height, scale);
    if out_w == 0 || out_h == 0 {
        return Err(SlideError::EmptyOutput {
            width: img.width,
            height: img.height,
            scale,
        });
    }

    let xs = axis_taps(img.width, out_w);
    let ys = axis_taps(img.height, out_h);
    let stride = img.width as usize * 3;
    let src = &img.pixels;
    let mut out = vec![0u8; out_w as usize * out_h as usize * 3];

    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let row0 = &src[y0 * stride..(y0 + 1) * stride];
        let row1 = &src[y1 * stride..(y1 + 1) * stride];
        let dst = &mut out[oy * out_w as usize * 3..(oy + 1) * out_w as usize * 3];
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let a = row0[x0 * 3 + c] as f32;
                let b = row0[x1 * 3 + c] as f32;
                let p = row1[x0 * 3 + c] as f32;
                let q = row1[x1 * 3 + c] as f32;
                let top = a + (b - a) * fx;
                let bottom = p + (q - p) * fx;
                let v = top + (bottom - top) * fy;
                dst[ox * 3 + c] = (v + 0.5).clamp(0.0, 255.0) as u8;
            }
        }
    }

    PatchImage::new(out_w, out_h, out, target)
}

/// Source sample indices and blend weight for every output column (or row).
fn axis_taps(src_len: u32, dst_len: u32) -> Vec<(usize, usize, f32)> {
    let ratio = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let i0 = libm::floor(s) as usize;
            let i1 = (i0 + 1).min(src_len as usize - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Per-pixel tissue flags at a stated downsample of some image extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    width: u32,
    height: u32,
    downsample: u32,
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: u32, height: u32, downsample: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize && downsample >= 1).then_some(Self {
            width,
            height,
            downsample,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn downsample(&self) -> u32 {
        self.downsample
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_tissue(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn tissue_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn tissue_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.tissue_count() as f64 / self.bits.len() as f64
    }

    /// Clear every pixel for which `keep` returns false.
    pub fn retain(&mut self, mut keep: impl FnMut(u32, u32) -> bool) {
        let w = self.width as usize;
        for (i, bit) in self.bits.iter_mut().enumerate() {
            if *bit && !keep((i % w) as u32, (i / w) as u32) {
                *bit = false;
            }
        }
    }
}

/// Flag a pixel as background iff all three channels are at least
/// `white_threshold`. The mask has the patch's own resolution.
pub fn background_mask(img: &PatchImage, white_threshold: u8) -> TissueMask {
    let bits = img
        .pixels
        .chunks_exact(3)
        .map(|px| px[0].min(px[1]).min(px[2]) < white_threshold)
        .collect();
    TissueMask {
        width: img.width,
        height: img.height,
        downsample: 1,
        bits,
    }
}
