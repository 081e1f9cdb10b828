//! Slide manifests over PNG tile grids, and tile iteration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ihcq_core::slide::{
    background_mask, resample_to_reference, resampled_len, PatchImage, ResolutionSpec,
    DEFAULT_MIN_TISSUE_FRACTION, DEFAULT_WHITE_THRESHOLD,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{fsutil, png};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub gx: u32,
    pub gy: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionMaskRef {
    /// Grayscale PNG, 0 = excluded.
    pub path: String,
    /// Slide pixels per mask pixel, in source resolution.
    pub downsample: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    pub source_mpp: f64,
    pub tile_size: u32,
    pub tiles: Vec<TileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_mask: Option<ExclusionMaskRef>,
}

/// Source-resolution exclusion flags (true = usable).
#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionMask {
    width: u32,
    height: u32,
    downsample: u32,
    keep: Vec<bool>,
}

impl ExclusionMask {
    /// Whether the source-resolution slide pixel `(sx, sy)` may be used.
    pub fn keeps(&self, sx: f64, sy: f64) -> bool {
        let mx = (sx / self.downsample as f64).floor();
        let my = (sy / self.downsample as f64).floor();
        if mx < 0.0 || my < 0.0 || mx >= self.width as f64 || my >= self.height as f64 {
            return true;
        }
        self.keep[my as usize * self.width as usize + mx as usize]
    }
}

/// A manifest together with the directory its paths resolve against.
#[derive(Debug, Clone)]
pub struct Slide {
    pub manifest: SlideManifest,
    pub path: PathBuf,
    pub base_dir: PathBuf,
    pub source_mpp: ResolutionSpec,
    pub exclusion: Option<ExclusionMask>,
}

/// Tile selection and resampling options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileOptions {
    pub target: ResolutionSpec,
    pub min_tissue_fraction: f64,
    pub white_threshold: u8,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            target: ResolutionSpec::reference(),
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
        }
    }
}

/// One resampled tile at reference resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub gx: u32,
    pub gy: u32,
    /// Top-left corner in global target-resolution pixels.
    pub x0: u32,
    pub y0: u32,
    pub image: PatchImage,
    pub tissue_fraction: f64,
}

/// A tile either kept for processing or skipped for lack of tissue.
#[derive(Debug, Clone, PartialEq)]
pub enum TileOutcome {
    Kept(Tile),
    Skipped { gx: u32, gy: u32, tissue_fraction: f64 },
}

impl Slide {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let manifest: SlideManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base_dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_manifest(manifest, path, &base_dir)
    }

    pub fn from_manifest(manifest: SlideManifest, path: &Path, base_dir: &Path) -> Result<Self> {
        let invalid = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let source_mpp =
            ResolutionSpec::new(manifest.source_mpp).map_err(|e| invalid(e.to_string()))?;
        if manifest.tile_size == 0 {
            return Err(invalid("tile_size must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &manifest.tiles {
            if !seen.insert((t.gx, t.gy)) {
                return Err(invalid(format!("duplicate tile at gx={}, gy={}", t.gx, t.gy)));
            }
            let p = resolve(base_dir, &t.path);
            if !p.is_file() {
                return Err(invalid(format!(
                    "tile (gx={}, gy={}) file {} does not exist",
                    t.gx,
                    t.gy,
                    p.display()
                )));
            }
        }
        let mut slide = Self {
            manifest,
            path: path.to_path_buf(),
            base_dir: base_dir.to_path_buf(),
            source_mpp,
            exclusion: None,
        };
        if let Some(m) = slide.manifest.exclusion_mask.clone() {
            slide.exclusion = Some(slide.load_exclusion(&m).map_err(|e| match e {
                Error::Manifest { .. } => e,
                other => invalid(other.to_string()),
            })?);
        }
        Ok(slide)
    }

    fn load_exclusion(&self, m: &ExclusionMaskRef) -> Result<ExclusionMask> {
        let invalid = |message: String| Error::Manifest {
            path: self.path.clone(),
            message,
        };
        if m.downsample == 0 {
            return Err(invalid("exclusion_mask.downsample must be positive".into()));
        }
        let (w, h, values) = png::read_gray(&resolve(&self.base_dir, &m.path))?;
        let (sw, sh) = self.source_extent();
        let (ew, eh) = (sw.div_ceil(m.downsample), sh.div_ceil(m.downsample));
        if (w, h) != (ew, eh) {
            return Err(invalid(format!(
                "exclusion mask is {w}x{h}, expected {ew}x{eh} for a {sw}x{sh} slide at downsample {}",
                m.downsample
            )));
        }
        Ok(ExclusionMask {
            width: w,
            height: h,
            downsample: m.downsample,
            keep: values.into_iter().map(|v| v != 0).collect(),
        })
    }

    /// Grid extent in source pixels.
    pub fn source_extent(&self) -> (u32, u32) {
        let gw = self.manifest.tiles.iter().map(|t| t.gx + 1).max().unwrap_or(0);
        let gh = self.manifest.tiles.iter().map(|t| t.gy + 1).max().unwrap_or(0);
        (gw * self.manifest.tile_size, gh * self.manifest.tile_size)
    }

    /// Edge length of a tile after resampling to `target`.
    pub fn target_tile_size(&self, target: ResolutionSpec) -> u32 {
        resampled_len(self.manifest.tile_size, self.source_mpp.scale_to(target))
    }

    /// Tile records in row-major grid order.
    pub fn tiles_row_major(&self) -> Vec<&TileRecord> {
        let mut v: Vec<&TileRecord> = self.manifest.tiles.iter().collect();
        v.sort_by_key(|t| (t.gy, t.gx));
        v
    }

    pub fn tile_path(&self, rec: &TileRecord) -> PathBuf {
        resolve(&self.base_dir, &rec.path)
    }

    /// Whether global target-resolution pixel `(x, y)` survives the
    /// exclusion mask.
    pub fn keeps(&self, x: u32, y: u32, target: ResolutionSpec) -> bool {
        match &self.exclusion {
            None => true,
            Some(m) => {
                let s = target.mpp() / self.source_mpp.mpp();
                m.keeps((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
            }
        }
    }

    /// Decode, check, resample and mask one tile.
    pub fn load_tile(&self, rec: &TileRecord, opts: &TileOptions) -> Result<TileOutcome> {
        let wrap = |e: Error| Error::Tile {
            gx: rec.gx,
            gy: rec.gy,
            source: Box::new(e),
        };
        let path = self.tile_path(rec);
        let img = png::read_rgb(&path, self.source_mpp).map_err(wrap)?;
        let ts = self.manifest.tile_size;
        if img.width() != ts || img.height() != ts {
            return Err(wrap(Error::format(
                &path,
                format!("tile is {}x{}, manifest tile_size is {ts}", img.width(), img.height()),
            )));
        }
        let image = resample_to_reference(&img, opts.target)
            .map_err(|e| wrap(e.into()))?;
        let step = self.target_tile_size(opts.target);
        let (x0, y0) = (rec.gx * step, rec.gy * step);
        let mut mask = background_mask(&image, opts.white_threshold);
        if self.exclusion.is_some() {
            mask.retain(|x, y| self.keeps(x0 + x, y0 + y, opts.target));
        }
        let tissue_fraction = mask.tissue_fraction();
        if tissue_fraction < opts.min_tissue_fraction {
            return Ok(TileOutcome::Skipped {
                gx: rec.gx,
                gy: rec.gy,
                tissue_fraction,
            });
        }
        Ok(TileOutcome::Kept(Tile {
            gx: rec.gx,
            gy: rec.gy,
            x0,
            y0,
            image,
            tissue_fraction,
        }))
    }

    /// Kept tiles in row-major order. The first unreadable tile ends the
    /// stream with its error.
    pub fn iter_tiles<'a>(
        &'a self,
        opts: &'a TileOptions,
    ) -> impl Iterator<Item = Result<Tile>> + 'a {
        self.tiles_row_major()
            .into_iter()
            .map(move |rec| self.load_tile(rec, opts))
            .filter_map(|r| match r {
                Ok(TileOutcome::Kept(t)) => Some(Ok(t)),
                Ok(TileOutcome::Skipped { .. }) => None,
                Err(e) => Some(Err(e)),
            })
            .scan(false, |failed, r| {
                if *failed {
                    return None;
                }
                *failed = r.is_err();
                Some(r)
            })
    }

    /// Every file the slide reads: manifest, tiles, exclusion mask.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.path.clone()];
        v.extend(self.tiles_row_major().into_iter().map(|t| self.tile_path(t)));
        if let Some(m) = &self.manifest.exclusion_mask {
            v.push(resolve(&self.base_dir, &m.path));
        }
        v
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn write_manifest(path: &Path, manifest: &SlideManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}
