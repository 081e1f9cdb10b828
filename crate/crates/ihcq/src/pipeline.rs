//! Slide-level pipelines: per-tile inference and detection fanned out over a
//! worker pool, and synthetic slide generation.

use std::path::{Path, PathBuf};

use ihcq_core::annotations::CellClass;
use ihcq_core::detect::{extract_detections, sort_detections, Detection, PeakParams};
use ihcq_core::inference::{baseline_infer, ProbabilityMap, StainParams};
use ihcq_core::synth::{generate_patch, synthesize_pmap, PmapSynthParams, SynthSpec, SynthTruth};
use ihcq_core::slide::{resampled_len, ResolutionSpec};
use ihcq_core::CellAnnotation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_manifest, Slide, SlideManifest, Tile, TileOptions, TileOutcome, TileRecord};
use crate::{pmap, png, tables};

/// Where per-tile probability maps come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    /// Built-in stain-deconvolution baseline, run inline.
    Deconv(StainParams),
    /// PMAP files written by `infer` or an external model, one per tile.
    Pmaps(PathBuf),
}

/// PMAP header file name for a tile.
pub fn pmap_file_name(gx: u32, gy: u32) -> String {
    format!("tile_{gx}_{gy}.json")
}

impl Backend {
    fn probabilities(&self, tile: &Tile) -> Result<ProbabilityMap> {
        match self {
            Backend::Deconv(params) => Ok(baseline_infer(&tile.image, params)?),
            Backend::Pmaps(dir) => {
                let path = dir.join(pmap_file_name(tile.gx, tile.gy));
                let map = pmap::read_pmap(&path)?;
                if (map.width(), map.height()) != (tile.image.width(), tile.image.height())
                    || map.mpp() != tile.image.mpp()
                {
                    return Err(Error::format(
                        &path,
                        format!(
                            "map is {}x{} @ {} MPP, tile is {}x{} @ {} MPP",
                            map.width(),
                            map.height(),
                            map.mpp().mpp(),
                            tile.image.width(),
                            tile.image.height(),
                            tile.image.mpp().mpp()
                        ),
                    ));
                }
                Ok(map)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideOptions {
    pub tiles: TileOptions,
    pub peak: PeakParams,
    pub workers: usize,
}

impl Default for SlideOptions {
    fn default() -> Self {
        Self {
            tiles: TileOptions::default(),
            peak: PeakParams::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub gx: u32,
    pub gy: u32,
    pub tissue_fraction: f64,
    pub skipped: bool,
    pub n_neg: u64,
    pub n_pos: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideDetections {
    pub slide_id: String,
    /// Global reference-MPP coordinates, sorted by (y, x, class).
    pub detections: Vec<Detection>,
    pub tiles: Vec<TileSummary>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers} worker threads: {e}")))
}

/// Run `f` over every kept tile on `workers` threads. Results come back in
/// row-major tile order; the first failing tile in that order is reported.
fn map_tiles<T, F>(slide: &Slide, opts: &SlideOptions, f: F) -> Result<Vec<(TileSummary, Option<T>)>>
where
    T: Send,
    F: Fn(&Tile) -> Result<T> + Sync,
{
    let records = slide.tiles_row_major();
    let results: Vec<Result<(TileSummary, Option<T>)>> = pool(opts.workers)?.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let wrap = |e: Error| match e {
                    Error::Tile { .. } => e,
                    other => Error::Tile {
                        gx: rec.gx,
                        gy: rec.gy,
                        source: Box::new(other),
                    },
                };
                match slide.load_tile(rec, &opts.tiles)? {
                    TileOutcome::Skipped {
                        gx,
                        gy,
                        tissue_fraction,
                    } => Ok((
                        TileSummary {
                            gx,
                            gy,
                            tissue_fraction,
                            skipped: true,
                            n_neg: 0,
                            n_pos: 0,
                        },
                        None,
                    )),
                    TileOutcome::Kept(tile) => {
                        let out = f(&tile).map_err(wrap)?;
                        Ok((
                            TileSummary {
                                gx: tile.gx,
                                gy: tile.gy,
                                tissue_fraction: tile.tissue_fraction,
                                skipped: false,
                                n_neg: 0,
                                n_pos: 0,
                            },
                            Some(out),
                        ))
                    }
                }
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Detect cells on every tissue tile and merge into slide coordinates.
///
/// Tiles are independent: no cross-tile merging. Detections that fall in
/// regions removed by the exclusion mask are dropped.
pub fn detect_slide(slide: &Slide, backend: &Backend, opts: &SlideOptions) -> Result<SlideDetections> {
    let target = opts.tiles.target;
    let per_tile = map_tiles(slide, opts, |tile| {
        let map = backend.probabilities(tile)?;
        Ok(extract_detections(&map, &opts.peak)
            .into_iter()
            .map(|d| d.translated(tile.x0, tile.y0))
            .filter(|d| slide.keeps(d.x, d.y, target))
            .collect::<Vec<_>>())
    })?;
    let mut detections = Vec::new();
    let mut tiles = Vec::with_capacity(per_tile.len());
    for (mut summary, dets) in per_tile {
        if let Some(dets) = dets {
            summary.n_pos = dets.iter().filter(|d| d.cls == CellClass::TcPos).count() as u64;
            summary.n_neg = dets.len() as u64 - summary.n_pos;
            detections.extend(dets);
        }
        tiles.push(summary);
    }
    sort_detections(&mut detections);
    Ok(SlideDetections {
        slide_id: slide.manifest.slide_id.clone(),
        detections,
        tiles,
    })
}

/// Run the baseline backend on every tissue tile and write one PMAP per
/// tile into `out_dir`. Returns the header paths in row-major order.
pub fn infer_slide(
    slide: &Slide,
    params: &StainParams,
    opts: &SlideOptions,
    out_dir: &Path,
) -> Result<(Vec<TileSummary>, Vec<PathBuf>)> {
    let per_tile = map_tiles(slide, opts, |tile| {
        let map = baseline_infer(&tile.image, params)?;
        let path = out_dir.join(pmap_file_name(tile.gx, tile.gy));
        pmap::write_pmap(&path, &map)?;
        Ok(path)
    })?;
    let mut summaries = Vec::new();
    let mut paths = Vec::new();
    for (s, p) in per_tile {
        summaries.push(s);
        paths.extend(p);
    }
    Ok((summaries, paths))
}

/// A synthetic slide: a grid of generated tiles sharing one tile spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSynthSpec {
    pub slide_id: String,
    pub grid_w: u32,
    pub grid_h: u32,
    /// Row-major tile indices rendered with no cells.
    pub blank_tiles: Vec<u32>,
    /// Tile parameters; `width` must equal `height` (the tile size). Tile
    /// `i` uses seed `tile.seed ^ i`.
    pub tile: SynthSpec,
    /// Also write a synthetic PMAP per tile.
    pub write_pmaps: bool,
    pub pmap: PmapSynthParams,
}

impl Default for SlideSynthSpec {
    fn default() -> Self {
        Self {
            slide_id: "synthetic".into(),
            grid_w: 2,
            grid_h: 2,
            blank_tiles: Vec::new(),
            tile: SynthSpec::default(),
            write_pmaps: false,
            pmap: PmapSynthParams::default(),
        }
    }
}

pub struct GeneratedSlide {
    pub manifest_path: PathBuf,
    /// Global truth in reference-MPP pixels.
    pub truth: SynthTruth,
}

/// Render every tile, write PNGs, `manifest.json`, and `truth.csv` under
/// `out_dir`, plus `pmaps/` when requested.
pub fn generate_slide(spec: &SlideSynthSpec, out_dir: &Path, workers: usize) -> Result<GeneratedSlide> {
    let ts = spec.tile.width;
    if ts != spec.tile.height {
        return Err(Error::Usage("synthetic tiles must be square (tile.width == tile.height)".into()));
    }
    if spec.grid_w == 0 || spec.grid_h == 0 {
        return Err(Error::Usage("synthetic grid must be at least 1x1".into()));
    }
    let mpp = ResolutionSpec::new(spec.tile.mpp)?;
    let reference = ResolutionSpec::reference();
    let step = resampled_len(ts, mpp.scale_to(reference));
    let local_scale = step as f64 / ts as f64;
    let n_tiles = spec.grid_w * spec.grid_h;

    let tiles: Vec<Result<(TileRecord, SynthTruth)>> = pool(workers)?.install(|| {
        (0..n_tiles)
            .into_par_iter()
            .map(|index| {
                let (gx, gy) = (index % spec.grid_w, index / spec.grid_w);
                let mut tile_spec = spec.tile.for_tile(index as u64);
                if spec.blank_tiles.contains(&index) {
                    tile_spec.n_cells = 0;
                }
                let (img, truth) = generate_patch(&tile_spec)?;
                let name = format!("tiles/tile_{gx}_{gy}.png");
                png::write_rgb(&out_dir.join(&name), &img)?;
                if spec.write_pmaps {
                    let p = PmapSynthParams {
                        seed: spec.pmap.seed ^ index as u64,
                        ..spec.pmap
                    };
                    let map = synthesize_pmap(&truth, ts, ts, mpp, &p);
                    pmap::write_pmap(&out_dir.join("pmaps").join(pmap_file_name(gx, gy)), &map)?;
                }
                Ok((TileRecord { path: name, gx, gy }, truth))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut truth = SynthTruth::empty();
    for r in tiles {
        let (rec, t) = r?;
        let local: Vec<CellAnnotation> = t
            .annotations
            .iter()
            .map(|a| {
                let map = |v: u32| (((v as f64 + 0.5) * local_scale - 0.5).round().max(0.0)) as u32;
                CellAnnotation::new(map(a.x), map(a.y), a.cls)
            })
            .collect();
        truth.extend_translated(&SynthTruth::new(local), rec.gx * step, rec.gy * step);
        records.push(rec);
    }

    let manifest = SlideManifest {
        slide_id: spec.slide_id.clone(),
        source_mpp: spec.tile.mpp,
        tile_size: ts,
        tiles: records,
        exclusion_mask: None,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;
    tables::write_annotations(&out_dir.join("truth.csv"), &truth.annotations)?;
    Ok(GeneratedSlide {
        manifest_path,
        truth,
    })
}
