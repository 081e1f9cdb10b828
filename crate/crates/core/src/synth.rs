//! Synthetic patches and probability maps with exact ground truth.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{CellAnnotation, CellClass};
use crate::inference::ProbabilityMap;
use crate::slide::{PatchImage, ResolutionSpec, REFERENCE_MPP, REFERENCE_TILE};

/// Placement attempts allowed per cell before giving up.
pub const MAX_ATTEMPTS_PER_CELL: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place cell {placed} of {requested} after {attempts} attempts")]
    Infeasible {
        placed: u32,
        requested: u32,
        attempts: u32,
    },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub n_cells: u32,
    pub pos_fraction: f64,
    /// Inclusive `[min, max]` cell radius in pixels.
    pub cell_radius_range: [u32; 2],
    /// Minimum center-to-center distance in pixels.
    pub min_spacing: f64,
    pub noise_sigma: f64,
    pub pos_color: [u8; 3],
    pub neg_color: [u8; 3],
    pub background: [u8; 3],
    /// Tissue bed painted under the cells of a non-empty patch; `None`
    /// leaves the plain background.
    pub tissue: Option<[u8; 3]>,
    pub mpp: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: REFERENCE_TILE,
            height: REFERENCE_TILE,
            n_cells: 100,
            pos_fraction: 0.5,
            cell_radius_range: [5, 6],
            min_spacing: 20.0,
            noise_sigma: 0.0,
            pos_color: [120, 75, 35],
            neg_color: [70, 60, 140],
            background: [245, 242, 240],
            tissue: Some([242, 234, 238]),
            mpp: REFERENCE_MPP,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let [rmin, rmax] = self.cell_radius_range;
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidSpec("width and height must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(SynthError::InvalidSpec("pos_fraction must lie in [0, 1]"));
        }
        if rmin == 0 || rmin > rmax {
            return Err(SynthError::InvalidSpec(
                "cell_radius_range must satisfy 1 <= min <= max",
            ));
        }
        if !(self.min_spacing.is_finite() && self.min_spacing >= 0.0) {
            return Err(SynthError::InvalidSpec("min_spacing must be non-negative"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidSpec("noise_sigma must be non-negative"));
        }
        if ResolutionSpec::new(self.mpp).is_err() {
            return Err(SynthError::InvalidSpec("mpp must be positive"));
        }
        Ok(())
    }

    /// Planted TC+ count: `round(pos_fraction * n_cells)`.
    pub fn n_pos(&self) -> u32 {
        libm::round(self.pos_fraction * self.n_cells as f64) as u32
    }

    /// Spec for tile `index` of a slide: same parameters, seed `seed ^ index`.
    pub fn for_tile(&self, index: u64) -> Self {
        Self {
            seed: self.seed ^ index,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub annotations: Vec<CellAnnotation>,
    /// `None` when no cells were planted.
    pub true_tps: Option<f64>,
}

impl SynthTruth {
    pub fn new(annotations: Vec<CellAnnotation>) -> Self {
        let n = annotations.len();
        let pos = annotations
            .iter()
            .filter(|a| a.cls == CellClass::TcPos)
            .count();
        let true_tps = (n > 0).then(|| 100.0 * pos as f64 / n as f64);
        Self {
            annotations,
            true_tps,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Shift into slide coordinates and append.
    pub fn extend_translated(&mut self, other: &SynthTruth, dx: u32, dy: u32) {
        self.annotations.extend(
            other
                .annotations
                .iter()
                .map(|a| CellAnnotation::new(a.x + dx, a.y + dy, a.cls)),
        );
        *self = Self::new(core::mem::take(&mut self.annotations));
    }
}

struct Cell {
    x: u32,
    y: u32,
    radius: u32,
}

fn place_cells(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Cell>, SynthError> {
    let [rmin, rmax] = spec.cell_radius_range;
    // keep whole disks inside the patch
    let margin = rmax + 1;
    if spec.n_cells > 0 && (spec.width <= 2 * margin || spec.height <= 2 * margin) {
        return Err(SynthError::Infeasible {
            placed: 0,
            requested: spec.n_cells,
            attempts: 0,
        });
    }
    let spacing2 = spec.min_spacing * spec.min_spacing;
    let cell_size = spec.min_spacing.max(1.0);
    let gw = (spec.width as f64 / cell_size) as usize + 1;
    let gh = (spec.height as f64 / cell_size) as usize + 1;
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    let mut cells: Vec<Cell> = Vec::with_capacity(spec.n_cells as usize);

    for placed in 0..spec.n_cells {
        let mut ok = false;
        for _ in 0..MAX_ATTEMPTS_PER_CELL {
            let x = rng.random_range(margin..spec.width - margin);
            let y = rng.random_range(margin..spec.height - margin);
            let gx = (x as f64 / cell_size) as usize;
            let gy = (y as f64 / cell_size) as usize;
            let clear = (gy.saturating_sub(1)..=(gy + 1).min(gh - 1)).all(|cy| {
                (gx.saturating_sub(1)..=(gx + 1).min(gw - 1)).all(|cx| {
                    grid[cy * gw + cx].iter().all(|&i| {
                        let dx = cells[i].x as f64 - x as f64;
                        let dy = cells[i].y as f64 - y as f64;
                        dx * dx + dy * dy >= spacing2
                    })
                })
            });
            if clear {
                let radius = rng.random_range(rmin..=rmax);
                grid[gy * gw + gx].push(cells.len());
                cells.push(Cell { x, y, radius });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SynthError::Infeasible {
                placed,
                requested: spec.n_cells,
                attempts: MAX_ATTEMPTS_PER_CELL,
            });
        }
    }
    Ok(cells)
}

/// Render a patch of soft-edged stained nuclei over background.
///
/// Cells are placed by rejection sampling (centers at least `min_spacing`
/// apart, disks fully inside the patch); the first `n_pos` placed are TC+.
/// Each nucleus blends its class color over the bed with weight
/// `1 - (d / (r + 1))^2` at distance `d <= r` from the center. Gaussian noise
/// of `noise_sigma` is then added per channel and clamped to 0..=255.
pub fn generate_patch(spec: &SynthSpec) -> Result<(PatchImage, SynthTruth), SynthError> {
    spec.validate()?;
    let mpp = ResolutionSpec::new(spec.mpp).map_err(|_| SynthError::InvalidSpec("mpp"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = place_cells(spec, &mut rng)?;

    let bed = match spec.tissue {
        Some(t) if !cells.is_empty() => t,
        _ => spec.background,
    };
    let mut img = PatchImage::filled(spec.width, spec.height, bed, mpp);
    let n_pos = spec.n_pos() as usize;
    let w = spec.width as usize;
    let mut annotations = Vec::with_capacity(cells.len());

    for (i, c) in cells.iter().enumerate() {
        let cls = if i < n_pos {
            CellClass::TcPos
        } else {
            CellClass::TcNeg
        };
        let color = match cls {
            CellClass::TcPos => spec.pos_color,
            CellClass::TcNeg => spec.neg_color,
        };
        annotations.push(CellAnnotation::new(c.x, c.y, cls));
        let r = c.radius as i64;
        let r2 = r * r;
        let scale = ((r + 1) * (r + 1)) as f64;
        let pixels = img.pixels_mut();
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = dx * dx + dy * dy;
                if d2 > r2 {
                    continue;
                }
                let a = 1.0 - d2 as f64 / scale;
                let px = (c.x as i64 + dx) as usize;
                let py = (c.y as i64 + dy) as usize;
                let o = (py * w + px) * 3;
                for ch in 0..3 {
                    let v = bed[ch] as f64 * (1.0 - a) + color[ch] as f64 * a;
                    pixels[o + ch] = libm::round(v) as u8;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|_| SynthError::InvalidSpec("noise_sigma"))?;
        for p in img.pixels_mut() {
            let v = *p as f64 + normal.sample(&mut rng);
            *p = libm::round(v).clamp(0.0, 255.0) as u8;
        }
    }

    Ok((img, SynthTruth::new(annotations)))
}

/// Shape and noise of synthetic probability maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmapSynthParams {
    /// Gaussian bump standard deviation in pixels.
    pub sigma: f64,
    /// Class probability at a cell center.
    pub peak: f64,
    /// Standard deviation of per-channel logit noise; 0 disables it.
    pub logit_noise: f64,
    pub seed: u64,
}

impl Default for PmapSynthParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            peak: 0.95,
            logit_noise: 0.0,
            seed: 0,
        }
    }
}

/// Probability map with a Gaussian bump per truth cell in its class channel
/// and the residual in background.
///
/// With logit noise every channel is multiplied by `exp(eps)`, `eps ~
/// N(0, logit_noise)` (probabilities floored at 1e-6 first) and the pixel is
/// renormalized.
pub fn synthesize_pmap(
    truth: &SynthTruth,
    width: u32,
    height: u32,
    mpp: ResolutionSpec,
    params: &PmapSynthParams,
) -> ProbabilityMap {
    let (w, h) = (width as usize, height as usize);
    let n = w * h;
    let mut data = vec![0.0f32; n * 3];
    let sigma = params.sigma.max(1e-6);
    let reach = libm::ceil(4.0 * sigma) as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let peak = params.peak.clamp(0.0, 1.0);

    for a in &truth.annotations {
        let base = match a.cls {
            CellClass::TcNeg => n,
            CellClass::TcPos => 2 * n,
        };
        let y0 = (a.y as i64 - reach).max(0);
        let y1 = (a.y as i64 + reach).min(h as i64 - 1);
        let x0 = (a.x as i64 - reach).max(0);
        let x1 = (a.x as i64 + reach).min(w as i64 - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = (px - a.x as i64) as f64;
                let dy = (py - a.y as i64) as f64;
                let v = (peak * libm::exp(-(dx * dx + dy * dy) * inv)) as f32;
                let slot = &mut data[base + py as usize * w + px as usize];
                *slot = slot.max(v);
            }
        }
    }

    for i in 0..n {
        let fg = data[n + i] + data[2 * n + i];
        if fg > 1.0 {
            data[n + i] /= fg;
            data[2 * n + i] /= fg;
        }
        data[i] = (1.0 - data[n + i] - data[2 * n + i]).max(0.0);
    }

    if params.logit_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let s = params.logit_noise;
        for i in 0..n {
            let mut v = [0.0f64; 3];
            for (c, slot) in v.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *slot = (data[c * n + i] as f64).max(1e-6) * libm::exp(s * eps);
            }
            let sum = v[0] + v[1] + v[2];
            for c in 0..3 {
                data[c * n + i] = (v[c] / sum) as f32;
            }
        }
    }

    let mut map = ProbabilityMap::new_unchecked(width, height, mpp, data)
        .expect("buffer sized for width x height x 3");
    map.renormalize();
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{extract_detections, PeakParams};
    use crate::inference::{baseline_infer, StainParams, NORMALIZATION_TOLERANCE};
    use crate::metrics::{f1_from_counts, greedy_match};
    use crate::quantify::compute_tps;

    fn small(seed: u64, n: u32) -> SynthSpec {
        SynthSpec {
            seed,
            width: 256,
            height: 256,
            n_cells: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_cells_is_uniform_background() {
        let spec = small(3, 0);
        let (img, truth) = generate_patch(&spec).unwrap();
        assert!(img.pixels().chunks(3).all(|p| p == spec.background));
        assert!(truth.annotations.is_empty());
        assert_eq!(truth.true_tps, None);
    }

    #[test]
    fn quarter_positive_is_exactly_25() {
        let spec = SynthSpec {
            n_cells: 100,
            pos_fraction: 0.25,
            ..SynthSpec::default()
        };
        let (_, truth) = generate_patch(&spec).unwrap();
        assert_eq!(truth.annotations.len(), 100);
        assert_eq!(truth.true_tps, Some(25.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            noise_sigma: 8.0,
            ..small(11, 40)
        };
        let a = generate_patch(&spec).unwrap();
        let b = generate_patch(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_patch(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn spacing_and_bounds_hold() {
        let spec = small(5, 60);
        let (_, truth) = generate_patch(&spec).unwrap();
        let pts = &truth.annotations;
        for (i, a) in pts.iter().enumerate() {
            assert!(a.x > 6 && a.x < 256 - 7 && a.y > 6 && a.y < 256 - 7);
            for b in &pts[i + 1..] {
                let dx = a.x as f64 - b.x as f64;
                let dy = a.y as f64 - b.y as f64;
                assert!(dx * dx + dy * dy >= 400.0);
            }
        }
    }

    #[test]
    fn overpacked_spec_is_infeasible() {
        let spec = SynthSpec {
            min_spacing: 100.0,
            ..small(1, 50)
        };
        assert!(matches!(
            generate_patch(&spec),
            Err(SynthError::Infeasible { .. })
        ));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SynthSpec {
                pos_fraction: 1.5,
                ..small(0, 1)
            },
            SynthSpec {
                cell_radius_range: [6, 5],
                ..small(0, 1)
            },
            SynthSpec {
                mpp: 0.0,
                ..small(0, 1)
            },
        ] {
            assert!(matches!(
                generate_patch(&spec),
                Err(SynthError::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn tile_seeds_are_xored() {
        let spec = SynthSpec {
            seed: 0b1010,
            ..SynthSpec::default()
        };
        assert_eq!(spec.for_tile(0b0110).seed, 0b1100);
    }

    #[test]
    fn clean_patch_round_trips_through_baseline() {
        let spec = SynthSpec {
            pos_fraction: 0.3,
            ..small(21, 50)
        };
        let (img, truth) = generate_patch(&spec).unwrap();
        let map = baseline_infer(&img, &StainParams::default()).unwrap();
        let dets = extract_detections(&map, &PeakParams::default());
        let counts = greedy_match(&dets, &truth.annotations, 25.0).unwrap();
        let report = f1_from_counts(&counts);
        assert_eq!(report.mf1, 1.0, "{counts:?}");
        let tps = compute_tps("s", &dets).unwrap().tps;
        assert_eq!(Some(tps), truth.true_tps);
        for d in &dets {
            let near = truth.annotations.iter().any(|a| {
                a.cls == d.cls && a.x.abs_diff(d.x) <= 2 && a.y.abs_diff(d.y) <= 2
            });
            assert!(near, "{d:?}");
        }
    }

    #[test]
    fn planted_pmap_recovers_twenty_disks() {
        let mut annotations = Vec::new();
        for i in 0..20u32 {
            let cls = if i % 2 == 0 {
                CellClass::TcNeg
            } else {
                CellClass::TcPos
            };
            annotations.push(CellAnnotation::new(20 + (i % 5) * 25, 20 + (i / 5) * 25, cls));
        }
        let truth = SynthTruth::new(annotations.clone());
        let map = synthesize_pmap(
            &truth,
            160,
            120,
            ResolutionSpec::reference(),
            &PmapSynthParams::default(),
        );
        let mut dets = extract_detections(&map, &PeakParams::default());
        assert_eq!(dets.len(), 20);
        dets.sort_by_key(|d| (d.y, d.x));
        annotations.sort_by_key(|a| (a.y, a.x));
        for (d, a) in dets.iter().zip(&annotations) {
            assert_eq!((d.x, d.y, d.cls), (a.x, a.y, a.cls));
        }
    }

    #[test]
    fn single_pos_cell_pmap() {
        let truth = SynthTruth::new(vec![CellAnnotation::new(31, 17, CellClass::TcPos)]);
        let map = synthesize_pmap(
            &truth,
            64,
            64,
            ResolutionSpec::reference(),
            &PmapSynthParams::default(),
        );
        map.validate(NORMALIZATION_TOLERANCE).unwrap();
        let dets = extract_detections(&map, &PeakParams::default());
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].x, dets[0].y, dets[0].cls), (31, 17, CellClass::TcPos));
        assert!((dets[0].confidence - 0.95).abs() < 1e-6);
    }

    #[test]
    fn empty_truth_pmap_is_background() {
        let map = synthesize_pmap(
            &SynthTruth::empty(),
            8,
            8,
            ResolutionSpec::reference(),
            &PmapSynthParams::default(),
        );
        assert_eq!(
            map,
            ProbabilityMap::background(8, 8, ResolutionSpec::reference())
        );
    }

    #[test]
    fn noisy_pmap_is_normalized_and_seeded() {
        let truth = SynthTruth::new(vec![CellAnnotation::new(10, 10, CellClass::TcNeg)]);
        let p = PmapSynthParams {
            logit_noise: 0.3,
            seed: 9,
            ..PmapSynthParams::default()
        };
        let a = synthesize_pmap(&truth, 32, 32, ResolutionSpec::reference(), &p);
        let b = synthesize_pmap(&truth, 32, 32, ResolutionSpec::reference(), &p);
        a.validate(NORMALIZATION_TOLERANCE).unwrap();
        assert_eq!(a, b);
        let c = synthesize_pmap(
            &truth,
            32,
            32,
            ResolutionSpec::reference(),
            &PmapSynthParams { seed: 10, ..p },
        );
        assert_ne!(a, c);
    }

    #[test]
    fn translated_union_recomputes_tps() {
        let mut all = SynthTruth::empty();
        let a = SynthTruth::new(vec![CellAnnotation::new(1, 2, CellClass::TcPos)]);
        let b = SynthTruth::new(vec![
            CellAnnotation::new(3, 4, CellClass::TcNeg),
            CellAnnotation::new(5, 6, CellClass::TcNeg),
        ]);
        all.extend_translated(&a, 0, 0);
        all.extend_translated(&b, 100, 200);
        assert_eq!(all.annotations[2], CellAnnotation::new(105, 206, CellClass::TcNeg));
        assert!((all.true_tps.unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }
}
