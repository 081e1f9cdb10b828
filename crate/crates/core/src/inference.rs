//! Probability maps, the inference backend contract and the built-in
//! H-DAB stain-deconvolution backend.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::CellClass;
use crate::slide::{PatchImage, ResolutionSpec};

/// Tolerance on the per-pixel channel sum of a probability map.
pub const NORMALIZATION_TOLERANCE: f32 = 1e-3;

/// Output channel order; matches the label-map codes 0, 1, 2.
pub const CLASS_NAMES: [&str; 3] = ["BG", "TC_NEG", "TC_POS"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    Background = 0,
    TcNeg = 1,
    TcPos = 2,
}

impl From<CellClass> for Channel {
    fn from(c: CellClass) -> Self {
        match c {
            CellClass::TcNeg => Channel::TcNeg,
            CellClass::TcPos => Channel::TcPos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("plane data holds {actual} values, expected {expected} for {width}x{height}x3")]
    Size {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("pixel {pixel} (x={x}, y={y}) has channel {channel} value {value} outside [0, 1]")]
    OutOfRange {
        pixel: usize,
        x: u32,
        y: u32,
        channel: usize,
        value: f32,
    },
    #[error("pixel {pixel} (x={x}, y={y}) channels sum to {sum}, not 1")]
    Normalization { pixel: usize, x: u32, y: u32, sum: f32 },
    #[error("stain vectors are degenerate (zero or collinear)")]
    DegenerateStains,
    #[error("replicate set is empty")]
    EmptyReplicates,
    #[error("replicate {index} is {width}x{height} @ {mpp} MPP, expected {expected_width}x{expected_height} @ {expected_mpp} MPP")]
    ReplicateMismatch {
        index: usize,
        width: u32,
        height: u32,
        mpp: f64,
        expected_width: u32,
        expected_height: u32,
        expected_mpp: f64,
    },
    #[error("backend failure: {0}")]
    Backend(alloc::string::String),
}

/// Per-pixel (background, TC-, TC+) probabilities stored as three planar
/// row-major `f32` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: u32,
    height: u32,
    mpp: ResolutionSpec,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// Wrap planar data and check the value range and normalization.
    pub fn new(
        width: u32,
        height: u32,
        mpp: ResolutionSpec,
        data: Vec<f32>,
    ) -> Result<Self, InferenceError> {
        let map = Self::new_unchecked(width, height, mpp, data)?;
        map.validate(NORMALIZATION_TOLERANCE)?;
        Ok(map)
    }

    /// Wrap planar data checking only its length.
    pub fn new_unchecked(
        width: u32,
        height: u32,
        mpp: ResolutionSpec,
        data: Vec<f32>,
    ) -> Result<Self, InferenceError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(InferenceError::Size {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            mpp,
            data,
        })
    }

    /// Map where every pixel is certain background.
    pub fn background(width: u32, height: u32, mpp: ResolutionSpec) -> Self {
        let n = width as usize * height as usize;
        let mut data = vec![0.0f32; n * 3];
        data[..n].fill(1.0);
        Self {
            width,
            height,
            mpp,
            data,
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

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// All three planes back to back.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: Channel) -> &[f32] {
        let n = self.pixel_count();
        let c = channel as usize;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: Channel) -> &mut [f32] {
        let n = self.pixel_count();
        let c = channel as usize;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let n = self.pixel_count();
        let i = y as usize * self.width as usize + x as usize;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Summed TC- and TC+ probability per pixel.
    pub fn foreground(&self) -> Vec<f32> {
        self.plane(Channel::TcNeg)
            .iter()
            .zip(self.plane(Channel::TcPos))
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Check every value is in [0, 1] and every pixel sums to 1 within `tol`.
    /// The first offending pixel (row-major) is reported.
    pub fn validate(&self, tol: f32) -> Result<(), InferenceError> {
        let n = self.pixel_count();
        let w = self.width as usize;
        for i in 0..n {
            let v = [self.data[i], self.data[n + i], self.data[2 * n + i]];
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            if let Some(channel) = v.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(InferenceError::OutOfRange {
                    pixel: i,
                    x,
                    y,
                    channel,
                    value: v[channel],
                });
            }
            let sum = v[0] + v[1] + v[2];
            if (sum - 1.0).abs() > tol {
                return Err(InferenceError::Normalization { pixel: i, x, y, sum });
            }
        }
        Ok(())
    }

    /// Divide each pixel by its channel sum. Pixels summing to zero become
    /// certain background.
    pub fn renormalize(&mut self) {
        let n = self.pixel_count();
        for i in 0..n {
            let sum = self.data[i] + self.data[n + i] + self.data[2 * n + i];
            if sum > 0.0 {
                for c in 0..3 {
                    self.data[c * n + i] /= sum;
                }
            } else {
                self.data[i] = 1.0;
                self.data[n + i] = 0.0;
                self.data[2 * n + i] = 0.0;
            }
        }
    }
}

/// Repeated stochastic inferences of the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSet {
    replicates: Vec<ProbabilityMap>,
}

impl ReplicateSet {
    pub fn new(replicates: Vec<ProbabilityMap>) -> Result<Self, InferenceError> {
        let first = replicates.first().ok_or(InferenceError::EmptyReplicates)?;
        let (w, h, mpp) = (first.width, first.height, first.mpp);
        for (index, r) in replicates.iter().enumerate() {
            if r.width != w || r.height != h || r.mpp != mpp {
                return Err(InferenceError::ReplicateMismatch {
                    index,
                    width: r.width,
                    height: r.height,
                    mpp: r.mpp.mpp(),
                    expected_width: w,
                    expected_height: h,
                    expected_mpp: mpp.mpp(),
                });
            }
        }
        Ok(Self { replicates })
    }

    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    pub fn replicates(&self) -> &[ProbabilityMap] {
        &self.replicates
    }
}

/// Per-pixel arithmetic mean of the replicates, renormalized per pixel.
pub fn mean_replicate(set: &ReplicateSet) -> ProbabilityMap {
    let first = &set.replicates[0];
    let r = set.replicates.len() as f64;
    let len = first.data.len();
    let mut acc = vec![0.0f64; len];
    for rep in &set.replicates {
        for (a, &v) in acc.iter_mut().zip(&rep.data) {
            *a += v as f64;
        }
    }
    let data = acc.into_iter().map(|a| (a / r) as f32).collect();
    let mut out = ProbabilityMap {
        width: first.width,
        height: first.height,
        mpp: first.mpp,
        data,
    };
    out.renormalize();
    out
}

/// Anything able to turn a reference-resolution patch into a probability map.
pub trait InferenceBackend: Send + Sync {
    fn infer(&self, patch: &PatchImage) -> Result<ProbabilityMap, InferenceError>;
}

/// Stain basis and thresholds of the deconvolution baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainParams {
    /// Hematoxylin optical-density direction (normalized on use).
    pub hematoxylin: [f64; 3],
    /// DAB optical-density direction (normalized on use).
    pub dab: [f64; 3],
    /// DAB concentration at which positivity is 0.5.
    pub dab_threshold: f64,
    /// Total stain concentration at which nuclear evidence is 0.5.
    pub nuclear_threshold: f64,
    /// Logistic width shared by both decisions.
    pub softness: f64,
}

impl Default for StainParams {
    fn default() -> Self {
        // Ruifrok & Johnston H-DAB vectors
        Self {
            hematoxylin: [0.650, 0.704, 0.286],
            dab: [0.269, 0.568, 0.778],
            dab_threshold: 0.30,
            nuclear_threshold: 0.15,
            softness: 0.05,
        }
    }
}

/// Least-squares unmixing of optical density onto a two-stain basis.
#[derive(Debug, Clone, Copy)]
pub struct StainBasis {
    hematoxylin: [f64; 3],
    dab: [f64; 3],
    // rows of (M^T M)^-1 M^T
    unmix: [[f64; 3]; 2],
}

fn normalized(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    (n.is_finite() && n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl StainBasis {
    pub fn new(hematoxylin: [f64; 3], dab: [f64; 3]) -> Result<Self, InferenceError> {
        let h = normalized(hematoxylin).ok_or(InferenceError::DegenerateStains)?;
        let d = normalized(dab).ok_or(InferenceError::DegenerateStains)?;
        let (hh, hd, dd) = (dot(h, h), dot(h, d), dot(d, d));
        let det = hh * dd - hd * hd;
        if det < 1e-9 {
            return Err(InferenceError::DegenerateStains);
        }
        let mut unmix = [[0.0; 3]; 2];
        for c in 0..3 {
            unmix[0][c] = (dd * h[c] - hd * d[c]) / det;
            unmix[1][c] = (hh * d[c] - hd * h[c]) / det;
        }
        Ok(Self {
            hematoxylin: h,
            dab: d,
            unmix,
        })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.hematoxylin
    }

    pub fn dab(&self) -> [f64; 3] {
        self.dab
    }

    /// Non-negative (hematoxylin, DAB) concentrations of one optical-density vector.
    pub fn unmix(&self, od: [f64; 3]) -> (f64, f64) {
        let h = dot(self.unmix[0], od).max(0.0);
        let d = dot(self.unmix[1], od).max(0.0);
        (h, d)
    }

    /// Optical-density vector of the given stain concentrations.
    pub fn synthesize_od(&self, hematoxylin: f64, dab: f64) -> [f64; 3] {
        core::array::from_fn(|c| hematoxylin * self.hematoxylin[c] + dab * self.dab[c])
    }

    /// RGB produced by the given stain concentrations (Beer-Lambert forward model).
    pub fn synthesize(&self, hematoxylin: f64, dab: f64) -> [u8; 3] {
        self.synthesize_od(hematoxylin, dab).map(intensity_from_od)
    }
}

/// Optical density of an 8-bit intensity: `-log10((i + 1) / 256)`.
pub fn optical_density(intensity: u8) -> f64 {
    -libm::log10((intensity as f64 + 1.0) / 256.0)
}

/// Inverse of [`optical_density`], rounded and clamped to 8 bits.
pub fn intensity_from_od(od: f64) -> u8 {
    let i = 256.0 * libm::pow(10.0, -od) - 1.0;
    libm::round(i).clamp(0.0, 255.0) as u8
}

fn od_table() -> [f64; 256] {
    let mut t = [0.0; 256];
    for (i, v) in t.iter_mut().enumerate() {
        *v = optical_density(i as u8);
    }
    t
}

/// Hematoxylin and DAB concentration planes of a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct StainPlanes {
    pub width: u32,
    pub height: u32,
    pub hematoxylin: Vec<f32>,
    pub dab: Vec<f32>,
}

/// Convert to optical density and unmix every pixel onto the stain basis.
pub fn deconvolve(img: &PatchImage, params: &StainParams) -> Result<StainPlanes, InferenceError> {
    let basis = StainBasis::new(params.hematoxylin, params.dab)?;
    let table = od_table();
    let n = img.width() as usize * img.height() as usize;
    let mut hematoxylin = Vec::with_capacity(n);
    let mut dab = Vec::with_capacity(n);
    for px in img.pixels().chunks_exact(3) {
        let od = [
            table[px[0] as usize],
            table[px[1] as usize],
            table[px[2] as usize],
        ];
        let (h, d) = basis.unmix(od);
        hematoxylin.push(h as f32);
        dab.push(d as f32);
    }
    Ok(StainPlanes {
        width: img.width(),
        height: img.height(),
        hematoxylin,
        dab,
    })
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Stain-intensity baseline: nuclear evidence from total stain, positivity
/// from DAB, combined so the three channels sum to one.
pub fn baseline_infer(
    img: &PatchImage,
    params: &StainParams,
) -> Result<ProbabilityMap, InferenceError> {
    let planes = deconvolve(img, params)?;
    let n = planes.hematoxylin.len();
    let mut data = vec![0.0f32; n * 3];
    let (bg, rest) = data.split_at_mut(n);
    let (neg, pos) = rest.split_at_mut(n);
    for i in 0..n {
        let h = planes.hematoxylin[i] as f64;
        let d = planes.dab[i] as f64;
        let nuclear = logistic((h + d - params.nuclear_threshold) / params.softness);
        let positive = logistic((d - params.dab_threshold) / params.softness);
        let p_pos = nuclear * positive;
        let p_neg = nuclear - p_pos;
        pos[i] = p_pos as f32;
        neg[i] = p_neg as f32;
        bg[i] = (1.0 - p_pos - p_neg) as f32;
    }
    ProbabilityMap::new_unchecked(img.width(), img.height(), img.mpp(), data)
}

/// The built-in backend.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeconvBackend {
    pub params: StainParams,
}

impl InferenceBackend for DeconvBackend {
    fn infer(&self, patch: &PatchImage) -> Result<ProbabilityMap, InferenceError> {
        baseline_infer(patch, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::ResolutionSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn refmpp() -> ResolutionSpec {
        ResolutionSpec::reference()
    }

    fn basis() -> StainBasis {
        let p = StainParams::default();
        StainBasis::new(p.hematoxylin, p.dab).unwrap()
    }

    /// Forward-synthesize one pixel and unmix it through `deconvolve`.
    fn roundtrip(h: f64, d: f64) -> (f32, f32) {
        let rgb = basis().synthesize(h, d);
        let img = PatchImage::filled(1, 1, rgb, refmpp());
        let planes = deconvolve(&img, &StainParams::default()).unwrap();
        (planes.hematoxylin[0], planes.dab[0])
    }

    #[test]
    fn white_has_no_stain() {
        let (h, d) = roundtrip(0.0, 0.0);
        assert!(h <= 0.002 && d <= 0.002, "{h} {d}");
        assert_eq!(optical_density(255), 0.0);
    }

    #[test]
    fn pure_dab_unmixes() {
        let (h, d) = roundtrip(0.0, 1.0);
        assert!((d - 1.0).abs() <= 0.02, "dab {d}");
        assert!(h <= 0.02, "hem {h}");
    }

    #[test]
    fn half_and_half_unmixes() {
        let (h, d) = roundtrip(0.5, 0.5);
        assert!((h - 0.5).abs() <= 0.02 && (d - 0.5).abs() <= 0.02, "{h} {d}");
    }

    #[test]
    fn unmix_inverts_synthesis_on_grid() {
        let b = basis();
        for hi in 0..=40 {
            for di in 0..=40 {
                let (h, d) = (hi as f64 * 0.05, di as f64 * 0.05);
                let (hu, du) = b.unmix(b.synthesize_od(h, d));
                assert!((hu - h).abs() <= 1e-9 && (du - d).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn eight_bit_roundtrip_within_quantization() {
        // Past ~1 OD total, 8-bit rounding of dark channels alone moves the
        // estimate by more than 0.02, so the pixel path is checked below that.
        for hi in 0..=10 {
            for di in 0..=10 - hi {
                let (h, d) = (hi as f64 * 0.1, di as f64 * 0.1);
                let (hu, du) = roundtrip(h, d);
                assert!(
                    (hu as f64 - h).abs() <= 0.02 && (du as f64 - d).abs() <= 0.02,
                    "({h},{d}) -> ({hu},{du})"
                );
            }
        }
    }

    #[test]
    fn collinear_stains_rejected() {
        let p = StainParams {
            dab: [1.3, 1.408, 0.572],
            ..StainParams::default()
        };
        let img = PatchImage::filled(1, 1, [1, 2, 3], refmpp());
        assert_eq!(deconvolve(&img, &p), Err(InferenceError::DegenerateStains));
        let z = StainParams {
            hematoxylin: [0.0; 3],
            ..StainParams::default()
        };
        assert_eq!(deconvolve(&img, &z), Err(InferenceError::DegenerateStains));
    }

    #[test]
    fn white_patch_is_background() {
        let img = PatchImage::filled(8, 8, [255, 255, 255], refmpp());
        let map = baseline_infer(&img, &StainParams::default()).unwrap();
        assert!(map.plane(Channel::Background).iter().all(|&p| p >= 0.95));
        map.validate(1e-6).unwrap();
    }

    fn blob(rgb: [u8; 3]) -> ProbabilityMap {
        let mut img = PatchImage::filled(32, 32, [245, 242, 240], refmpp());
        for y in 0..32u32 {
            for x in 0..32u32 {
                let (dx, dy) = (x as i32 - 16, y as i32 - 16);
                if dx * dx + dy * dy <= 25 {
                    img.set_pixel(x, y, rgb);
                }
            }
        }
        baseline_infer(&img, &StainParams::default()).unwrap()
    }

    fn argmax(p: [f32; 3]) -> usize {
        (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
    }

    #[test]
    fn brown_blob_is_positive() {
        let map = blob([120, 75, 35]);
        assert_eq!(argmax(map.get(16, 16)), Channel::TcPos as usize);
        assert_eq!(argmax(map.get(0, 0)), Channel::Background as usize);
    }

    #[test]
    fn blue_blob_is_negative() {
        let map = blob([70, 60, 140]);
        assert_eq!(argmax(map.get(16, 16)), Channel::TcNeg as usize);
    }

    #[test]
    fn baseline_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let px: Vec<u8> = (0..64 * 64 * 3).map(|_| rng.random()).collect();
        let img = PatchImage::new(64, 64, px, refmpp()).unwrap();
        let map = baseline_infer(&img, &StainParams::default()).unwrap();
        map.validate(1e-6).unwrap();
    }

    #[test]
    fn baseline_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px: Vec<u8> = (0..20 * 10 * 3).map(|_| rng.random()).collect();
        let img = PatchImage::new(20, 10, px.clone(), refmpp()).unwrap();
        // shift columns right by 3 with wraparound
        let mut shifted = vec![0u8; px.len()];
        for y in 0..10 {
            for x in 0..20 {
                let src = (y * 20 + x) * 3;
                let dst = (y * 20 + (x + 3) % 20) * 3;
                shifted[dst..dst + 3].copy_from_slice(&px[src..src + 3]);
            }
        }
        let img2 = PatchImage::new(20, 10, shifted, refmpp()).unwrap();
        let p = StainParams::default();
        let (a, b) = (baseline_infer(&img, &p).unwrap(), baseline_infer(&img2, &p).unwrap());
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(a.get(x, y), b.get((x + 3) % 20, y));
            }
        }
    }

    #[test]
    fn normalization_violation_names_pixel() {
        let mut data = vec![1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0];
        data[1] = 0.5;
        let err = ProbabilityMap::new(2, 1, refmpp(), data).unwrap_err();
        assert_eq!(
            err,
            InferenceError::Normalization {
                pixel: 1,
                x: 1,
                y: 0,
                sum: 0.5
            }
        );
    }

    #[test]
    fn single_pixel_certain_positive() {
        let map = ProbabilityMap::new(1, 1, refmpp(), vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(map.get(0, 0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_of_identical_is_identity() {
        let base = blob([120, 75, 35]);
        let set = ReplicateSet::new(vec![base.clone(); 5]).unwrap();
        let mean = mean_replicate(&set);
        for (a, b) in mean.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_of_opposites() {
        let a = ProbabilityMap::new(1, 1, refmpp(), vec![1.0, 0.0, 0.0]).unwrap();
        let b = ProbabilityMap::new(1, 1, refmpp(), vec![0.0, 0.0, 1.0]).unwrap();
        let mean = mean_replicate(&ReplicateSet::new(vec![a, b]).unwrap());
        assert_eq!(mean.get(0, 0), [0.5, 0.0, 0.5]);
    }

    #[test]
    fn replicate_errors() {
        assert_eq!(ReplicateSet::new(vec![]), Err(InferenceError::EmptyReplicates));
        let a = ProbabilityMap::background(2, 2, refmpp());
        let b = ProbabilityMap::background(2, 3, refmpp());
        assert!(matches!(
            ReplicateSet::new(vec![a, b]),
            Err(InferenceError::ReplicateMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn mean_of_noisy_replicates_converges() {
        // interior base map so additive noise never needs clamping
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 32 * 32;
        let mut base_data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let a: f32 = rng.random_range(0.25..0.45);
            let b: f32 = rng.random_range(0.25..0.45);
            base_data[i] = a;
            base_data[n + i] = b;
            base_data[2 * n + i] = 1.0 - a - b;
        }
        let base = ProbabilityMap::new(32, 32, refmpp(), base_data).unwrap();
        let sigma = 0.02f32;
        let noise = Normal::new(0.0f32, sigma).unwrap();
        let reps: Vec<_> = (0..30)
            .map(|_| {
                let data: Vec<f32> = base.data().iter().map(|&v| v + noise.sample(&mut rng)).collect();
                let mut m = ProbabilityMap::new_unchecked(32, 32, refmpp(), data).unwrap();
                m.renormalize();
                m
            })
            .collect();
        let mean = mean_replicate(&ReplicateSet::new(reps).unwrap());
        mean.validate(NORMALIZATION_TOLERANCE).unwrap();
        let se = sigma / libm::sqrtf(30.0);
        let diffs: Vec<f32> = mean.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
        let worst = diffs.iter().fold(0.0f32, |m, d| m.max(d.abs()));
        // 3072 values: 5 standard errors bounds the extreme
        assert!(worst < 5.0 * se, "worst {worst} se {se}");
        let rms = libm::sqrtf(diffs.iter().map(|d| d * d).sum::<f32>() / diffs.len() as f32);
        assert!(rms < 1.2 * se, "rms {rms} se {se}");
    }
}
