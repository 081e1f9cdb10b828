//! Patch representations: raw-pixel features, 2D projection, mosaics and
//! cohort-similarity matrices.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slide::PatchImage;
use crate::stats;

/// Edge length of the pixel-baseline thumbnail.
pub const PIXEL_FEATURE_SIDE: u32 = 32;

/// Length of a pixel-baseline feature vector (32 x 32 x RGB).
pub const PIXEL_FEATURE_LEN: usize = 3072;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("need at least {needed} feature vectors, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("feature {index} ({patch_id}) has {got} values, expected {expected}")]
    DimensionMismatch {
        index: usize,
        patch_id: String,
        expected: usize,
        got: usize,
    },
    #[error("feature {index} ({patch_id}) has a non-finite value")]
    NonFinite { index: usize, patch_id: String },
    #[error("all feature vectors are identical; nothing to project")]
    Degenerate,
    #[error("grid_n must be at least 2, got {0}")]
    InvalidGrid(u32),
    #[error("projection is empty")]
    EmptyProjection,
    #[error("need at least 2 cohorts, got {0}")]
    TooFewCohorts(usize),
    #[error("cohort {cohort} has {n} patches, need at least 2")]
    SmallCohort { cohort: String, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub patch_id: String,
    pub cohort_id: String,
    pub values: Vec<f64>,
}

/// Per-axis source spans of an exact area-average resize: for every output
/// index, `(source index, overlap length)` pairs. Overlaps sum to `src/dst`.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = libm::floor(lo) as usize;
            let last = (libm::ceil(hi) as usize).min(src as usize);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap))
                })
                .collect()
        })
        .collect()
}

/// Area-average every channel of `img` onto a `width x height` grid.
/// Values are in the source's 0..=255 scale.
pub fn area_average(img: &PatchImage, width: u32, height: u32) -> Vec<f64> {
    let wx = area_weights(img.width(), width);
    let wy = area_weights(img.height(), height);
    let sw = img.width() as usize;
    let px = img.pixels();
    let mut out = vec![0.0; width as usize * height as usize * 3];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for &(sy, ay) in ys {
                for &(sx, ax) in xs {
                    let w = ay * ax;
                    let o = (sy * sw + sx) * 3;
                    for c in 0..3 {
                        acc[c] += w * px[o + c] as f64;
                    }
                    total += w;
                }
            }
            let o = (oy * width as usize + ox) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] / total;
            }
        }
    }
    out
}

/// Resize by exact area averaging, rounding back to 8 bits.
pub fn resize_area(img: &PatchImage, width: u32, height: u32) -> PatchImage {
    let pixels = area_average(img, width, height)
        .into_iter()
        .map(|v| libm::round(v).clamp(0.0, 255.0) as u8)
        .collect();
    PatchImage::new(width, height, pixels, img.mpp()).expect("buffer sized for width x height")
}

/// Raw-pixel baseline: area-average to 32x32, flatten row-major with
/// interleaved RGB and scale to [0, 1].
pub fn pixel_features(
    img: &PatchImage,
    patch_id: impl Into<String>,
    cohort_id: impl Into<String>,
) -> FeatureVector {
    let values = area_average(img, PIXEL_FEATURE_SIDE, PIXEL_FEATURE_SIDE)
        .into_iter()
        .map(|v| v / 255.0)
        .collect();
    FeatureVector {
        patch_id: patch_id.into(),
        cohort_id: cohort_id.into(),
        values,
    }
}

fn check_features(features: &[FeatureVector], min: usize) -> Result<usize, EmbedError> {
    if features.len() < min {
        return Err(EmbedError::TooFew {
            needed: min,
            got: features.len(),
        });
    }
    let d = features[0].values.len();
    for (index, f) in features.iter().enumerate() {
        if f.values.len() != d {
            return Err(EmbedError::DimensionMismatch {
                index,
                patch_id: f.patch_id.clone(),
                expected: d,
                got: f.values.len(),
            });
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite {
                index,
                patch_id: f.patch_id.clone(),
            });
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    /// Coordinates computed elsewhere (e.g. UMAP) and read from a file.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub patch_id: String,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub method: ProjectionMethod,
    pub points: Vec<ProjectedPoint>,
}

impl Projection2D {
    pub fn from_points(points: Vec<ProjectedPoint>) -> Self {
        Self {
            method: ProjectionMethod::External,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Flip `axis` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(axis: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis.get(best).is_some_and(|v| *v < 0.0) {
        axis.iter_mut().for_each(|v| *v = -*v);
        true
    } else {
        false
    }
}

/// PCA onto the top two principal axes of the mean-centered features.
///
/// The eigenproblem is solved on whichever of the Gram (`n x n`) or scatter
/// (`D x D`) matrix is smaller. Each axis is oriented so its largest-
/// magnitude loading is positive. A second axis with zero variance projects
/// every point to `v = 0`.
pub fn project_2d(features: &[FeatureVector]) -> Result<Projection2D, EmbedError> {
    let d = check_features(features, 2)?;
    let n = features.len();
    if features.iter().all(|f| f.values == features[0].values) {
        return Err(EmbedError::Degenerate);
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| features[i].values[j] - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum();
    if d == 0 || !(total > 0.0) {
        return Err(EmbedError::Degenerate);
    }

    // (eigenvalue, loading axis in feature space)
    let axes: Vec<(f64, Vec<f64>)> = if n <= d {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        top_two(&eig)
            .into_iter()
            .map(|(lambda, k)| {
                if lambda <= total * 1e-12 {
                    return (0.0, vec![0.0; d]);
                }
                let u = eig.eigenvectors.column(k);
                let loading = x.transpose() * u / libm::sqrt(lambda);
                (lambda, loading.iter().copied().collect())
            })
            .collect()
    } else {
        let scatter = x.transpose() * &x;
        let eig = SymmetricEigen::new(scatter);
        top_two(&eig)
            .into_iter()
            .map(|(lambda, k)| {
                if lambda <= total * 1e-12 {
                    return (0.0, vec![0.0; d]);
                }
                (lambda, eig.eigenvectors.column(k).iter().copied().collect())
            })
            .collect()
    };
    if axes[0].0 <= 0.0 {
        return Err(EmbedError::Degenerate);
    }

    let mut coords = [vec![0.0; n], vec![0.0; n]];
    for (a, (_, loading)) in axes.into_iter().enumerate() {
        let mut loading = loading;
        fix_sign(&mut loading);
        for (i, c) in coords[a].iter_mut().enumerate() {
            *c = x.row(i).iter().zip(&loading).map(|(p, q)| p * q).sum();
        }
    }
    let points = features
        .iter()
        .enumerate()
        .map(|(i, f)| ProjectedPoint {
            patch_id: f.patch_id.clone(),
            u: coords[0][i],
            v: coords[1][i],
        })
        .collect();
    Ok(Projection2D {
        method: ProjectionMethod::Pca,
        points,
    })
}

/// Indices of the two largest eigenvalues (clamped at zero), descending.
fn top_two(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> [(f64, usize); 2] {
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let pick = |r: usize| {
        idx.get(r)
            .map(|&k| (eig.eigenvalues[k].max(0.0), k))
            .unwrap_or((0.0, 0))
    };
    [pick(0), pick(1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicCell {
    pub row: u32,
    pub col: u32,
    /// Index of the representative in the projection.
    pub index: usize,
    pub patch_id: String,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicLayout {
    pub grid_n: u32,
    pub u_range: [f64; 2],
    pub v_range: [f64; 2],
    /// Occupied cells in row-major order.
    pub cells: Vec<MosaicCell>,
}

fn bin(value: f64, lo: f64, hi: f64, n: u32) -> u32 {
    if !(hi > lo) {
        return 0;
    }
    let b = libm::floor((value - lo) / (hi - lo) * n as f64);
    (b.max(0.0) as u32).min(n - 1)
}

/// Discretize the projection extent into `grid_n x grid_n` cells (column
/// from `u`, row from `v`, both increasing) and pick, per occupied cell, the
/// member minimizing the summed Euclidean distance to the other members
/// (ties: lowest index).
pub fn mosaic(proj: &Projection2D, grid_n: u32) -> Result<MosaicLayout, EmbedError> {
    if grid_n < 2 {
        return Err(EmbedError::InvalidGrid(grid_n));
    }
    if proj.points.is_empty() {
        return Err(EmbedError::EmptyProjection);
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&ProjectedPoint) -> f64| {
        proj.points.iter().map(g).fold(init, f)
    };
    let u_range = [
        fold(f64::min, f64::INFINITY, |p| p.u),
        fold(f64::max, f64::NEG_INFINITY, |p| p.u),
    ];
    let v_range = [
        fold(f64::min, f64::INFINITY, |p| p.v),
        fold(f64::max, f64::NEG_INFINITY, |p| p.v),
    ];

    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, p) in proj.points.iter().enumerate() {
        let col = bin(p.u, u_range[0], u_range[1], grid_n);
        let row = bin(p.v, v_range[0], v_range[1], grid_n);
        groups.entry((row, col)).or_default().push(i);
    }

    let cells = groups
        .into_iter()
        .map(|((row, col), members)| {
            let cost = |i: usize| -> f64 {
                let a = &proj.points[i];
                members
                    .iter()
                    .map(|&j| libm::hypot(a.u - proj.points[j].u, a.v - proj.points[j].v))
                    .sum()
            };
            let mut best = members[0];
            let mut best_cost = cost(best);
            for &i in &members[1..] {
                let c = cost(i);
                if c < best_cost {
                    best = i;
                    best_cost = c;
                }
            }
            MosaicCell {
                row,
                col,
                index: best,
                patch_id: proj.points[best].patch_id.clone(),
                members: members.len(),
            }
        })
        .collect();
    Ok(MosaicLayout {
        grid_n,
        u_range,
        v_range,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub cohorts: Vec<String>,
    /// Rank-sum p-values; `None` on the diagonal.
    pub p_values: Vec<Vec<Option<f64>>>,
    /// Mean of the strict upper triangle.
    pub summary: f64,
}

/// Pairwise cohort similarity.
///
/// Each patch is reduced to its Euclidean distance from the centroid of all
/// patches; every cohort pair is compared with a two-sided rank-sum test on
/// those distances. Higher p means the cohorts are harder to tell apart.
/// Cohorts are ordered by id.
pub fn cohort_similarity(features: &[FeatureVector]) -> Result<SimilarityMatrix, EmbedError> {
    let d = check_features(features, 1)?;
    let n = features.len() as f64;
    let mut centroid = vec![0.0; d];
    for f in features {
        for (c, v) in centroid.iter_mut().zip(&f.values) {
            *c += v / n;
        }
    }
    let mut by_cohort: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for f in features {
        let dist = libm::sqrt(
            f.values
                .iter()
                .zip(&centroid)
                .map(|(v, c)| (v - c) * (v - c))
                .sum(),
        );
        by_cohort.entry(&f.cohort_id).or_default().push(dist);
    }
    if by_cohort.len() < 2 {
        return Err(EmbedError::TooFewCohorts(by_cohort.len()));
    }
    if let Some((c, v)) = by_cohort.iter().find(|(_, v)| v.len() < 2) {
        return Err(EmbedError::SmallCohort {
            cohort: String::from(*c),
            n: v.len(),
        });
    }

    let groups: Vec<&Vec<f64>> = by_cohort.values().collect();
    let k = groups.len();
    let mut p_values = vec![vec![None; k]; k];
    let mut upper = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (_, p) = stats::rank_sum_test(groups[i], groups[j]);
            p_values[i][j] = Some(p);
            p_values[j][i] = Some(p);
            upper.push(p);
        }
    }
    Ok(SimilarityMatrix {
        cohorts: by_cohort.keys().map(|c| String::from(*c)).collect(),
        p_values,
        summary: stats::mean(&upper),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::ResolutionSpec;
    use alloc::format;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(id: &str, cohort: &str, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            patch_id: id.into(),
            cohort_id: cohort.into(),
            values,
        }
    }

    #[test]
    fn uniform_gray_gives_constant_vector() {
        let img = PatchImage::filled(1024, 1024, [128, 128, 128], ResolutionSpec::reference());
        let f = pixel_features(&img, "p", "c");
        assert_eq!(f.values.len(), PIXEL_FEATURE_LEN);
        assert!(f.values.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_matches_block_means() {
        // 32-px checkerboard on a 1024 image: each 32x32 output cell covers
        // exactly one checker square.
        let mut img = PatchImage::filled(1024, 1024, [0, 0, 0], ResolutionSpec::reference());
        for y in 0..1024 {
            for x in 0..1024 {
                if (x / 32 + y / 32) % 2 == 0 {
                    img.set_pixel(x, y, [200, 100, 50]);
                }
            }
        }
        let f = pixel_features(&img, "p", "c");
        for by in 0..32u32 {
            for bx in 0..32u32 {
                let mut sum = [0u64; 3];
                for y in by * 32..(by + 1) * 32 {
                    for x in bx * 32..(bx + 1) * 32 {
                        let p = img.pixel(x, y);
                        for c in 0..3 {
                            sum[c] += p[c] as u64;
                        }
                    }
                }
                for c in 0..3 {
                    let oracle = sum[c] as f64 / 1024.0 / 255.0;
                    let got = f.values[((by * 32 + bx) * 3) as usize + c];
                    assert!((got - oracle).abs() < 1e-12);
                }
                let on = (bx + by) % 2 == 0;
                assert_eq!(f.values[((by * 32 + bx) * 3) as usize] > 0.0, on);
            }
        }
    }

    #[test]
    fn non_integer_ratio_averages_by_area() {
        // 3 px -> 2 px: output 0 covers px 0 fully and half of px 1
        let img = PatchImage::new(
            3,
            1,
            vec![0, 0, 0, 90, 90, 90, 255, 255, 255],
            ResolutionSpec::reference(),
        )
        .unwrap();
        let out = area_average(&img, 2, 1);
        assert!((out[0] - (0.0 + 0.5 * 90.0) / 1.5).abs() < 1e-12);
        assert!((out[3] - (0.5 * 90.0 + 255.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn within_block_permutation_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut px: Vec<u8> = (0..64 * 64 * 3).map(|_| rng.random()).collect();
        let a = PatchImage::new(64, 64, px.clone(), ResolutionSpec::reference()).unwrap();
        // swap two pixels inside the top-left 2x2 block
        for c in 0..3 {
            px.swap(c, (64 + 1) * 3 + c);
        }
        let b = PatchImage::new(64, 64, px, ResolutionSpec::reference()).unwrap();
        let (fa, fb) = (pixel_features(&a, "a", "c"), pixel_features(&b, "b", "c"));
        for (x, y) in fa.values.iter().zip(&fb.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn distances(points: &[(f64, f64)]) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                out.push(libm::hypot(a.0 - b.0, a.1 - b.1));
            }
        }
        out
    }

    fn planar_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<(f64, f64)>, Vec<FeatureVector>) {
        // orthonormal pair in R^d via Gram-Schmidt
        let mut e1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n1 = libm::sqrt(e1.iter().map(|v| v * v).sum());
        e1.iter_mut().for_each(|v| *v /= n1);
        let mut e2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
        e2.iter_mut().zip(&e1).for_each(|(b, a)| *b -= dot * a);
        let n2 = libm::sqrt(e2.iter().map(|v| v * v).sum());
        e2.iter_mut().for_each(|v| *v /= n2);
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut pts = Vec::new();
        let mut feats = Vec::new();
        for i in 0..n {
            let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            pts.push((a, b));
            let values = (0..d).map(|k| offset[k] + a * e1[k] + b * e2[k]).collect();
            feats.push(fv(&format!("p{i}"), "c", values));
        }
        (pts, feats)
    }

    #[test]
    fn planar_data_distances_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // both eigen routes: n < d (Gram) and n > d (scatter)
        for (n, d) in [(12, 40), (60, 5)] {
            let (pts, feats) = planar_features(&mut rng, n, d);
            let proj = project_2d(&feats).unwrap();
            let got: Vec<(f64, f64)> = proj.points.iter().map(|p| (p.u, p.v)).collect();
            for (a, b) in distances(&pts).iter().zip(distances(&got)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn variance_ordering_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<FeatureVector> = (0..30)
            .map(|i| {
                let values = vec![
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.2..0.2),
                ];
                fv(&format!("{i}"), "c", values)
            })
            .collect();
        let proj = project_2d(&feats).unwrap();
        let var = |f: fn(&ProjectedPoint) -> f64| proj.points.iter().map(|p| f(p) * f(p)).sum::<f64>();
        assert!(var(|p| p.u) >= var(|p| p.v));
        assert!(proj.points.iter().map(|p| p.u).sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn two_vectors_project_apart() {
        let proj = project_2d(&[fv("a", "c", vec![0.0, 1.0]), fv("b", "c", vec![2.0, 1.0])]).unwrap();
        assert_eq!(proj.len(), 2);
        // loading (1, 0) is positive, so b (larger x) lands on positive u
        assert!((proj.points[0].u + 1.0).abs() < 1e-12);
        assert!((proj.points[1].u - 1.0).abs() < 1e-12);
        assert_eq!(proj.points[0].v, 0.0);
    }

    #[test]
    fn sign_convention_is_stable_under_negation() {
        let a = [fv("a", "c", vec![0.0, 0.0]), fv("b", "c", vec![-3.0, 1.0]), fv("c", "c", vec![1.0, 2.0])];
        let proj = project_2d(&a).unwrap();
        // reversing input order must not flip axes
        let mut b = a.clone();
        b.reverse();
        let rev = project_2d(&b).unwrap();
        for p in &proj.points {
            let q = rev.points.iter().find(|q| q.patch_id == p.patch_id).unwrap();
            assert!((p.u - q.u).abs() < 1e-9 && (p.v - q.v).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_errors() {
        let same = vec![fv("a", "c", vec![1.0, 2.0]); 3];
        assert_eq!(project_2d(&same), Err(EmbedError::Degenerate));
        assert!(matches!(
            project_2d(&[fv("a", "c", vec![1.0])]),
            Err(EmbedError::TooFew { .. })
        ));
        assert!(matches!(
            project_2d(&[fv("a", "c", vec![1.0]), fv("b", "c", vec![1.0, 2.0])]),
            Err(EmbedError::DimensionMismatch { index: 1, .. })
        ));
    }

    fn points(xy: &[(f64, f64)]) -> Projection2D {
        Projection2D::from_points(
            xy.iter()
                .enumerate()
                .map(|(i, &(u, v))| ProjectedPoint {
                    patch_id: format!("p{i}"),
                    u,
                    v,
                })
                .collect(),
        )
    }

    #[test]
    fn single_patch_mosaic() {
        let m = mosaic(&points(&[(1.0, 1.0)]), 4).unwrap();
        assert_eq!(m.cells.len(), 1);
        assert_eq!((m.cells[0].index, m.cells[0].members), (0, 1));
    }

    #[test]
    fn collinear_middle_is_representative() {
        // three close points share a cell; a far point stretches the extent
        let proj = points(&[(0.0, 0.0), (0.2, 0.0), (0.1, 0.0), (10.0, 10.0)]);
        let m = mosaic(&proj, 2).unwrap();
        let cell = m.cells.iter().find(|c| c.members == 3).unwrap();
        assert_eq!(cell.patch_id, "p2");
    }

    #[test]
    fn mosaic_rejects_bad_input() {
        assert_eq!(mosaic(&points(&[(0.0, 0.0)]), 1), Err(EmbedError::InvalidGrid(1)));
        assert_eq!(mosaic(&points(&[]), 4), Err(EmbedError::EmptyProjection));
    }

    #[test]
    fn representatives_are_cell_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xy: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.0..5.0)))
            .collect();
        let proj = points(&xy);
        let m = mosaic(&proj, 8).unwrap();
        assert_eq!(m.cells.iter().map(|c| c.members).sum::<usize>(), 200);
        for c in &m.cells {
            let p = &proj.points[c.index];
            assert_eq!(bin(p.u, m.u_range[0], m.u_range[1], 8), c.col);
            assert_eq!(bin(p.v, m.v_range[0], m.v_range[1], 8), c.row);
        }
    }

    fn cohort(name: &str, scalars: &[f64]) -> Vec<FeatureVector> {
        scalars
            .iter()
            .enumerate()
            .map(|(i, &s)| fv(&format!("{name}{i}"), name, vec![s]))
            .collect()
    }

    /// Exact two-sided rank-sum p by enumerating every split (no ties).
    fn exact_rank_sum_p(n1: usize, n2: usize, u_obs: f64) -> f64 {
        let n = n1 + n2;
        let mean = (n1 * n2) as f64 / 2.0;
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let r: usize = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            let u = r as f64 - (n1 * (n1 + 1)) as f64 / 2.0;
            total += 1;
            if (u - mean).abs() >= (u_obs - mean).abs() {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn disjoint_cohorts_are_distinguishable() {
        // one dimension with centroid at 0: distances are |x|
        let mut feats = cohort("a", &[-1.0, 1.0, -1.5, 1.5, -2.0, 2.0, -2.5, 2.5, -3.0, 3.0]);
        feats.extend(cohort("b", &[-11.0, 11.0, -12.0, 12.0, -13.0, 13.0, -14.0, 14.0, -15.0, 15.0]));
        let m = cohort_similarity(&feats).unwrap();
        let p = m.p_values[0][1].unwrap();
        assert!(p < 0.001, "{p}");
        let exact = exact_rank_sum_p(10, 10, 0.0);
        assert!(exact < 0.001);
        assert_eq!(m.p_values[0][0], None);
        assert_eq!(m.summary, p);
    }

    #[test]
    fn normal_approximation_tracks_exact_enumeration() {
        let a = [1.0, 4.0, 5.0, 9.0, 11.0, 12.0];
        let b = [2.0, 3.0, 6.0, 7.0, 8.0, 10.0, 13.0];
        let (u, p) = stats::rank_sum_test(&a, &b);
        let exact = exact_rank_sum_p(6, 7, u);
        assert!((p - exact).abs() < 0.05, "{p} vs {exact}");
    }

    #[test]
    fn three_identical_cohorts() {
        let vals = [0.5, 1.0, 2.0, 4.0];
        let mut feats = cohort("x", &vals);
        feats.extend(cohort("y", &vals));
        feats.extend(cohort("z", &vals));
        let m = cohort_similarity(&feats).unwrap();
        assert_eq!(m.cohorts, ["x", "y", "z"]);
        let upper: Vec<f64> = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .map(|(i, j)| m.p_values[i][j].unwrap())
            .collect();
        assert_eq!(upper.len(), 3);
        assert!((m.summary - upper.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.p_values[i][j], m.p_values[j][i]);
            }
        }
        assert!(upper.iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identical_distributions_are_not_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 200;
        let mut mean_p = 0.0;
        let mut rejections = 0;
        for t in 0..trials {
            let mut feats = Vec::new();
            for c in ["a", "b"] {
                for i in 0..100 {
                    let values = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                    feats.push(fv(&format!("{c}{t}_{i}"), c, values));
                }
            }
            let p = cohort_similarity(&feats).unwrap().summary;
            mean_p += p / trials as f64;
            if p < 0.05 {
                rejections += 1;
            }
        }
        assert!(mean_p > 0.4, "{mean_p}");
        assert!(rejections <= 20, "{rejections}");
    }

    #[test]
    fn cohort_errors() {
        assert_eq!(
            cohort_similarity(&cohort("a", &[1.0, 2.0])),
            Err(EmbedError::TooFewCohorts(1))
        );
        let mut feats = cohort("a", &[1.0, 2.0]);
        feats.extend(cohort("b", &[3.0]));
        assert!(matches!(
            cohort_similarity(&feats),
            Err(EmbedError::SmallCohort { n: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn resize_preserves_mean_for_divisible_sizes(seed in 0u64..1000, k in 1u32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let side = 8 * k;
            let px: Vec<u8> = (0..side * side * 3).map(|_| rng.random()).collect();
            let img = PatchImage::new(side, side, px.clone(), ResolutionSpec::reference()).unwrap();
            let out = area_average(&img, 8, 8);
            let m_in = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
            let m_out = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((m_in - m_out).abs() < 1e-9);
        }
    }
}
