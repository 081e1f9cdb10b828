//! Cell point annotations, HER2 score remapping and disk label maps.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label-disk radius in reference-resolution pixels (about 1.3 um at 0.19 MPP).
pub const DEFAULT_DISK_RADIUS: u32 = 7;

/// Tumor cell class: negatively or positively stained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellClass {
    #[serde(rename = "TC_NEG")]
    TcNeg,
    #[serde(rename = "TC_POS")]
    TcPos,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::TcNeg, CellClass::TcPos];

    /// Label-map code: 1 for TC-, 2 for TC+ (0 is background).
    pub fn code(self) -> u8 {
        match self {
            CellClass::TcNeg => 1,
            CellClass::TcPos => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(CellClass::TcNeg),
            2 => Some(CellClass::TcPos),
            _ => None,
        }
    }

    /// Position of this class among the two cell classes (0 or 1).
    pub fn index(self) -> usize {
        self.code() as usize - 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellClass::TcNeg => "TC_NEG",
            CellClass::TcPos => "TC_POS",
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown cell class {0:?} (expected TC_NEG or TC_POS)")]
pub struct ParseClassError(pub alloc::string::String);

impl FromStr for CellClass {
    type Err = ParseClassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "TC_NEG" => Ok(CellClass::TcNeg),
            "TC_POS" => Ok(CellClass::TcPos),
            other => Err(ParseClassError(other.into())),
        }
    }
}

/// A single annotated cell center in reference-MPP pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub x: u32,
    pub y: u32,
    pub cls: CellClass,
}

impl CellAnnotation {
    pub fn new(x: u32, y: u32, cls: CellClass) -> Self {
        Self { x, y, cls }
    }
}

/// Four-level HER2 membrane staining score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Her2Score {
    H0,
    H1,
    H2,
    H3,
}

/// Collapse a HER2 score onto the two-class scheme: H0 is negative, H1-H3
/// positive.
pub fn remap_her2(score: Her2Score) -> CellClass {
    match score {
        Her2Score::H0 => CellClass::TcNeg,
        Her2Score::H1 | Her2Score::H2 | Her2Score::H3 => CellClass::TcPos,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("annotation {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("disk radius must be at least 1")]
    ZeroRadius,
}

/// Segmentation-style training target: 0 background, 1 TC-, 2 TC+.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    radius: u32,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// Paint a class disk of `radius` around every annotation.
///
/// A pixel belongs to a disk when `dx^2 + dy^2 <= radius^2`. Disks are clipped
/// at the image border and later annotations overwrite earlier ones.
pub fn rasterize(
    annotations: &[CellAnnotation],
    width: u32,
    height: u32,
    radius: u32,
) -> Result<LabelMap, AnnotationError> {
    if radius == 0 {
        return Err(AnnotationError::ZeroRadius);
    }
    if let Some((index, a)) = annotations
        .iter()
        .enumerate()
        .find(|(_, a)| a.x >= width || a.y >= height)
    {
        return Err(AnnotationError::OutOfBounds {
            index,
            x: a.x,
            y: a.y,
            width,
            height,
        });
    }

    let mut values = vec![0u8; width as usize * height as usize];
    let r = radius as i64;
    let r2 = r * r;
    for a in annotations {
        let code = a.cls.code();
        let (cx, cy) = (a.x as i64, a.y as i64);
        let y_lo = (cy - r).max(0);
        let y_hi = (cy + r).min(height as i64 - 1);
        for py in y_lo..=y_hi {
            let dy = py - cy;
            // widest dx with dx^2 <= r^2 - dy^2
            let span = libm::sqrt((r2 - dy * dy) as f64) as i64;
            let x_lo = (cx - span).max(0);
            let x_hi = (cx + span).min(width as i64 - 1);
            let row = py as usize * width as usize;
            values[row + x_lo as usize..=row + x_hi as usize].fill(code);
        }
    }

    Ok(LabelMap {
        width,
        height,
        radius,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force lattice count of points with dx^2 + dy^2 <= r^2.
    fn lattice_disk(r: i64) -> usize {
        let mut n = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    n += 1;
                }
            }
        }
        n
    }

    /// Independent per-pixel painter used as the rasterization oracle.
    fn paint_oracle(anns: &[CellAnnotation], w: u32, h: u32, r: i64) -> Vec<u8> {
        let mut v = vec![0u8; (w * h) as usize];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for a in anns {
                    let dx = x - a.x as i64;
                    let dy = y - a.y as i64;
                    if dx * dx + dy * dy <= r * r {
                        v[(y * w as i64 + x) as usize] = a.cls.code();
                    }
                }
            }
        }
        v
    }

    #[test]
    fn her2_remapping() {
        assert_eq!(remap_her2(Her2Score::H0), CellClass::TcNeg);
        assert_eq!(remap_her2(Her2Score::H1), CellClass::TcPos);
        assert_eq!(remap_her2(Her2Score::H2), CellClass::TcPos);
        assert_eq!(remap_her2(Her2Score::H3), CellClass::TcPos);
        assert!(Her2Score::H0 < Her2Score::H1 && Her2Score::H2 < Her2Score::H3);
    }

    #[test]
    fn single_disk_area() {
        assert_eq!(lattice_disk(7), 149);
        let map = rasterize(
            &[CellAnnotation::new(100, 100, CellClass::TcNeg)],
            256,
            256,
            DEFAULT_DISK_RADIUS,
        )
        .unwrap();
        assert_eq!(map.nonzero_count(), 149);
        assert!(map.values().iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn empty_list_gives_zero_map() {
        let map = rasterize(&[], 32, 16, 7).unwrap();
        assert_eq!(map.nonzero_count(), 0);
        assert_eq!(map.values().len(), 512);
    }

    #[test]
    fn overlapping_disks_last_wins() {
        let anns = [
            CellAnnotation::new(50, 50, CellClass::TcNeg),
            CellAnnotation::new(52, 50, CellClass::TcPos),
        ];
        let map = rasterize(&anns, 128, 128, 7).unwrap();
        assert_eq!(map.values(), paint_oracle(&anns, 128, 128, 7).as_slice());
        assert!(map.nonzero_count() < 298);
        assert_eq!(map.get(51, 50), 2);
        assert_eq!(map.get(50, 50), 2);
        assert_eq!(map.get(44, 50), 1);
    }

    #[test]
    fn border_disks_are_clipped() {
        let map = rasterize(&[CellAnnotation::new(0, 0, CellClass::TcPos)], 20, 20, 7).unwrap();
        // quarter disk including the axes
        let expected = (0..=7i64)
            .flat_map(|dy| (0..=7i64).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= 49)
            .count();
        assert_eq!(map.nonzero_count(), expected);
    }

    #[test]
    fn out_of_bounds_reports_index() {
        let anns = [
            CellAnnotation::new(1, 1, CellClass::TcNeg),
            CellAnnotation::new(20, 1, CellClass::TcNeg),
        ];
        assert_eq!(
            rasterize(&anns, 20, 20, 7),
            Err(AnnotationError::OutOfBounds {
                index: 1,
                x: 20,
                y: 1,
                width: 20,
                height: 20
            })
        );
        assert_eq!(rasterize(&anns[..1], 20, 20, 0), Err(AnnotationError::ZeroRadius));
    }

    fn arb_class() -> impl Strategy<Value = CellClass> {
        prop_oneof![Just(CellClass::TcNeg), Just(CellClass::TcPos)]
    }

    proptest! {
        #[test]
        fn matches_brute_force_painter(
            anns in proptest::collection::vec((0u32..48, 0u32..40, arb_class()), 0..8),
            r in 1u32..9,
        ) {
            let anns: Vec<_> = anns.into_iter().map(|(x, y, c)| CellAnnotation::new(x, y, c)).collect();
            let map = rasterize(&anns, 48, 40, r).unwrap();
            let oracle = paint_oracle(&anns, 48, 40, r as i64);
            prop_assert_eq!(map.values(), oracle.as_slice());
            for a in &anns {
                // own pixel carries own class unless a later disk covers it
                let later_cover = anns.iter().rev().take_while(|b| *b != a).any(|b| {
                    let dx = a.x as i64 - b.x as i64;
                    let dy = a.y as i64 - b.y as i64;
                    dx * dx + dy * dy <= (r * r) as i64 && b.cls != a.cls
                });
                if !later_cover {
                    prop_assert_eq!(map.get(a.x, a.y), a.cls.code());
                }
            }
        }

        #[test]
        fn disjoint_interior_disks_scale_linearly(k in 0usize..10) {
            let anns: Vec<_> = (0..k)
                .map(|i| CellAnnotation::new(10 + 20 * i as u32, 30, CellClass::ALL[i % 2]))
                .collect();
            let map = rasterize(&anns, 220, 60, 7).unwrap();
            prop_assert_eq!(map.nonzero_count(), 149 * k);
        }

        #[test]
        fn permutation_invariant_without_cross_class_overlap(
            seed in any::<u64>(),
        ) {
            // same-class overlaps allowed, different-class disks kept far apart
            let mut anns = Vec::new();
            for i in 0..6u32 {
                let cls = if i < 3 { CellClass::TcNeg } else { CellClass::TcPos };
                let base = if i < 3 { 15 } else { 70 };
                anns.push(CellAnnotation::new(base + (seed >> i) as u32 % 10, 20 + i, cls));
            }
            let fwd = rasterize(&anns, 100, 40, 7).unwrap();
            anns.reverse();
            let rev = rasterize(&anns, 100, 40, 7).unwrap();
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn her2_positive_count(scores in proptest::collection::vec(0u8..4, 0..50)) {
            let scores: Vec<Her2Score> = scores.into_iter().map(|s| match s {
                0 => Her2Score::H0, 1 => Her2Score::H1, 2 => Her2Score::H2, _ => Her2Score::H3,
            }).collect();
            let pos = scores.iter().filter(|&&s| remap_her2(s) == CellClass::TcPos).count();
            prop_assert_eq!(pos, scores.iter().filter(|&&s| s > Her2Score::H0).count());
        }
    }
}
