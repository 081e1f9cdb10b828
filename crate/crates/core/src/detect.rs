//! Probability-map post-processing into classified, scored cell detections.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::annotations::CellClass;
use crate::inference::{Channel, ProbabilityMap};

/// A predicted cell: position in reference-MPP pixels, class and the class
/// probability at that pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: u32,
    pub y: u32,
    pub cls: CellClass,
    pub confidence: f32,
}

impl Detection {
    pub fn new(x: u32, y: u32, cls: CellClass, confidence: f32) -> Self {
        Self {
            x,
            y,
            cls,
            confidence,
        }
    }

    pub fn translated(self, dx: u32, dy: u32) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..self
        }
    }
}

/// Canonical slide-level ordering: global y, then x, then class.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        (a.y, a.x, a.cls)
            .cmp(&(b.y, b.x, b.cls))
            .then(a.confidence.total_cmp(&b.confidence))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakParams {
    /// Neighborhood half-width and minimum spacing between peaks, in pixels.
    pub min_distance: u32,
    /// Minimum plane value for a peak.
    pub foreground_threshold: f32,
}

impl Default for PeakParams {
    fn default() -> Self {
        Self {
            min_distance: 7,
            foreground_threshold: 0.5,
        }
    }
}

impl PeakParams {
    pub fn is_valid(&self) -> bool {
        self.min_distance >= 1
            && self.foreground_threshold > 0.0
            && self.foreground_threshold < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: u32,
    pub y: u32,
    pub value: f32,
}

/// Max over the window `[i - r, i + r]` (clipped) of every element of `src`.
fn sliding_max_1d(src: &[f32], r: usize, out: &mut [f32], deque: &mut VecDeque<usize>) {
    let n = src.len();
    deque.clear();
    let mut next = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        let hi = (i + r).min(n - 1);
        while next <= hi {
            while deque.back().is_some_and(|&b| src[b] <= src[next]) {
                deque.pop_back();
            }
            deque.push_back(next);
            next += 1;
        }
        while deque.front().is_some_and(|&f| f + r < i) {
            deque.pop_front();
        }
        *slot = src[*deque.front().expect("window is never empty")];
    }
}

/// Square `(2r+1)^2` max filter, separable rows then columns.
fn max_filter(values: &[f32], width: usize, height: usize, r: usize) -> Vec<f32> {
    let mut deque = VecDeque::new();
    let mut rows = vec![0.0f32; values.len()];
    for (src, dst) in values.chunks_exact(width).zip(rows.chunks_exact_mut(width)) {
        sliding_max_1d(src, r, dst, &mut deque);
    }
    let mut column = vec![0.0f32; height];
    let mut filtered = vec![0.0f32; height];
    let mut out = vec![0.0f32; values.len()];
    for x in 0..width {
        for y in 0..height {
            column[y] = rows[y * width + x];
        }
        sliding_max_1d(&column, r, &mut filtered, &mut deque);
        for y in 0..height {
            out[y * width + x] = filtered[y];
        }
    }
    out
}

/// Local maxima of a row-major plane.
///
/// A pixel is a candidate when its value reaches `foreground_threshold` and
/// equals the maximum of its `(2*min_distance+1)^2` neighborhood. Candidates
/// are accepted in decreasing value (ties: lowest row-major index first) and
/// any candidate within `min_distance` (Euclidean) of an accepted peak is
/// dropped. The result is sorted by decreasing value.
pub fn find_peaks(values: &[f32], width: u32, height: u32, params: &PeakParams) -> Vec<Peak> {
    let (w, h) = (width as usize, height as usize);
    assert_eq!(values.len(), w * h, "plane size mismatch");
    if values.is_empty() {
        return Vec::new();
    }
    let r = params.min_distance.max(1) as usize;
    let neighborhood = max_filter(values, w, h, r);

    let mut candidates: Vec<usize> = (0..values.len())
        .filter(|&i| values[i] >= params.foreground_threshold && values[i] >= neighborhood[i])
        .collect();
    candidates.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    // bucket accepted peaks on a min_distance grid; any conflict lies in
    // the 3x3 block of buckets around a candidate
    let cell = r;
    let gw = w.div_ceil(cell);
    let gh = h.div_ceil(cell);
    let mut grid: Vec<Vec<(u32, u32)>> = vec![Vec::new(); gw * gh];
    let r2 = (r * r) as i64;
    let mut peaks = Vec::new();
    for i in candidates {
        let (x, y) = (i % w, i / w);
        let (gx, gy) = (x / cell, y / cell);
        let mut blocked = false;
        'search: for by in gy.saturating_sub(1)..=(gy + 1).min(gh - 1) {
            for bx in gx.saturating_sub(1)..=(gx + 1).min(gw - 1) {
                for &(px, py) in &grid[by * gw + bx] {
                    let dx = px as i64 - x as i64;
                    let dy = py as i64 - y as i64;
                    if dx * dx + dy * dy <= r2 {
                        blocked = true;
                        break 'search;
                    }
                }
            }
        }
        if !blocked {
            grid[gy * gw + gx].push((x as u32, y as u32));
            peaks.push(Peak {
                x: x as u32,
                y: y as u32,
                value: values[i],
            });
        }
    }
    peaks
}

/// Peaks of the summed TC-/TC+ plane, each classified by the larger class
/// channel (ties go to TC-) and scored with that channel's probability.
pub fn extract_detections(map: &ProbabilityMap, params: &PeakParams) -> Vec<Detection> {
    let fg = map.foreground();
    let neg = map.plane(Channel::TcNeg);
    let pos = map.plane(Channel::TcPos);
    let w = map.width() as usize;
    find_peaks(&fg, map.width(), map.height(), params)
        .into_iter()
        .map(|p| {
            let i = p.y as usize * w + p.x as usize;
            let (cls, confidence) = if pos[i] > neg[i] {
                (CellClass::TcPos, pos[i])
            } else {
                (CellClass::TcNeg, neg[i])
            };
            Detection::new(p.x, p.y, cls, confidence)
        })
        .collect()
}
