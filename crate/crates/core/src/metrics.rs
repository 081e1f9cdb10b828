//! Detection scoring: greedy confidence-ordered matching, F1 / mF1,
//! replicate summaries and the paired Wilcoxon signed-rank test.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{CellAnnotation, CellClass};
use crate::detect::Detection;
use crate::stats;

/// Hit radius in reference-MPP pixels.
pub const DEFAULT_MAX_DIST: f64 = 25.0;

/// Significance level for model comparisons.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Largest non-zero pair count for which the signed-rank p-value is exact.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("max_dist must be a non-negative number, got {0}")]
    InvalidMaxDist(f64),
    #[error("paired samples differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("no samples")]
    Empty,
    #[error("score {index} = {value} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for ClassCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// TP/FP/FN per cell class. Adding counts aggregates over patches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    #[serde(rename = "TC_NEG")]
    pub tc_neg: ClassCounts,
    #[serde(rename = "TC_POS")]
    pub tc_pos: ClassCounts,
}

impl MatchCounts {
    pub fn get(&self, cls: CellClass) -> ClassCounts {
        match cls {
            CellClass::TcNeg => self.tc_neg,
            CellClass::TcPos => self.tc_pos,
        }
    }

    fn get_mut(&mut self, cls: CellClass) -> &mut ClassCounts {
        match cls {
            CellClass::TcNeg => &mut self.tc_neg,
            CellClass::TcPos => &mut self.tc_pos,
        }
    }
}

impl Add for MatchCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tc_neg: self.tc_neg + o.tc_neg,
            tc_pos: self.tc_pos + o.tc_pos,
        }
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Match predictions to ground truth independently per class.
///
/// Predictions are visited by decreasing confidence (ties: smaller y, then
/// smaller x, then input order). Each takes the nearest still-unmatched
/// ground-truth cell within `max_dist` (ties: lower GT index) as a TP, or
/// counts as an FP when none is in range. Leftover ground truth is FN.
pub fn greedy_match(
    preds: &[Detection],
    gts: &[CellAnnotation],
    max_dist: f64,
) -> Result<MatchCounts, MetricsError> {
    if !(max_dist >= 0.0 && max_dist.is_finite()) {
        return Err(MetricsError::InvalidMaxDist(max_dist));
    }
    let mut counts = MatchCounts::default();
    for cls in CellClass::ALL {
        let class_preds: Vec<&Detection> = preds.iter().filter(|p| p.cls == cls).collect();
        let class_gts: Vec<(u32, u32)> = gts
            .iter()
            .filter(|g| g.cls == cls)
            .map(|g| (g.x, g.y))
            .collect();
        *counts.get_mut(cls) = match_one_class(&class_preds, &class_gts, max_dist);
    }
    Ok(counts)
}

fn match_one_class(preds: &[&Detection], gts: &[(u32, u32)], max_dist: f64) -> ClassCounts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (preds[a], preds[b]);
        pb.confidence
            .total_cmp(&pa.confidence)
            .then((pa.y, pa.x).cmp(&(pb.y, pb.x)))
            .then(a.cmp(&b))
    });

    let cell = max_dist.max(1.0);
    let bucket = |x: u32, y: u32| {
        (
            libm::floor(x as f64 / cell) as i64,
            libm::floor(y as f64 / cell) as i64,
        )
    };
    let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, &(x, y)) in gts.iter().enumerate() {
        grid.entry(bucket(x, y)).or_default().push(i);
    }
    let limit = max_dist * max_dist;

    let mut tp = 0u64;
    let mut fp = 0u64;
    for i in order {
        let p = preds[i];
        let (bx, by) = bucket(p.x, p.y);
        let mut best: Option<(f64, usize)> = None;
        for gy in by - 1..=by + 1 {
            for gx in bx - 1..=bx + 1 {
                let Some(members) = grid.get(&(gx, gy)) else {
                    continue;
                };
                for &g in members {
                    let dx = gts[g].0 as f64 - p.x as f64;
                    let dy = gts[g].1 as f64 - p.y as f64;
                    let d2 = dx * dx + dy * dy;
                    if d2 > limit {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bg)) => d2 < bd || (d2 == bd && g < bg),
                    };
                    if better {
                        best = Some((d2, g));
                    }
                }
            }
        }
        match best {
            Some((_, g)) => {
                tp += 1;
                let key = bucket(gts[g].0, gts[g].1);
                let members = grid.get_mut(&key).expect("matched gt is indexed");
                let pos = members.iter().position(|&m| m == g).expect("gt present");
                members.swap_remove(pos);
            }
            None => fp += 1,
        }
    }
    ClassCounts {
        tp,
        fp,
        fn_: gts.len() as u64 - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predictions and no ground truth; scored 1.0 by convention.
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    #[serde(rename = "TC_NEG")]
    pub tc_neg: ClassScore,
    #[serde(rename = "TC_POS")]
    pub tc_pos: ClassScore,
    pub mf1: f64,
}

impl F1Report {
    pub fn get(&self, cls: CellClass) -> &ClassScore {
        match cls {
            CellClass::TcNeg => &self.tc_neg,
            CellClass::TcPos => &self.tc_pos,
        }
    }

    pub fn has_empty_class(&self) -> bool {
        self.tc_neg.empty || self.tc_pos.empty
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_score(c: ClassCounts) -> ClassScore {
    let empty = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    let (precision, recall, f1) = if empty {
        (1.0, 1.0, 1.0)
    } else {
        let f1 = c.tp as f64 / (c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64);
        (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_), f1)
    };
    ClassScore {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        precision,
        recall,
        f1,
        empty,
    }
}

/// Per-class precision, recall and `F1 = TP / (TP + (FP + FN) / 2)`, and
/// their mean over the two classes.
pub fn f1_from_counts(c: &MatchCounts) -> F1Report {
    let tc_neg = class_score(c.tc_neg);
    let tc_pos = class_score(c.tc_pos);
    F1Report {
        tc_neg,
        tc_pos,
        mf1: (tc_neg.f1 + tc_pos.f1) / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub method: PValueMethod,
    /// Every difference was zero; p is reported as 1.
    pub degenerate: bool,
}

/// Paired two-sided Wilcoxon signed-rank test of `a - b`.
///
/// Zero differences are dropped and tied magnitudes get midranks. With at
/// most [`EXACT_WILCOXON_MAX_N`] pairs the p-value is exact over all `2^n`
/// sign assignments; above that a tie-corrected normal approximation is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            method: PValueMethod::Exact,
            degenerate: true,
        });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| libm::fabs(*d)).collect();
    let (ranks, ties) = stats::midranks(&magnitudes);
    let t_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = t_plus.min(total - t_plus);

    let (p_value, method) = if n <= EXACT_WILCOXON_MAX_N {
        (exact_signed_rank_p(&ranks, statistic), PValueMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (statistic - mean) / libm::sqrt(var);
        (stats::two_sided_normal_p(z), PValueMethod::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n,
        method,
        degenerate: false,
    })
}

/// `min(1, 2 * P(T+ <= w))` under the null, where every rank's sign is an
/// independent fair coin. Midranks are doubled so the positive rank sum is an
/// integer and its distribution is counted exactly.
fn exact_signed_rank_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| libm::round(r * 2.0) as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max_sum + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2 = libm::round(w * 2.0) as usize;
    let tail: u64 = counts[..=w2.min(max_sum)].iter().sum();
    let total = (1u64 << ranks.len()) as f64;
    (2.0 * tail as f64 / total).min(1.0)
}

/// mF1 (or any [0, 1] score) of repeated stochastic runs of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScores {
    pub model_id: String,
    pub scores: Vec<f64>,
}

impl ReplicateScores {
    pub fn new(model_id: impl Into<String>, scores: Vec<f64>) -> Result<Self, MetricsError> {
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(MetricsError::ScoreOutOfRange { index, value });
        }
        Ok(Self {
            model_id: model_id.into(),
            scores,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn replicate_summary(s: &ReplicateScores) -> Result<ReplicateSummary, MetricsError> {
    let median = stats::median(&s.scores).ok_or(MetricsError::Empty)?;
    let min = s.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ReplicateSummary { median, min, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model_a: String,
    pub model_b: String,
    pub summary_a: ReplicateSummary,
    pub summary_b: ReplicateSummary,
    #[serde(rename = "W")]
    pub statistic: f64,
    pub p: f64,
    pub method: PValueMethod,
    pub degenerate: bool,
    pub significant: bool,
}

/// Pair replicate `i` of `a` with replicate `i` of `b` and test the paired
/// differences.
pub fn compare_models(
    a: &ReplicateScores,
    b: &ReplicateScores,
) -> Result<ModelComparison, MetricsError> {
    if a.scores.len() != b.scores.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.scores.len(),
            b: b.scores.len(),
        });
    }
    let test = wilcoxon_signed_rank(&a.scores, &b.scores)?;
    Ok(ModelComparison {
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        summary_a: replicate_summary(a)?,
        summary_b: replicate_summary(b)?,
        statistic: test.statistic,
        p: test.p_value,
        method: test.method,
        degenerate: test.degenerate,
        significant: !test.degenerate && test.p_value < SIGNIFICANCE_LEVEL,
    })
}
