//! Slide-level quantification: tumor proportion score, three-way binning,
//! rater consensus and the agreement / ROC / cutoff-sweep evaluations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::CellClass;
use crate::detect::Detection;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantifyError {
    #[error("slide has no tumor cells; TPS is undefined")]
    NoCells,
    #[error("cutoffs must satisfy 0 <= low < high <= 100, got ({low}, {high})")]
    InvalidCutoffs { low: f64, high: f64 },
    #[error("inputs differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("no samples")]
    Empty,
    #[error("ROC needs at least one positive and one negative slide")]
    SingleClass,
    #[error("TPS value {value} at index {index} is outside [0, 100]")]
    TpsOutOfRange { index: usize, value: f64 },
    #[error("group {0:?} has no values")]
    EmptyGroup(String),
    #[error("sweep step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Per-slide cell counts and tumor proportion score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsResult {
    pub slide_id: String,
    pub n_pos: u64,
    pub n_neg: u64,
    pub tps: f64,
}

impl TpsResult {
    /// `TPS = 100 * #TC+ / (#TC- + #TC+)`.
    pub fn from_counts(
        slide_id: impl Into<String>,
        n_pos: u64,
        n_neg: u64,
    ) -> Result<Self, QuantifyError> {
        let total = n_pos + n_neg;
        if total == 0 {
            return Err(QuantifyError::NoCells);
        }
        Ok(Self {
            slide_id: slide_id.into(),
            n_pos,
            n_neg,
            tps: 100.0 * n_pos as f64 / total as f64,
        })
    }
}

pub fn compute_tps(
    slide_id: impl Into<String>,
    detections: &[Detection],
) -> Result<TpsResult, QuantifyError> {
    let n_pos = detections
        .iter()
        .filter(|d| d.cls == CellClass::TcPos)
        .count() as u64;
    let n_neg = detections.len() as u64 - n_pos;
    TpsResult::from_counts(slide_id, n_pos, n_neg)
}

/// The two TPS cutoffs, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoffs {
    pub low: f64,
    pub high: f64,
}

impl Cutoffs {
    pub fn new(low: f64, high: f64) -> Result<Self, QuantifyError> {
        let c = Self { low, high };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), QuantifyError> {
        if (0.0..=100.0).contains(&self.low)
            && (0.0..=100.0).contains(&self.high)
            && self.low < self.high
        {
            Ok(())
        } else {
            Err(QuantifyError::InvalidCutoffs {
                low: self.low,
                high: self.high,
            })
        }
    }
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            low: 1.0,
            high: 50.0,
        }
    }
}

/// Three-way TPS category. Names follow the default (1%, 50%) cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TpsCategory {
    #[serde(rename = "LT1")]
    Lt1,
    #[serde(rename = "FROM1TO49")]
    From1To49,
    #[serde(rename = "GE50")]
    Ge50,
}

impl TpsCategory {
    pub const ALL: [TpsCategory; 3] = [TpsCategory::Lt1, TpsCategory::From1To49, TpsCategory::Ge50];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TpsCategory::Lt1 => "LT1",
            TpsCategory::From1To49 => "FROM1TO49",
            TpsCategory::Ge50 => "GE50",
        }
    }
}

impl fmt::Display for TpsCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open binning: `[0, low)`, `[low, high)`, `[high, 100]`.
pub fn bin_tps(tps: f64, cutoffs: &Cutoffs) -> TpsCategory {
    if tps < cutoffs.low {
        TpsCategory::Lt1
    } else if tps < cutoffs.high {
        TpsCategory::From1To49
    } else {
        TpsCategory::Ge50
    }
}

/// TPS estimates of one slide from three raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterPanel {
    pub slide_id: String,
    pub tps_by_rater: [f64; 3],
}

impl RaterPanel {
    pub fn new(slide_id: impl Into<String>, tps_by_rater: [f64; 3]) -> Result<Self, QuantifyError> {
        check_tps_range(&tps_by_rater)?;
        Ok(Self {
            slide_id: slide_id.into(),
            tps_by_rater,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    pub category: TpsCategory,
    /// All three raters disagreed; the middle category was assigned.
    pub no_majority: bool,
}

/// Majority category of the three raters' bins. A three-way split resolves to
/// the middle category and is flagged.
pub fn consensus_category(panel: &RaterPanel, cutoffs: &Cutoffs) -> Consensus {
    let mut votes = [0u8; 3];
    for &t in &panel.tps_by_rater {
        votes[bin_tps(t, cutoffs).index()] += 1;
    }
    match TpsCategory::ALL.into_iter().find(|c| votes[c.index()] >= 2) {
        Some(category) => Consensus {
            category,
            no_majority: false,
        },
        None => Consensus {
            category: TpsCategory::From1To49,
            no_majority: true,
        },
    }
}

fn check_pair_lengths<A, B>(a: &[A], b: &[B]) -> Result<(), QuantifyError> {
    if a.len() != b.len() {
        return Err(QuantifyError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(QuantifyError::Empty);
    }
    Ok(())
}

fn check_tps_range(values: &[f64]) -> Result<(), QuantifyError> {
    match values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=100.0).contains(*v))
    {
        Some((index, &value)) => Err(QuantifyError::TpsOutOfRange { index, value }),
        None => Ok(()),
    }
}

/// 3x3 counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn get(&self, gt: TpsCategory, pred: TpsCategory) -> u64 {
        self.0[gt.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; 3] {
        [0, 1, 2].map(|r| self.0[r].iter().sum())
    }

    pub fn column_sums(&self) -> [u64; 3] {
        [0, 1, 2].map(|c| self.0.iter().map(|row| row[c]).sum())
    }
}

pub fn confusion(
    gt: &[TpsCategory],
    pred: &[TpsCategory],
) -> Result<ConfusionMatrix, QuantifyError> {
    check_pair_lengths(gt, pred)?;
    let mut m = ConfusionMatrix::default();
    for (g, p) in gt.iter().zip(pred) {
        m.0[g.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Fraction of slides whose predicted category equals the ground truth.
pub fn accuracy(gt: &[TpsCategory], pred: &[TpsCategory]) -> Result<f64, QuantifyError> {
    check_pair_lengths(gt, pred)?;
    let hits = gt.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1 (both raters used one identical category);
    /// kappa is reported as 1 by convention.
    pub degenerate: bool,
}

/// Unweighted Cohen's kappa `(po - pe) / (1 - pe)` over the three categories.
pub fn cohens_kappa(gt: &[TpsCategory], pred: &[TpsCategory]) -> Result<Kappa, QuantifyError> {
    let m = confusion(gt, pred)?;
    let n = m.total() as f64;
    let po = m.diagonal() as f64 / n;
    let rows = m.row_sums();
    let cols = m.column_sums();
    let pe: f64 = (0..3)
        .map(|i| (rows[i] as f64 / n) * (cols[i] as f64 / n))
        .sum();
    if pe >= 1.0 {
        return Ok(Kappa {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (po - pe) / (1.0 - pe),
        degenerate: false,
    })
}

/// Unweighted mean of per-dataset kappas.
pub fn macro_kappa(per_dataset: &[f64]) -> Result<f64, QuantifyError> {
    if per_dataset.is_empty() {
        return Err(QuantifyError::Empty);
    }
    Ok(stats::mean(per_dataset))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predicted-TPS threshold (positive iff score >= threshold); `None` for
    /// the (0, 0) corner.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over every distinct predicted score and the rank-statistic AUC
/// (ties earn half credit).
pub fn auroc(gt_positive: &[bool], scores: &[f64]) -> Result<Roc, QuantifyError> {
    check_pair_lengths(gt_positive, scores)?;
    let n_pos = gt_positive.iter().filter(|&&p| p).count();
    let n_neg = gt_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(QuantifyError::SingleClass);
    }

    let (ranks, _) = stats::midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(gt_positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    let auc = u / (np * nn);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if gt_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
            threshold: Some(t),
        });
    }
    Ok(Roc { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c2: f64,
    pub accuracy: f64,
}

/// Range of second cutoffs for [`cutoff_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub c1: f64,
    pub c2_min: f64,
    pub c2_max: f64,
    pub step: f64,
}

impl Default for SweepRange {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2_min: 2.0,
            c2_max: 75.0,
            step: 1.0,
        }
    }
}

impl SweepRange {
    /// Every `c2` value visited, `c2_min + k * step` up to `c2_max`.
    pub fn values(&self) -> Result<Vec<f64>, QuantifyError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(QuantifyError::InvalidStep(self.step));
        }
        Cutoffs::new(self.c1, self.c2_min)?;
        Cutoffs::new(self.c1, self.c2_max)?;
        let count = libm::floor((self.c2_max - self.c2_min) / self.step + 1e-9) as usize;
        Ok((0..=count)
            .map(|k| self.c2_min + k as f64 * self.step)
            .collect())
    }
}

/// Three-way accuracy for each second cutoff in `range`, with the first
/// cutoff fixed at `range.c1`.
pub fn cutoff_sweep(
    gt_tps: &[f64],
    pred_tps: &[f64],
    range: &SweepRange,
) -> Result<Vec<SweepPoint>, QuantifyError> {
    check_pair_lengths(gt_tps, pred_tps)?;
    range
        .values()?
        .into_iter()
        .map(|c2| {
            let cut = Cutoffs::new(range.c1, c2)?;
            let gt: Vec<_> = gt_tps.iter().map(|&t| bin_tps(t, &cut)).collect();
            let pred: Vec<_> = pred_tps.iter().map(|&t| bin_tps(t, &cut)).collect();
            Ok(SweepPoint {
                c2,
                accuracy: accuracy(&gt, &pred)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); absent for single-value groups.
    pub sd: Option<f64>,
    /// One-decimal "mean±sd" (or just the mean when `sd` is absent).
    pub report: String,
}

/// Mean and sample standard deviation of every group, in label order.
pub fn group_summary(groups: &BTreeMap<String, Vec<f64>>) -> Result<Vec<GroupStat>, QuantifyError> {
    groups
        .iter()
        .map(|(label, values)| {
            if values.is_empty() {
                return Err(QuantifyError::EmptyGroup(label.clone()));
            }
            let mean = stats::mean(values);
            let sd = stats::sample_variance(values).map(libm::sqrt);
            let report = match sd {
                Some(sd) => format!("{mean:.1}±{sd:.1}"),
                None => format!("{mean:.1}"),
            };
            Ok(GroupStat {
                label: label.clone(),
                n: values.len(),
                mean,
                sd,
                report,
            })
        })
        .collect()
}
