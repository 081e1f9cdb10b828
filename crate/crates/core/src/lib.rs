//! Allocation-only core of the IHC quantification toolkit.
//!
//! Everything here is a pure function over in-memory buffers: resampling and
//! tissue masking of RGB patches, point-annotation rasterization, stain
//! deconvolution and the baseline probability backend, peak extraction,
//! detection matching and rank statistics, slide-level TPS evaluation, the
//! synthetic ground-truth generator and embedding analysis.
//!
//! File formats, manifests, worker pools and the command line live in the
//! `ihcq` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod annotations;
pub mod detect;
pub mod embed;
pub mod inference;
pub mod metrics;
pub mod quantify;
pub mod slide;
pub mod stats;
pub mod synth;

pub use annotations::{CellAnnotation, CellClass, Her2Score, LabelMap};
pub use detect::{Detection, PeakParams};
pub use inference::{InferenceBackend, ProbabilityMap, ReplicateSet, StainParams};
pub use metrics::{F1Report, MatchCounts, ReplicateScores};
pub use quantify::{ConfusionMatrix, Cutoffs, RaterPanel, TpsCategory, TpsResult};
pub use slide::{PatchImage, ResolutionSpec, TissueMask, REFERENCE_MPP};
pub use synth::{SynthSpec, SynthTruth};
