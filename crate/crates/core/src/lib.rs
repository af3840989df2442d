//! Counterfactual-explanation GAN toolkit.
//!
//! Given an abnormal image `x+`, the models here produce an additive
//! discrepancy map `M(x+)` and a counterfactual normal instance
//! `x- = x+ + M(x+)`, via either a two-phase cascaded scheme (unpaired
//! cycle-consistent translation followed by a residual GAN on synthesized
//! pairs) or a single integrated cycle-consistent model whose forward
//! generator emits the map directly. Evaluation scores the maps against
//! ground-truth effect maps with IoU, Dice, NCC, region non-resemblance and
//! masked SSIM.

pub mod autodiff;
pub mod domain;
pub mod error;
pub mod eval;
pub mod explain;
pub mod imageio;
pub mod ingest;
pub mod losses;
pub mod nets;
pub mod syndata;
pub mod train;

pub use domain::{
    AttributionMap, BinaryMask, DatasetSplit, GroundTruth, Image, Label, LabeledSample,
    LossWeights, RangeTag,
};
pub use error::{Error, Result};
