//! Shared domain types: images with value-range conventions, attribution maps,
//! labeled samples and dataset splits.
//!
//! Two value-range conventions exist side by side. Files on disk and metric
//! inputs use `Storage01` (intensities in `[0, 1]`); everything entering a
//! network or a loss uses `Model11` (intensities in `[-1, 1]`). The tag travels
//! with the image and conversions are explicit, so a loss can never silently
//! consume a storage-range image.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value-range convention of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Intensities in `[0, 1]` (disk/storage convention).
    Storage01,
    /// Intensities in `[-1, 1]` (model/loss convention).
    Model11,
}

/// A single-channel 2D intensity grid tagged with its range convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f32>,
    range: RangeTag,
}

impl Image {
    /// Builds an image, enforcing finiteness and the tagged range.
    pub fn new(data: Array2<f32>, range: RangeTag) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Contract("image must be at least 1x1".into()));
        }
        let (lo, hi) = match range {
            RangeTag::Storage01 => (0.0, 1.0),
            RangeTag::Model11 => (-1.0, 1.0),
        };
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::Contract("image contains non-finite values".into()));
            }
            if v < lo || v > hi {
                return Err(Error::Contract(format!(
                    "value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Image { data, range })
    }

    /// Builds an image clipping values into the tagged range first.
    pub fn new_clipped(mut data: Array2<f32>, range: RangeTag) -> Result<Self> {
        let (lo, hi) = match range {
            RangeTag::Storage01 => (0.0f32, 1.0f32),
            RangeTag::Model11 => (-1.0, 1.0),
        };
        data.mapv_inplace(|v| v.clamp(lo, hi));
        Image::new(data, range)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    /// Maps a storage-range image into the model convention: `2x - 1`.
    pub fn to_model_range(&self) -> Result<Image> {
        if self.range != RangeTag::Storage01 {
            return Err(Error::Contract(
                "to_model_range expects a Storage01-tagged image".into(),
            ));
        }
        Ok(Image {
            data: self.data.mapv(|v| 2.0 * v - 1.0),
            range: RangeTag::Model11,
        })
    }

    /// Maps a model-range image back into storage: `(x + 1) / 2`.
    pub fn from_model_range(&self) -> Result<Image> {
        if self.range != RangeTag::Model11 {
            return Err(Error::Contract(
                "from_model_range expects a Model11-tagged image".into(),
            ));
        }
        Ok(Image {
            data: self.data.mapv(|v| (v + 1.0) / 2.0),
            range: RangeTag::Storage01,
        })
    }

    /// Returns the image in storage range regardless of its current tag.
    pub fn as_storage(&self) -> Image {
        match self.range {
            RangeTag::Storage01 => self.clone(),
            RangeTag::Model11 => self.from_model_range().expect("tag checked"),
        }
    }

    /// Returns the image in model range regardless of its current tag.
    pub fn as_model(&self) -> Image {
        match self.range {
            RangeTag::Model11 => self.clone(),
            RangeTag::Storage01 => self.to_model_range().expect("tag checked"),
        }
    }
}

/// Signed additive discrepancy map `M(x+)`, same shape as its source image.
///
/// In the model convention values live in `[-2, 2]`, the exact range of a
/// difference of two `[-1, 1]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    data: Array2<f32>,
}

impl AttributionMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Contract("map must be at least 1x1".into()));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::Contract("map contains non-finite values".into()));
            }
            if v < -2.0 || v > 2.0 {
                return Err(Error::Contract(format!(
                    "map value {v} outside [-2, 2]"
                )));
            }
        }
        Ok(AttributionMap { data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        AttributionMap {
            data: Array2::zeros((rows, cols)),
        }
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// A 2D boolean mask, shape-matched to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<bool>,
}

impl BinaryMask {
    pub fn new(data: Array2<bool>) -> Self {
        BinaryMask { data }
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.len()
    }
}

/// Class label of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Abnormal class `c+`.
    Positive,
    /// Normal class `c-`.
    Negative,
}

/// Ground truth attached to a sample: either the additive effect map itself or
/// a binary lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    EffectMap(AttributionMap),
    Mask(BinaryMask),
}

impl GroundTruth {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GroundTruth::EffectMap(m) => m.shape(),
            GroundTruth::Mask(m) => m.shape(),
        }
    }

    /// Binary lesion support: nonzero pixels of the effect map, or the mask itself.
    pub fn mask(&self) -> BinaryMask {
        match self {
            GroundTruth::EffectMap(m) => BinaryMask::new(m.data().mapv(|v| v != 0.0)),
            GroundTruth::Mask(m) => m.clone(),
        }
    }
}

/// Image plus class label plus optional pixel-level ground truth.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub ground_truth: Option<GroundTruth>,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(gt) = &self.ground_truth {
            if gt.shape() != self.image.shape() {
                return Err(Error::Contract(format!(
                    "ground truth shape {:?} does not match image shape {:?} for sample {}",
                    gt.shape(),
                    self.image.shape(),
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Train/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that train and test sample ids are disjoint.
    pub fn validate(&self) -> Result<()> {
        let train_ids: std::collections::HashSet<&str> =
            self.train.iter().map(|s| s.id.as_str()).collect();
        for s in &self.test {
            if train_ids.contains(s.id.as_str()) {
                return Err(Error::Contract(format!(
                    "sample {} appears in both train and test",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Weights of the composite objectives: cycle-consistency and residual L1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Canonical CycleGAN / pix2pix settings.
        LossWeights {
            lambda_cc: 10.0,
            lambda_l1: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_cc.is_finite() || self.lambda_cc < 0.0 {
            return Err(Error::Config("lambda_cc must be finite and >= 0".into()));
        }
        if !self.lambda_l1.is_finite() || self.lambda_l1 < 0.0 {
            return Err(Error::Config("lambda_l1 must be finite and >= 0".into()));
        }
        Ok(())
    }
}
