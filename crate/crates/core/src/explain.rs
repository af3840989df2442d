//! Inference: attribution maps, counterfactual instances and binary masks
//! from a trained bundle.

use ndarray::Array2;

use crate::autodiff::Scalar;
use crate::domain::{AttributionMap, BinaryMask, Image, RangeTag};
use crate::error::{Error, Result};
use crate::nets::{image_to_tensor, tensor_to_grid, GeneratorRole, ModelBundle, Scheme};

/// Full inference output for one abnormal input.
pub struct Explanation {
    /// Input in model range.
    pub source: Image,
    pub map: AttributionMap,
    /// Clipped counterfactual, model range.
    pub counterfactual: Image,
    /// `source + map` before clipping; preserves exact additivity.
    pub counterfactual_unclipped: Array2<f32>,
    pub mask: BinaryMask,
    pub threshold_fraction: f32,
}

/// Runs the map generator on a model-range input.
pub fn attribution_map<T: Scalar>(bundle: &ModelBundle<T>, x_pos: &Image) -> Result<AttributionMap> {
    if bundle.scheme == Scheme::CascadedCi {
        return Err(Error::Scheme(
            "this bundle translates whole images; derive the map as G(x+) - x+ \
             via synthesized pairs instead"
                .into(),
        ));
    }
    debug_assert_eq!(bundle.forward_gen.role, GeneratorRole::PosToMap);
    let x = image_to_tensor::<T>(&x_pos.as_model());
    let y = bundle.forward_gen.forward(&x);
    AttributionMap::new(tensor_to_grid(&y))
}

/// Additive counterfactual: `(clip(x+ + M), x+ + M)`, model range.
pub fn counterfactual(x_pos: &Image, map: &AttributionMap) -> Result<(Image, Array2<f32>)> {
    let x = x_pos.as_model();
    if x.shape() != map.shape() {
        return Err(Error::Contract(format!(
            "counterfactual: image {:?} vs map {:?}",
            x.shape(),
            map.shape()
        )));
    }
    let unclipped = x.data() + map.data();
    let clipped = Image::new_clipped(unclipped.clone(), RangeTag::Model11)?;
    Ok((clipped, unclipped))
}

/// Threshold at a fraction of the peak |map| value. An all-zero map gives an
/// all-false mask.
pub fn binarize(map: &AttributionMap, threshold_fraction: f32) -> Result<BinaryMask> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "threshold_fraction must be in (0, 1], got {threshold_fraction}"
        )));
    }
    let peak = map.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        let (r, c) = map.shape();
        return Ok(BinaryMask::new(Array2::from_elem((r, c), false)));
    }
    let cut = threshold_fraction * peak;
    Ok(BinaryMask::new(map.data().mapv(|v| v.abs() >= cut)))
}

/// Convenience wrapper producing the full [`Explanation`].
pub fn explain<T: Scalar>(
    bundle: &ModelBundle<T>,
    x_pos: &Image,
    threshold_fraction: f32,
) -> Result<Explanation> {
    let source = x_pos.as_model();
    let map = attribution_map(bundle, &source)?;
    let (cf, unclipped) = counterfactual(&source, &map)?;
    let mask = binarize(&map, threshold_fraction)?;
    Ok(Explanation {
        source,
        map,
        counterfactual: cf,
        counterfactual_unclipped: unclipped,
        mask,
        threshold_fraction,
    })
}
