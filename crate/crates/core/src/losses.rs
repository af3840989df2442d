//! Scalar loss functions for all three training objectives.
//!
//! These are pure functions of discriminator probability grids and image
//! grids, used both for metric logging and as oracles for the graph-level
//! losses the trainer assembles. Expectations are means over every element
//! of the supplied grids; L1 norms are means per pixel.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::domain::LossWeights;
use crate::error::{Error, Result};

/// A composite objective value with its named components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted component values keyed by term name.
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    fn new(total: f64, parts: &[(&str, f64)]) -> Self {
        LossBreakdown {
            total,
            components: parts.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

fn check_prob(name: &str, grid: &ArrayD<f64>) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Contract(format!("{name}: empty probability grid")));
    }
    if grid.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Contract(format!(
            "{name}: probabilities must lie strictly in (0, 1)"
        )));
    }
    Ok(())
}

fn mean_ln(grid: &ArrayD<f64>) -> f64 {
    grid.iter().map(|v| v.ln()).sum::<f64>() / grid.len() as f64
}

fn mean_ln_one_minus(grid: &ArrayD<f64>) -> f64 {
    grid.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / grid.len() as f64
}

fn check_shapes(name: &str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract(format!("{name}: empty grid")));
    }
    Ok(())
}

fn mean_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Joint adversarial value of the two translation cycles:
/// `E[ln D+(x+)] + E[ln D-(x-)] + E[ln(1 - D+(G(x-)))] + E[ln(1 - D-(G(x+)))]`.
pub fn gan_loss(
    d_pos_real: &ArrayD<f64>,
    d_neg_real: &ArrayD<f64>,
    d_pos_fake: &ArrayD<f64>,
    d_neg_fake: &ArrayD<f64>,
) -> Result<f64> {
    check_prob("d_pos_real", d_pos_real)?;
    check_prob("d_neg_real", d_neg_real)?;
    check_prob("d_pos_fake", d_pos_fake)?;
    check_prob("d_neg_fake", d_neg_fake)?;
    Ok(mean_ln(d_pos_real)
        + mean_ln(d_neg_real)
        + mean_ln_one_minus(d_pos_fake)
        + mean_ln_one_minus(d_neg_fake))
}

/// Two-sided reconstruction error of the translation cycle.
pub fn cycle_consistency_loss(
    x_pos: &ArrayD<f64>,
    x_pos_rec: &ArrayD<f64>,
    x_neg: &ArrayD<f64>,
    x_neg_rec: &ArrayD<f64>,
) -> Result<f64> {
    check_shapes("cycle forward", x_pos, x_pos_rec)?;
    check_shapes("cycle backward", x_neg, x_neg_rec)?;
    Ok(mean_abs_diff(x_pos_rec, x_pos) + mean_abs_diff(x_neg_rec, x_neg))
}

/// Composite objective of the unpaired translation phase.
pub fn ci_objective(gan: f64, cc: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown::new(gan + w.lambda_cc * cc, &[("gan", gan), ("cycle", cc)])
}

/// L1 error of the additive residual against the paired target.
pub fn residual_l1(x_pos: &ArrayD<f64>, map: &ArrayD<f64>, x_neg: &ArrayD<f64>) -> Result<f64> {
    check_shapes("residual map", x_pos, map)?;
    check_shapes("residual target", x_pos, x_neg)?;
    let sum = x_pos
        .iter()
        .zip(map.iter())
        .zip(x_neg.iter())
        .map(|((p, m), n)| (n - (p + m)).abs())
        .sum::<f64>();
    Ok(sum / x_pos.len() as f64)
}

/// Adversarial value of the residual phase:
/// `E[ln D-(x-)] + E[ln(1 - D-(x+ + M(x+)))]`.
pub fn residual_gan_loss(d_neg_real: &ArrayD<f64>, d_neg_fake: &ArrayD<f64>) -> Result<f64> {
    check_prob("d_neg_real", d_neg_real)?;
    check_prob("d_neg_fake", d_neg_fake)?;
    Ok(mean_ln(d_neg_real) + mean_ln_one_minus(d_neg_fake))
}

/// Composite objective of the residual phase.
pub fn rgan_objective(rgan: f64, l1r: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown::new(rgan + w.lambda_l1 * l1r, &[("rgan", rgan), ("l1r", l1r)])
}

/// Adversarial value of the integrated scheme. Structurally identical to
/// [`gan_loss`]; the fourth grid is evaluated on `x+ + M(x+)` by the caller.
pub fn cx_gan_loss(
    d_pos_real: &ArrayD<f64>,
    d_neg_real: &ArrayD<f64>,
    d_pos_fake_from_neg: &ArrayD<f64>,
    d_neg_fake_from_mapped: &ArrayD<f64>,
) -> Result<f64> {
    gan_loss(d_pos_real, d_neg_real, d_pos_fake_from_neg, d_neg_fake_from_mapped)
}

/// Two-sided cycle error of the integrated scheme. The forward term compares
/// the back-translation of the mapped image to `x+`; the backward term
/// compares `back_img + map_of_back` to `x-`. Callers choosing the literal
/// printed backward variant pass `x+` in the `back_img` slot.
pub fn cx_cycle_loss(
    x_pos: &ArrayD<f64>,
    map_fwd: &ArrayD<f64>,
    back_of_mapped: &ArrayD<f64>,
    x_neg: &ArrayD<f64>,
    back_img: &ArrayD<f64>,
    map_of_back: &ArrayD<f64>,
) -> Result<f64> {
    check_shapes("cx forward map", x_pos, map_fwd)?;
    check_shapes("cx forward", x_pos, back_of_mapped)?;
    check_shapes("cx backward image", x_neg, back_img)?;
    check_shapes("cx backward map", x_neg, map_of_back)?;
    let fwd = mean_abs_diff(back_of_mapped, x_pos);
    let bwd = back_img
        .iter()
        .zip(map_of_back.iter())
        .zip(x_neg.iter())
        .map(|((b, m), n)| (b + m - n).abs())
        .sum::<f64>()
        / x_neg.len() as f64;
    Ok(fwd + bwd)
}

/// Composite objective of the integrated scheme.
pub fn cx_objective(cxgan: f64, cxcc: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown::new(cxgan + w.lambda_cc * cxcc, &[("cxgan", cxgan), ("cxcc", cxcc)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    fn grid(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[2, 3]), v)
    }

    fn px(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1, 1]), v)
    }

    #[test]
    fn gan_loss_at_half_is_four_ln_half() {
        let g = grid(0.5);
        let v = gan_loss(&g, &g, &g, &g).unwrap();
        assert_relative_eq!(v, 4.0 * 0.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(v, -2.772589, max_relative = 1e-6);
    }

    #[test]
    fn gan_loss_perfect_discriminator_limit() {
        let eps = 1e-9;
        let v = gan_loss(&grid(1.0 - eps), &grid(1.0 - eps), &grid(eps), &grid(eps)).unwrap();
        assert!(v.abs() < 1e-8);
    }

    #[test]
    fn gan_loss_single_pixel_example() {
        let v = gan_loss(&px(0.9), &px(0.8), &px(0.2), &px(0.1)).unwrap();
        let want = 0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln() + 0.9f64.ln();
        assert_relative_eq!(v, want, max_relative = 1e-12);
        // exact value is -0.657008; the looser decimal is a sanity check only
        assert_relative_eq!(v, -0.65678, max_relative = 1e-3);
    }

    #[test]
    fn gan_loss_rejects_out_of_domain() {
        assert!(gan_loss(&px(1.0), &px(0.5), &px(0.5), &px(0.5)).is_err());
        assert!(gan_loss(&px(0.5), &px(0.0), &px(0.5), &px(0.5)).is_err());
    }

    #[test]
    fn cycle_loss_examples() {
        let x = grid(0.4);
        assert_eq!(cycle_consistency_loss(&x, &x, &x, &x).unwrap(), 0.0);
        let off = grid(0.5);
        let v = cycle_consistency_loss(&x, &off, &x, &off).unwrap();
        assert_relative_eq!(v, 0.2, max_relative = 1e-12);
        let v = cycle_consistency_loss(&x, &x, &x, &grid(0.7)).unwrap();
        assert_relative_eq!(v, 0.3, max_relative = 1e-12);
        assert!(cycle_consistency_loss(&x, &px(0.4), &x, &x).is_err());
    }

    #[test]
    fn ci_objective_examples() {
        let w = LossWeights { lambda_cc: 10.0, lambda_l1: 100.0 };
        assert_relative_eq!(ci_objective(-2.0, 0.5, &w).total, 3.0);
        assert_eq!(ci_objective(-2.0, 0.0, &w).total, -2.0);
        let w0 = LossWeights { lambda_cc: 0.0, lambda_l1: 100.0 };
        assert_eq!(ci_objective(-2.0, 0.9, &w0).total, -2.0);
    }

    #[test]
    fn residual_l1_examples() {
        let pos = grid(0.2);
        let neg = grid(0.5);
        let exact = grid(0.3);
        assert_eq!(residual_l1(&pos, &exact, &neg).unwrap(), 0.0);
        assert_relative_eq!(residual_l1(&pos, &grid(0.0), &neg).unwrap(), 0.3, max_relative = 1e-12);
        assert_relative_eq!(residual_l1(&pos, &grid(0.1), &neg).unwrap(), 0.2, max_relative = 1e-12);
    }

    #[test]
    fn residual_gan_examples() {
        let v = residual_gan_loss(&grid(0.5), &grid(0.5)).unwrap();
        assert_relative_eq!(v, 2.0 * 0.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(v, -1.386294, max_relative = 1e-6);
        let v = residual_gan_loss(&px(0.9), &px(0.4)).unwrap();
        assert_relative_eq!(v, 0.9f64.ln() + 0.6f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(v, -0.61619, max_relative = 1e-4);
        let eps = 1e-9;
        assert!(residual_gan_loss(&grid(1.0 - eps), &grid(eps)).unwrap().abs() < 1e-8);
    }

    #[test]
    fn rgan_objective_examples() {
        let w = LossWeights { lambda_cc: 10.0, lambda_l1: 100.0 };
        assert_relative_eq!(rgan_objective(-1.4, 0.1, &w).total, 8.6, max_relative = 1e-12);
        assert_eq!(rgan_objective(-1.4, 0.0, &w).total, -1.4);
    }

    #[test]
    fn cx_gan_matches_gan_structurally() {
        let (a, b, c, d) = (px(0.7), px(0.6), px(0.3), px(0.2));
        assert_eq!(
            cx_gan_loss(&a, &b, &c, &d).unwrap(),
            gan_loss(&a, &b, &c, &d).unwrap()
        );
        let g = grid(0.5);
        assert_relative_eq!(
            cx_gan_loss(&g, &g, &g, &g).unwrap(),
            -2.772589,
            max_relative = 1e-6
        );
    }

    #[test]
    fn cx_cycle_examples() {
        let x = grid(0.4);
        let zero = grid(0.0);
        // map = 0, back generator = identity, x_neg = x_pos
        assert_eq!(cx_cycle_loss(&x, &zero, &x, &x, &x, &zero).unwrap(), 0.0);
        // forward off by 0.05, backward exact
        let v = cx_cycle_loss(&x, &zero, &grid(0.45), &x, &x, &zero).unwrap();
        assert_relative_eq!(v, 0.05, max_relative = 1e-10);
        // both off by 0.1
        let v = cx_cycle_loss(&x, &zero, &grid(0.5), &x, &grid(0.5), &zero).unwrap();
        assert_relative_eq!(v, 0.2, max_relative = 1e-10);
    }

    #[test]
    fn cx_objective_examples() {
        let w = LossWeights { lambda_cc: 10.0, lambda_l1: 100.0 };
        assert_relative_eq!(cx_objective(-2.77, 0.2, &w).total, -0.77, max_relative = 1e-10);
        assert_eq!(cx_objective(-2.77, 0.0, &w).total, -2.77);
    }

    #[test]
    fn breakdown_total_matches_weighted_sum() {
        let w = LossWeights { lambda_cc: 7.5, lambda_l1: 33.0 };
        let b = ci_objective(-1.3, 0.4, &w);
        let recon = b.components["gan"] + w.lambda_cc * b.components["cycle"];
        assert!((b.total - recon).abs() < 1e-6);
        let b = rgan_objective(-0.9, 0.02, &w);
        let recon = b.components["rgan"] + w.lambda_l1 * b.components["l1r"];
        assert!((b.total - recon).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn lambda_linearity(gan in -5.0..5.0f64, cc in 0.0..2.0f64, lam in 0.0..50.0f64) {
            let w1 = LossWeights { lambda_cc: lam, lambda_l1: 1.0 };
            let w2 = LossWeights { lambda_cc: 2.0 * lam, lambda_l1: 1.0 };
            let d1 = ci_objective(gan, cc, &w1).total - gan;
            let d2 = ci_objective(gan, cc, &w2).total - gan;
            prop_assert!((d2 - 2.0 * d1).abs() < 1e-9);
        }

        #[test]
        fn cycle_loss_nonnegative(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let v = cycle_consistency_loss(&grid(a), &grid(b), &grid(b), &grid(a)).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(v.is_finite());
        }

        #[test]
        fn residual_l1_zero_iff_exact(p in -1.0..1.0f64, n in -1.0..1.0f64) {
            let exact = grid(n - p);
            prop_assert!(residual_l1(&grid(p), &exact, &grid(n)).unwrap() < 1e-15);
        }
    }
}
