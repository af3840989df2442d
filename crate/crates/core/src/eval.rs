//! Quantitative metrics: IoU, Dice, NCC, region-wise non-resemblance and
//! masked SSIM, plus dataset-level reporting.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::domain::{BinaryMask, GroundTruth, Image, Label, LabeledSample};
use crate::error::{Error, Result};
use crate::explain::{attribution_map, binarize, counterfactual};
use crate::nets::ModelBundle;

fn check_mask_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "mask shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_mask_shapes(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dice coefficient; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_mask_shapes(a, b)?;
    let mut inter = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        inter += (x && y) as usize;
    }
    let denom = a.count() + b.count();
    Ok(if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 })
}

/// Normalized cross correlation of two grids: mean of the product of the
/// standardized values (population std). Zero variance is a metric error.
pub fn ncc(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("ncc shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len() as f64;
    if n == 0.0 {
        return Err(Error::Contract("ncc: empty grids".into()));
    }
    let stats = |g: &Array2<f32>| -> Result<(f64, f64)> {
        let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::Metric("ncc: zero-variance input".into()));
        }
        Ok((mean, var.sqrt()))
    };
    let (ma, sa) = stats(a)?;
    let (mb, sb) = stats(b)?;
    let v = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - ma) / sa * ((y as f64 - mb) / sb))
        .sum::<f64>()
        / n;
    Ok(v.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonResMode {
    /// Region-wise mean absolute change, storage range. Higher = more change.
    Absolute,
    /// The printed formula: 1 minus the signed mean change per region.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonResemblance {
    pub lesion: f64,
    pub normal: f64,
    pub total: f64,
}

/// Region-wise dissimilarity between the input and its counterfactual, split
/// by the ground-truth lesion mask. Both images are compared in storage range.
pub fn non_resemblance(
    x_pos: &Image,
    ci: &Image,
    gt: &BinaryMask,
    mode: NonResMode,
) -> Result<NonResemblance> {
    let a = x_pos.as_storage();
    let b = ci.as_storage();
    if a.shape() != b.shape() || a.shape() != gt.shape() {
        return Err(Error::Contract("non_resemblance: shape mismatch".into()));
    }
    if gt.is_empty() || gt.is_full() {
        return Err(Error::Metric("non_resemblance needs a nonempty, non-full gt mask".into()));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for ((&x, &y), &m) in a.data().iter().zip(b.data().iter()).zip(gt.data().iter()) {
        let d = y as f64 - x as f64;
        let idx = m as usize;
        sums[idx] += if mode == NonResMode::Absolute { d.abs() } else { d };
        counts[idx] += 1;
    }
    let region = |i: usize| {
        let mean = sums[i] / counts[i] as f64;
        match mode {
            NonResMode::Absolute => mean,
            NonResMode::Literal => 1.0 - mean,
        }
    };
    let lesion = region(1);
    let normal = region(0);
    Ok(NonResemblance { lesion, normal, total: (lesion + normal) / 2.0 })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW as isize - 1) / 2;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let dy = i as isize - c;
        let dx = j as isize - c;
        (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.mapv_inplace(|v| v / s);
    w
}

/// Mean local SSIM with an 11x11 Gaussian window over valid positions,
/// dynamic range 1 (storage images).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let x = a.as_storage();
    let y = b.as_storage();
    if x.shape() != y.shape() {
        return Err(Error::Contract("ssim: shape mismatch".into()));
    }
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let xd = x.data();
    let yd = y.data();
    let mut total = 0.0f64;
    let mut n = 0usize;
    for i0 in 0..=(h - SSIM_WINDOW) {
        for j0 in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let g = win[[di, dj]];
                    let xv = xd[[i0 + di, j0 + dj]] as f64;
                    let yv = yd[[i0 + di, j0 + dj]] as f64;
                    mx += g * xv;
                    my += g * yv;
                    mxx += g * xv * xv;
                    myy += g * yv * yv;
                    mxy += g * xv * yv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += val;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// SSIM after zeroing the lesion region in both images.
pub fn masked_ssim(x_pos: &Image, ci: &Image, gt: &BinaryMask) -> Result<f64> {
    let a = x_pos.as_storage();
    let b = ci.as_storage();
    if a.shape() != gt.shape() || b.shape() != gt.shape() {
        return Err(Error::Contract("masked_ssim: shape mismatch".into()));
    }
    let zero = |img: &Image| {
        let mut d = img.data().clone();
        for (v, &m) in d.iter_mut().zip(gt.data().iter()) {
            if m {
                *v = 0.0;
            }
        }
        Image::new(d, crate::domain::RangeTag::Storage01)
    };
    ssim(&zero(&a)?, &zero(&b)?)
}

/// One evaluated test sample; metric fields are `None` when undefined
/// (zero-variance NCC) or when the sample is skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub ncc: Option<f64>,
    pub nonres_lesion: Option<f64>,
    pub nonres_normal: Option<f64>,
    pub nonres_total: Option<f64>,
    pub nonres_literal_total: Option<f64>,
    pub ssim_masked: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SampleMetrics>,
    pub threshold_fraction: f32,
    pub checkpoint_hash: String,
}

const METRIC_COLUMNS: [&str; 8] = [
    "iou",
    "dice",
    "ncc",
    "nonres_lesion",
    "nonres_normal",
    "nonres_total",
    "nonres_literal_total",
    "ssim_masked",
];

impl MetricsReport {
    fn column(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match name {
                "iou" => r.iou,
                "dice" => r.dice,
                "ncc" => r.ncc,
                "nonres_lesion" => r.nonres_lesion,
                "nonres_normal" => r.nonres_normal,
                "nonres_total" => r.nonres_total,
                "nonres_literal_total" => r.nonres_literal_total,
                "ssim_masked" => r.ssim_masked,
                _ => None,
            })
            .collect()
    }

    /// Mean/std (population) of one metric over the rows where it is defined.
    pub fn aggregate(&self, name: &str) -> Option<Aggregate> {
        let vals = self.column(name);
        if vals.is_empty() {
            return None;
        }
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Aggregate { mean, std: var.sqrt(), n })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id");
        for c in METRIC_COLUMNS {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",skipped\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.id,
                cell(r.iou),
                cell(r.dice),
                cell(r.ncc),
                cell(r.nonres_lesion),
                cell(r.nonres_normal),
                cell(r.nonres_total),
                cell(r.nonres_literal_total),
                cell(r.ssim_masked),
                r.skipped.as_deref().unwrap_or("")
            );
        }
        s
    }

    /// Plain-text summary table: one row per metric, mean / std / n.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "threshold_fraction: {}\ncheckpoint: {}\n{:<22} {:>10} {:>10} {:>6}\n",
            self.threshold_fraction, self.checkpoint_hash, "metric", "mean", "std", "n"
        );
        for c in METRIC_COLUMNS {
            match self.aggregate(c) {
                Some(a) => {
                    let _ = writeln!(s, "{c:<22} {:>10.4} {:>10.4} {:>6}", a.mean, a.std, a.n);
                }
                None => {
                    let _ = writeln!(s, "{c:<22} {:>10} {:>10} {:>6}", "-", "-", 0);
                }
            }
        }
        let skipped = self.rows.iter().filter(|r| r.skipped.is_some()).count();
        let _ = writeln!(s, "rows: {} (skipped: {skipped})", self.rows.len());
        s
    }
}

/// Scores every positive test sample that carries ground truth. The map is
/// scored against the negated effect map (a good map removes the added
/// effect, so it points the opposite way). Positives without ground truth
/// become skipped rows.
pub fn evaluate_dataset<T: Scalar>(
    bundle: &ModelBundle<T>,
    samples: &[LabeledSample],
    threshold_fraction: f32,
    checkpoint_hash: &str,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for s in samples {
        if s.label != Label::Positive {
            continue;
        }
        let skipped_row = |reason: String| SampleMetrics {
            id: s.id.clone(),
            iou: None,
            dice: None,
            ncc: None,
            nonres_lesion: None,
            nonres_normal: None,
            nonres_total: None,
            nonres_literal_total: None,
            ssim_masked: None,
            skipped: Some(reason),
        };
        let Some(gt) = &s.ground_truth else {
            rows.push(skipped_row("missing ground truth".into()));
            continue;
        };
        let map = attribution_map(bundle, &s.image)?;
        let gt_mask = gt.mask();
        let pred_mask = binarize(&map, threshold_fraction)?;
        let (ci, _) = counterfactual(&s.image.as_model(), &map)?;

        let iou_v = iou(&pred_mask, &gt_mask)?;
        let dice_v = dice(&pred_mask, &gt_mask)?;
        let ncc_v = match gt {
            GroundTruth::EffectMap(g) => ncc(g.data(), &map.data().mapv(|v| -v)).ok(),
            GroundTruth::Mask(m) => {
                let g = m.data().mapv(|b| b as u8 as f32);
                ncc(&g, &map.data().mapv(|v| -v)).ok()
            }
        };
        let nr = non_resemblance(&s.image, &ci, &gt_mask, NonResMode::Absolute).ok();
        let nr_lit = non_resemblance(&s.image, &ci, &gt_mask, NonResMode::Literal).ok();
        let ms = masked_ssim(&s.image, &ci, &gt_mask).ok();
        rows.push(SampleMetrics {
            id: s.id.clone(),
            iou: Some(iou_v),
            dice: Some(dice_v),
            ncc: ncc_v,
            nonres_lesion: nr.map(|v| v.lesion),
            nonres_normal: nr.map(|v| v.normal),
            nonres_total: nr.map(|v| v.total),
            nonres_literal_total: nr_lit.map(|v| v.total),
            ssim_masked: ms,
            skipped: None,
        });
    }
    Ok(MetricsReport {
        rows,
        threshold_fraction,
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RangeTag;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn mask_from(coords: &[(usize, usize)], shape: (usize, usize)) -> BinaryMask {
        let mut m = Array2::from_elem(shape, false);
        for &(i, j) in coords {
            m[[i, j]] = true;
        }
        BinaryMask::new(m)
    }

    #[test]
    fn iou_dice_examples() {
        let shape = (4, 4);
        let a = mask_from(&[(0, 0), (0, 1), (1, 0), (1, 1)], shape);
        let b = mask_from(&[(1, 0), (1, 1), (2, 0), (2, 1)], shape);
        assert_relative_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_relative_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_relative_eq!(iou(&a, &b).unwrap(), 2.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(dice(&a, &b).unwrap(), 0.5, max_relative = 1e-12);
        let c = mask_from(&[(3, 3)], shape);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        let e = mask_from(&[], shape);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn ncc_examples() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0f32..1.0));
        assert_relative_eq!(ncc(&a, &a).unwrap(), 1.0, max_relative = 1e-9);
        assert_relative_eq!(ncc(&a, &a.mapv(|v| -v)).unwrap(), -1.0, max_relative = 1e-9);
        let b = a.mapv(|v| 3.0 * v + 7.0);
        assert_relative_eq!(ncc(&a, &b).unwrap(), 1.0, max_relative = 1e-6);
        let flat = Array2::from_elem((8, 8), 0.3f32);
        assert!(matches!(ncc(&a, &flat), Err(Error::Metric(_))));
    }

    #[test]
    fn non_resemblance_examples() {
        let x = Image::new(Array2::from_elem((6, 6), 0.4f32), RangeTag::Storage01).unwrap();
        let gt = mask_from(&[(1, 1), (2, 2)], (6, 6));
        let nr = non_resemblance(&x, &x, &gt, NonResMode::Absolute).unwrap();
        assert_eq!((nr.lesion, nr.normal, nr.total), (0.0, 0.0, 0.0));
        let nr = non_resemblance(&x, &x, &gt, NonResMode::Literal).unwrap();
        assert_eq!((nr.lesion, nr.normal, nr.total), (1.0, 1.0, 1.0));

        // +0.2 only inside gt
        let mut d = x.data().clone();
        d[[1, 1]] += 0.2;
        d[[2, 2]] += 0.2;
        let ci = Image::new(d, RangeTag::Storage01).unwrap();
        let nr = non_resemblance(&x, &ci, &gt, NonResMode::Absolute).unwrap();
        assert_relative_eq!(nr.lesion, 0.2, max_relative = 1e-6);
        assert_relative_eq!(nr.normal, 0.0);
        assert_relative_eq!(nr.total, 0.1, max_relative = 1e-6);

        // the reported total row is the mean of the two region scores
        assert_relative_eq!((0.67 + 0.33) / 2.0, 0.50, max_relative = 1e-12);

        let empty = mask_from(&[], (6, 6));
        assert!(non_resemblance(&x, &x, &empty, NonResMode::Absolute).is_err());
        let full = BinaryMask::new(Array2::from_elem((6, 6), true));
        assert!(non_resemblance(&x, &x, &full, NonResMode::Absolute).is_err());
    }

    #[test]
    fn ssim_basics() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = Image::new(
            Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0)),
            RangeTag::Storage01,
        )
        .unwrap();
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, max_relative = 1e-9);

        // high-contrast checkerboard vs its inverse
        let pat = Image::new(
            Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) % 2) as f32),
            RangeTag::Storage01,
        )
        .unwrap();
        let inv = Image::new(pat.data().mapv(|v| 1.0 - v), RangeTag::Storage01).unwrap();
        assert!(ssim(&pat, &inv).unwrap() < 0.5);

        let small = Image::new(Array2::from_elem((8, 8), 0.5f32), RangeTag::Storage01).unwrap();
        assert!(matches!(ssim(&small, &small), Err(Error::Metric(_))));
    }

    #[test]
    fn ssim_independent_noise_near_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..100 {
            let a = Image::new(
                Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0)),
                RangeTag::Storage01,
            )
            .unwrap();
            let b = Image::new(
                Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0)),
                RangeTag::Storage01,
            )
            .unwrap();
            total += ssim(&a, &b).unwrap();
        }
        assert!((total / 100.0).abs() < 0.1);
    }

    #[test]
    fn masked_ssim_ignores_lesion_region() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = Image::new(
            Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0)),
            RangeTag::Storage01,
        )
        .unwrap();
        let gt = mask_from(&[(5, 5), (5, 6), (6, 5), (6, 6)], (16, 16));
        assert_relative_eq!(masked_ssim(&x, &x, &gt).unwrap(), 1.0, max_relative = 1e-9);

        // arbitrary values inside gt do not matter
        let mut d = x.data().clone();
        for (v, &m) in d.iter_mut().zip(gt.data().iter()) {
            if m {
                *v = rng.random_range(0.0f32..1.0);
            }
        }
        let ci = Image::new(d, RangeTag::Storage01).unwrap();
        assert_relative_eq!(masked_ssim(&x, &ci, &gt).unwrap(), 1.0, max_relative = 1e-9);
    }

    // ---- brute-force reference oracles ----

    fn naive_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (h, w) = a.shape();
        let (mut i, mut u) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if a.data()[[y, x]] && b.data()[[y, x]] {
                    i += 1.0;
                }
                if a.data()[[y, x]] || b.data()[[y, x]] {
                    u += 1.0;
                }
            }
        }
        if u == 0.0 { 1.0 } else { i / u }
    }

    fn naive_ncc(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sa = (a.iter().map(|&v| (v as f64 - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|&v| (v as f64 - mb).powi(2)).sum::<f64>() / n).sqrt();
        let mut acc = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            acc += (x as f64 - ma) / sa * ((y as f64 - mb) / sb);
        }
        acc / n
    }

    #[test]
    fn oracle_equivalence_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0f32..1.0));
            let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0f32..1.0));
            let got = ncc(&a, &b).unwrap();
            let want = naive_ncc(&a, &b);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));

            let ma = BinaryMask::new(a.mapv(|v| v > 0.0));
            let mb = BinaryMask::new(b.mapv(|v| v > 0.0));
            let got = iou(&ma, &mb).unwrap();
            let want = naive_iou(&ma, &mb);
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn evaluate_with_perfect_and_zero_predictors() {
        use crate::domain::LossWeights;
        use crate::nets::{BundleSpecs, DiscriminatorSpec, GeneratorSpec, Scheme};

        let specs = BundleSpecs {
            generator: GeneratorSpec { input_size: 16, base_channels: 4, depth: 2, skip_connections: true },
            discriminator: DiscriminatorSpec { input_size: 16, base_channels: 4, n_layers: 1 },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let bundle =
            ModelBundle::<f32>::build(Scheme::Integrated, specs, LossWeights::default(), &mut rng)
                .unwrap();
        let img = Image::new(Array2::from_elem((16, 16), 0.5f32), RangeTag::Storage01).unwrap();
        let mut gt = Array2::from_elem((16, 16), 0.0f32);
        gt[[4, 4]] = 0.8;
        let samples = vec![
            LabeledSample {
                id: "p0".into(),
                image: img.clone(),
                label: Label::Positive,
                ground_truth: Some(GroundTruth::EffectMap(
                    crate::domain::AttributionMap::new(gt).unwrap(),
                )),
            },
            LabeledSample {
                id: "p1".into(),
                image: img,
                label: Label::Positive,
                ground_truth: None,
            },
        ];
        let report = evaluate_dataset(&bundle, &samples, 0.5, "test").unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[1].skipped.is_some());
        assert!(!report.to_csv().is_empty());
        assert!(report.summary_table().contains("ncc"));
    }

    proptest! {
        #[test]
        fn dice_iou_identity(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = BinaryMask::new(Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4)));
            let b = BinaryMask::new(Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4)));
            let i = iou(&a, &b).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert!(i <= d + 1e-12);
        }

        #[test]
        fn ncc_symmetry_and_affine_invariance(seed in 0u64..500, scale in 0.1f32..5.0, shift in -2.0f32..2.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0f32..1.0));
            let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0f32..1.0));
            let ab = ncc(&a, &b).unwrap();
            let ba = ncc(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            let b2 = b.mapv(|v| scale * v + shift);
            prop_assert!((ncc(&a, &b2).unwrap() - ab).abs() < 1e-4);
            let bn = b.mapv(|v| -v);
            prop_assert!((ncc(&a, &bn).unwrap() + ab).abs() < 1e-9);
        }
    }
}
