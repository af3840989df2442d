//! Procedural two-class synthetic benchmark with pixel-exact ground truth.
//!
//! Control images are Gaussian-blurred iid Gaussian noise. Patient images add
//! a circular effect of fixed amplitude in the top-left quadrant (disease A)
//! or the bottom-right quadrant (disease B), randomly displaced by up to
//! `max_offset` pixels per axis. The stored ground truth is the pre-clip
//! additive effect map, so it is directly comparable to a predicted `M(x+)`.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    AttributionMap, DatasetSplit, GroundTruth, Image, Label, LabeledSample, RangeTag,
};
use crate::error::{Error, Result};

/// Which quadrant carries the circular effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disease {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Pixels per side.
    pub image_size: usize,
    pub n_samples: usize,
    /// Std-dev of the iid noise before blurring.
    pub noise_sigma: f32,
    /// Std-dev of the blur kernel, in pixels (11x11 truncated kernel).
    pub blur_sigma: f32,
    pub circle_radius: usize,
    /// Additive intensity of the effect, in storage01 units.
    pub circle_amplitude: f32,
    /// Maximum displacement of the circle per axis, in pixels.
    pub max_offset: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            n_samples: 10_000,
            noise_sigma: 1.0,
            blur_sigma: 2.5,
            circle_radius: 8,
            circle_amplitude: 0.8,
            max_offset: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Defaults with the circle radius scaled proportionally to `image_size`
    /// (8 px at 128).
    pub fn for_size(image_size: usize) -> Self {
        SynthConfig {
            image_size,
            circle_radius: (image_size / 16).max(2),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("circle_amplitude", self.circle_amplitude),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be finite and positive")));
            }
        }
        if self.circle_radius == 0 {
            return Err(Error::Config("circle_radius must be positive".into()));
        }
        // The circle must stay inside its quadrant for any admissible offset.
        if self.circle_radius + self.max_offset >= self.image_size / 4 {
            return Err(Error::Config(format!(
                "circle_radius ({}) + max_offset ({}) must be < image_size/4 ({})",
                self.circle_radius,
                self.max_offset,
                self.image_size / 4
            )));
        }
        Ok(())
    }
}

const BLUR_RADIUS: usize = 5; // 11x11 kernel
/// Maps blurred-noise amplitude into intensity around mid-grey.
const CONTRAST_GAIN: f32 = 4.0 / 3.0;

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let mut k: Vec<f32> = (0..=2 * BLUR_RADIUS)
        .map(|i| {
            let d = i as f32 - BLUR_RADIUS as f32;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable blur with zero padding at the borders.
fn blur(noise: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let (h, w) = (noise.nrows(), noise.ncols());
    let k = gaussian_kernel(sigma);
    let r = BLUR_RADIUS as isize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                if jj >= 0 && (jj as usize) < w {
                    acc += kv * noise[[i, jj as usize]];
                }
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let ii = i as isize + t as isize - r;
                if ii >= 0 && (ii as usize) < h {
                    acc += kv * tmp[[ii as usize, j]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Blurred-noise background around mid-grey, before clipping.
fn background(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Array2<f32> {
    let n = cfg.image_size;
    let mut noise = Array2::<f32>::zeros((n, n));
    for v in noise.iter_mut() {
        let z: f32 = StandardNormal.sample(rng);
        *v = z * cfg.noise_sigma;
    }
    let blurred = blur(&noise, cfg.blur_sigma);
    // The blurred field has population std noise_sigma * ||kernel||_2; the
    // fixed gain places the textured range around mid-grey without rescaling
    // per image, so the noise_sigma -> 0 limit degenerates to a constant.
    let norm2: f32 = {
        let k = gaussian_kernel(cfg.blur_sigma);
        let s: f32 = k
            .iter()
            .flat_map(|&a| k.iter().map(move |&b| (a * b) * (a * b)))
            .sum();
        s.sqrt()
    };
    blurred.mapv(|v| 0.5 + v * CONTRAST_GAIN * 0.15 / (norm2.max(1e-12)))
}

/// Nominal (pre-offset) circle center for a disease.
pub fn nominal_center(cfg: &SynthConfig, disease: Disease) -> (usize, usize) {
    let q = cfg.image_size / 4;
    match disease {
        Disease::A => (q, q),
        Disease::B => (3 * q, 3 * q),
    }
}

fn effect_map(cfg: &SynthConfig, disease: Disease, offset: (i64, i64)) -> Array2<f32> {
    let n = cfg.image_size;
    let (cy, cx) = nominal_center(cfg, disease);
    let cy = cy as i64 + offset.0;
    let cx = cx as i64 + offset.1;
    let r2 = (cfg.circle_radius * cfg.circle_radius) as i64;
    let mut gt = Array2::<f32>::zeros((n, n));
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            if (i - cy) * (i - cy) + (j - cx) * (j - cx) <= r2 {
                gt[[i as usize, j as usize]] = cfg.circle_amplitude;
            }
        }
    }
    gt
}

/// Generates a healthy control sample: blurred noise, negative label,
/// all-zero ground truth.
pub fn generate_control_image(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Result<LabeledSample> {
    cfg.validate()?;
    let bg = background(cfg, rng).mapv(|v| v.clamp(0.0, 1.0));
    let n = cfg.image_size;
    Ok(LabeledSample {
        id: String::new(),
        image: Image::new(bg, RangeTag::Storage01)?,
        label: Label::Negative,
        ground_truth: Some(GroundTruth::EffectMap(AttributionMap::zeros(n, n))),
    })
}

/// Generates a patient sample with the circular effect of the given disease.
/// The stored ground truth is the exact pre-clip additive map.
pub fn generate_patient_image(
    cfg: &SynthConfig,
    disease: Disease,
    rng: &mut ChaCha12Rng,
) -> Result<LabeledSample> {
    cfg.validate()?;
    let bg = background(cfg, rng).mapv(|v| v.clamp(0.0, 1.0));
    let mo = cfg.max_offset as i64;
    let off = (rng.random_range(-mo..=mo), rng.random_range(-mo..=mo));
    let gt = effect_map(cfg, disease, off);
    let img = (&bg + &gt).mapv(|v| v.clamp(0.0, 1.0));
    Ok(LabeledSample {
        id: String::new(),
        image: Image::new(img, RangeTag::Storage01)?,
        label: Label::Positive,
        ground_truth: Some(GroundTruth::EffectMap(AttributionMap::new(gt)?)),
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-sample rng stream, independent of generation order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64 + 1)))
}

/// Class/disease assignment per sample index: negatives first, then disease A,
/// then disease B. Positives get the ceiling half on odd counts; the disease
/// tie breaks toward A.
fn plan(n_samples: usize) -> Vec<(Label, Option<Disease>)> {
    let n_neg = n_samples / 2;
    let n_pos = n_samples - n_neg;
    let n_a = n_pos - n_pos / 2; // ceil: ties toward A
    (0..n_samples)
        .map(|i| {
            if i < n_neg {
                (Label::Negative, None)
            } else if i < n_neg + n_a {
                (Label::Positive, Some(Disease::A))
            } else {
                (Label::Positive, Some(Disease::B))
            }
        })
        .collect()
}

/// Generates the full dataset with a stratified 80/20 train/test split.
/// Fully deterministic given the config.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    if cfg.n_samples < 10 {
        return Err(Error::Config("n_samples must be >= 10".into()));
    }
    let plan = plan(cfg.n_samples);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (idx, (label, disease)) in plan.iter().enumerate() {
        let mut rng = sample_rng(cfg.seed, idx);
        let mut s = match (label, disease) {
            (Label::Negative, _) => generate_control_image(cfg, &mut rng)?,
            (Label::Positive, Some(d)) => generate_patient_image(cfg, *d, &mut rng)?,
            _ => unreachable!(),
        };
        s.id = match disease {
            None => format!("neg_{idx:05}"),
            Some(Disease::A) => format!("posA_{idx:05}"),
            Some(Disease::B) => format!("posB_{idx:05}"),
        };
        samples.push(s);
    }

    // Stratified split: per-stratum floor quotas, remainder seats by largest
    // fractional part, sample order shuffled deterministically per stratum.
    let n_train_total = cfg.n_samples * 8 / 10;
    let strata: [Vec<usize>; 3] = {
        let mut neg = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (idx, (label, disease)) in plan.iter().enumerate() {
            match (label, disease) {
                (Label::Negative, _) => neg.push(idx),
                (_, Some(Disease::A)) => a.push(idx),
                (_, Some(Disease::B)) => b.push(idx),
                _ => unreachable!(),
            }
        }
        [neg, a, b]
    };
    let mut quotas: Vec<usize> = strata.iter().map(|s| s.len() * 8 / 10).collect();
    let assigned: usize = quotas.iter().sum();
    // Remainder seats go to the largest fractional parts; ties break in
    // stratum order (negative, A, B).
    let mut by_remainder: Vec<usize> = (0..strata.len()).collect();
    by_remainder.sort_by_key(|&i| (std::cmp::Reverse(strata[i].len() * 8 % 10), i));
    let mut seats = n_train_total.saturating_sub(assigned);
    for &i in &by_remainder {
        if seats == 0 {
            break;
        }
        if quotas[i] < strata[i].len() {
            quotas[i] += 1;
            seats -= 1;
        }
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (si, stratum) in strata.iter().enumerate() {
        let mut order = stratum.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x51_1755ED) ^ si as u64);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let q = quotas[si];
        train_idx.extend_from_slice(&order[..q]);
        test_idx.extend_from_slice(&order[q..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let split = DatasetSplit {
        train: train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test: test_idx.iter().map(|&i| samples[i].clone()).collect(),
        seed: cfg.seed,
    };
    split.validate()?;
    Ok(split)
}

/// Per-sample entry in the export manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub label: String,
    pub image: String,
    pub ground_truth: String,
}

/// Index written alongside an exported dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes the dataset tree:
/// `<root>/{train,test}/{positive,negative}/img_<idx>.png` (16-bit grayscale)
/// with `img_<idx>_gt.f32` sidecars and a `manifest.json` index.
pub fn export_dataset(split: &DatasetSplit, cfg: &SynthConfig, root: &std::path::Path) -> Result<Manifest> {
    use crate::imageio::{save_f32, save_png16};
    let mut entries = Vec::new();
    for (split_name, samples) in [("train", &split.train), ("test", &split.test)] {
        let mut counters = [0usize; 2];
        for s in samples {
            let (class_dir, label_name, ci) = match s.label {
                Label::Positive => ("positive", "positive", 0usize),
                Label::Negative => ("negative", "negative", 1usize),
            };
            let dir = root.join(split_name).join(class_dir);
            std::fs::create_dir_all(&dir)?;
            let idx = counters[ci];
            counters[ci] += 1;
            let img_rel = format!("{split_name}/{class_dir}/img_{idx:05}.png");
            let gt_rel = format!("{split_name}/{class_dir}/img_{idx:05}_gt.f32");
            save_png16(&root.join(&img_rel), s.image.data())?;
            let gt = match &s.ground_truth {
                Some(GroundTruth::EffectMap(m)) => m.data().clone(),
                Some(GroundTruth::Mask(m)) => m.data().mapv(|b| if b { 1.0 } else { 0.0 }),
                None => Array2::zeros(s.image.data().raw_dim()),
            };
            save_f32(&root.join(&gt_rel), &gt)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                split: split_name.to_string(),
                label: label_name.to_string(),
                image: img_rel,
                ground_truth: gt_rel,
            });
        }
    }
    let manifest = Manifest {
        config: *cfg,
        image_size: cfg.image_size,
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(root.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            n_samples: 10,
            circle_radius: 2,
            max_offset: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn control_image_is_deterministic() {
        let cfg = SynthConfig { image_size: 8, circle_radius: 1, max_offset: 0, ..Default::default() };
        let a = generate_control_image(&cfg, &mut sample_rng(3, 0)).unwrap();
        let b = generate_control_image(&cfg, &mut sample_rng(3, 0)).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.label, Label::Negative);
        match a.ground_truth.unwrap() {
            GroundTruth::EffectMap(m) => assert!(m.is_zero()),
            _ => panic!("expected effect map"),
        }
    }

    #[test]
    fn tiny_noise_gives_nearly_constant_image() {
        let cfg = SynthConfig {
            image_size: 16,
            noise_sigma: 1e-6,
            circle_radius: 1,
            max_offset: 1,
            ..Default::default()
        };
        let s = generate_control_image(&cfg, &mut sample_rng(0, 0)).unwrap();
        for &v in s.image.data().iter() {
            assert!((v - 0.5).abs() < 1e-4, "expected ~0.5, got {v}");
        }
    }

    #[test]
    fn patient_disk_stays_in_quadrant() {
        let cfg = SynthConfig::for_size(128);
        for idx in 0..50 {
            let mut rng = sample_rng(11, idx);
            let s = generate_patient_image(&cfg, Disease::B, &mut rng).unwrap();
            let gt = match s.ground_truth.unwrap() {
                GroundTruth::EffectMap(m) => m,
                _ => panic!(),
            };
            let limit = (cfg.circle_radius + cfg.max_offset) as i64;
            let mut support = 0;
            for ((i, j), &v) in gt.data().indexed_iter() {
                if v != 0.0 {
                    support += 1;
                    assert!(v == cfg.circle_amplitude);
                    let d = (i as i64 - 96).abs().max((j as i64 - 96).abs());
                    assert!(d <= limit, "pixel ({i},{j}) outside Chebyshev bound");
                }
            }
            assert!(support > 0);
        }
    }

    #[test]
    fn zero_offset_disk_is_exact_geometry() {
        let mut cfg = SynthConfig::for_size(128);
        cfg.max_offset = 0;
        let s = generate_patient_image(&cfg, Disease::A, &mut sample_rng(0, 0)).unwrap();
        let gt = match s.ground_truth.unwrap() {
            GroundTruth::EffectMap(m) => m,
            _ => panic!(),
        };
        let r2 = (cfg.circle_radius * cfg.circle_radius) as i64;
        for ((i, j), &v) in gt.data().indexed_iter() {
            let d2 = (i as i64 - 32).pow(2) + (j as i64 - 32).pow(2);
            assert_eq!(v != 0.0, d2 <= r2, "disk membership mismatch at ({i},{j})");
        }
    }

    #[test]
    fn patient_minus_gt_is_control_background() {
        // Same rng stream: the patient draws its background first, exactly as
        // the control does, so image - gt must reproduce it (pre-clip).
        let cfg = small_cfg();
        let patient = generate_patient_image(&cfg, Disease::A, &mut sample_rng(5, 3)).unwrap();
        let control = generate_control_image(&cfg, &mut sample_rng(5, 3)).unwrap();
        let gt = match patient.ground_truth.as_ref().unwrap() {
            GroundTruth::EffectMap(m) => m.data(),
            _ => panic!(),
        };
        for ((p, g), c) in patient
            .image
            .data()
            .iter()
            .zip(gt.iter())
            .zip(control.image.data().iter())
        {
            let unclipped = c + g;
            assert_eq!(*p, unclipped.clamp(0.0, 1.0));
            if unclipped <= 1.0 {
                assert_eq!(p - g, *c);
            }
        }
    }

    #[test]
    fn dataset_counts_and_split() {
        let split = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let all: Vec<_> = split.train.iter().chain(split.test.iter()).collect();
        let n_neg = all.iter().filter(|s| s.label == Label::Negative).count();
        let n_a = all.iter().filter(|s| s.id.starts_with("posA")).count();
        let n_b = all.iter().filter(|s| s.id.starts_with("posB")).count();
        assert_eq!((n_neg, n_a, n_b), (5, 3, 2));
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = generate_dataset(&small_cfg()).unwrap();
        let b = generate_dataset(&small_cfg()).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image.data(), y.image.data());
        }
    }

    #[test]
    fn too_few_samples_is_config_error() {
        let cfg = SynthConfig { n_samples: 5, ..small_cfg() };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let cfg = SynthConfig {
            image_size: 32,
            circle_radius: 6,
            max_offset: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
