//! Training loops for the cascaded and integrated schemes, plus the
//! stabilization protocol: history-buffered discriminator updates, Adam with
//! GAN momentum settings, early stopping and checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Scalar, Tensor};
use crate::domain::{DatasetSplit, GroundTruth, Image, Label, LabeledSample, LossWeights, RangeTag};
use crate::error::{Error, Result};
use crate::eval::ncc;
use crate::imageio::save_png8;
use crate::losses;
use crate::nets::{tensor_to_grid, BundleSpecs, ModelBundle, Scheme};

/// Fixed-capacity pool of previously generated images. Discriminators train
/// on draws from this pool instead of the newest fakes.
pub struct HistoryBuffer<T> {
    capacity: usize,
    pool: Vec<ArrayD<T>>,
}

impl<T: Clone> HistoryBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        HistoryBuffer { capacity, pool: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// While filling: append and return the fresh image. Once full: with
    /// probability 0.5 return the fresh image, otherwise swap it with a
    /// uniformly chosen pooled image and return the old one.
    pub fn draw(&mut self, fresh: ArrayD<T>, rng: &mut ChaCha12Rng) -> ArrayD<T> {
        if self.pool.len() < self.capacity {
            self.pool.push(fresh.clone());
            return fresh;
        }
        if rng.random_bool(0.5) {
            fresh
        } else {
            let idx = rng.random_range(0..self.pool.len());
            std::mem::replace(&mut self.pool[idx], fresh)
        }
    }
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    /// Identifier of the validation criterion, recorded in run artifacts.
    pub metric: String,
    pub mode: StopMode,
}

impl EarlyStopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("early-stop patience must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig { patience: 10, metric: String::new(), mode: StopMode::Maximize }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the best score is `patience` or more epochs old. Ties are not
/// improvements.
pub fn early_stop_check(history: &[f64], cfg: &EarlyStopConfig) -> StopDecision {
    assert!(!history.is_empty(), "early_stop_check needs at least one score");
    let mut best_idx = 0usize;
    for (i, &v) in history.iter().enumerate() {
        let best = history[best_idx];
        let improved = match cfg.mode {
            StopMode::Maximize => v > best,
            StopMode::Minimize => v < best,
        };
        if improved {
            best_idx = i;
        }
    }
    if history.len() - 1 - best_idx >= cfg.patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Knobs shared by all training loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Single-threaded fixed-stream mode; wall times are logged as 0 so
    /// replays are byte-identical.
    pub deterministic: bool,
    /// Generator minimizes `-ln D(fake)` instead of the printed saturating
    /// `ln(1 - D(fake))`.
    pub non_saturating: bool,
    /// Use the literal printed backward cycle term (`x+` in place of the
    /// back-translated image) for the integrated scheme.
    pub literal_backward_cycle: bool,
    pub validation_fraction: f64,
    pub buffer_capacity: usize,
    pub run_dir: Option<PathBuf>,
    /// Additionally save `checkpoints/epoch_<k>.ckpt` every k-th epoch; 0
    /// saves only `best.ckpt`.
    pub checkpoint_every: usize,
    pub sample_panels: bool,
    pub resume: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            seed: 7,
            deterministic: true,
            non_saturating: true,
            literal_backward_cycle: false,
            validation_fraction: 0.1,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            run_dir: None,
            checkpoint_every: 0,
            sample_panels: false,
            resume: None,
        }
    }
}

/// One logged epoch: loss components, validation score, wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub val_score: f64,
    pub wall_time_s: f64,
}

/// A finished training run: the selected-best bundle plus its history.
pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub val_metric: String,
}

// ---- graph-level loss builders (shared with the gradient-check tests) ----

fn mean_abs_diff_t<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.sub(b).abs().mean()
}

fn ln_mean<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.ln().mean()
}

fn ln_one_minus_mean<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.one_minus().ln().mean()
}

/// The full composite objective of the unpaired translation phase on one
/// (x+, x-) example, in its printed saturating form.
pub fn eq_ci_total<T: Scalar>(
    bundle: &ModelBundle<T>,
    x_pos: &Tensor<T>,
    x_neg: &Tensor<T>,
) -> Tensor<T> {
    let g_ab = &bundle.forward_gen;
    let g_ba = bundle.backward_gen.as_ref().expect("ci bundle has a backward generator");
    let d_pos = bundle.disc_pos.as_ref().expect("ci bundle has D+");
    let d_neg = &bundle.disc_neg;

    let fake_neg = g_ab.forward(x_pos);
    let fake_pos = g_ba.forward(x_neg);
    let rec_pos = g_ba.forward(&fake_neg);
    let rec_neg = g_ab.forward(&fake_pos);

    let gan = ln_mean(&d_pos.forward(x_pos))
        .add(&ln_mean(&d_neg.forward(x_neg)))
        .add(&ln_one_minus_mean(&d_pos.forward(&fake_pos)))
        .add(&ln_one_minus_mean(&d_neg.forward(&fake_neg)));
    let cc = mean_abs_diff_t(&rec_pos, x_pos).add(&mean_abs_diff_t(&rec_neg, x_neg));
    gan.add(&cc.scale(T::from_f64(bundle.weights.lambda_cc)))
}

/// The full composite objective of the paired residual phase on one pair.
pub fn eq_rgan_total<T: Scalar>(
    bundle: &ModelBundle<T>,
    x_pos: &Tensor<T>,
    x_neg: &Tensor<T>,
) -> Tensor<T> {
    let g_map = &bundle.forward_gen;
    let d_neg = &bundle.disc_neg;
    let mapped = x_pos.add(&g_map.forward(x_pos));
    let rgan = ln_mean(&d_neg.forward(x_neg)).add(&ln_one_minus_mean(&d_neg.forward(&mapped)));
    let l1r = mean_abs_diff_t(&mapped, x_neg);
    rgan.add(&l1r.scale(T::from_f64(bundle.weights.lambda_l1)))
}

/// The full composite objective of the integrated scheme on one
/// (x+, x-) example, corrected backward cycle term.
pub fn eq_cx_total<T: Scalar>(
    bundle: &ModelBundle<T>,
    x_pos: &Tensor<T>,
    x_neg: &Tensor<T>,
) -> Tensor<T> {
    let g_map = &bundle.forward_gen;
    let g_back = bundle.backward_gen.as_ref().expect("integrated bundle has a backward generator");
    let d_pos = bundle.disc_pos.as_ref().expect("integrated bundle has D+");
    let d_neg = &bundle.disc_neg;

    let mapped = x_pos.add(&g_map.forward(x_pos));
    let fake_pos = g_back.forward(x_neg);

    let gan = ln_mean(&d_pos.forward(x_pos))
        .add(&ln_mean(&d_neg.forward(x_neg)))
        .add(&ln_one_minus_mean(&d_pos.forward(&fake_pos)))
        .add(&ln_one_minus_mean(&d_neg.forward(&mapped)));

    let cyc_fwd = mean_abs_diff_t(&g_back.forward(&mapped), x_pos);
    let cyc_bwd = mean_abs_diff_t(&fake_pos.add(&g_map.forward(&fake_pos)), x_neg);
    gan.add(&cyc_fwd.add(&cyc_bwd).scale(T::from_f64(bundle.weights.lambda_cc)))
}

// ---- checkpoint format ----

const CKPT_MAGIC: &[u8; 8] = b"CXGNCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scheme: Scheme,
    pub specs: BundleSpecs,
    pub weights: LossWeights,
    pub epoch: usize,
    pub trained: bool,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: (u64, u64),
    pub opt_gen_t: u64,
    pub opt_disc_t: u64,
    pub val_metric: String,
    /// Resolved run configuration, JSON text.
    pub config_snapshot: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, arr) in &ckpt.arrays {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(arr.len() as u32).to_le_bytes());
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { buf: &bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic header", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}, expected {CKPT_VERSION}",
            path.display()
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 array name".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len = r.u32()? as usize;
        if dims.iter().product::<usize>() != len {
            return Err(Error::Checkpoint(format!("array {name}: dims do not match length")));
        }
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        arrays.push((name, arr));
    }
    Ok(Checkpoint { meta, arrays })
}

/// Rebuilds a bundle from a checkpoint; every parameter must be present.
pub fn bundle_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelBundle<f32>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut bundle =
        ModelBundle::build(ckpt.meta.scheme, ckpt.meta.specs, ckpt.meta.weights, &mut rng)?;
    let by_name: BTreeMap<&str, &ArrayD<f32>> =
        ckpt.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
    for (name, tensor) in bundle.params() {
        let Some(arr) = by_name.get(name.as_str()) else {
            return Err(Error::Checkpoint(format!("missing parameter array: {name}")));
        };
        if arr.shape() != tensor.shape().as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match model {:?}",
                arr.shape(),
                tensor.shape()
            )));
        }
        tensor.set_data((*arr).clone());
    }
    bundle.trained = ckpt.meta.trained;
    Ok(bundle)
}

fn checkpoint_from_state(
    bundle: &ModelBundle<f32>,
    epoch: usize,
    rng: &ChaCha12Rng,
    gen_opt: &Adam<f32>,
    disc_opt: &Adam<f32>,
    val_metric: &str,
    config_snapshot: &str,
) -> Checkpoint {
    let mut arrays: Vec<(String, ArrayD<f32>)> =
        bundle.params().into_iter().map(|(n, t)| (n, t.to_array())).collect();
    let (gt, gm, gv) = gen_opt.state();
    let (dt, dm, dv) = disc_opt.state();
    for (i, a) in gm.iter().enumerate() {
        arrays.push((format!("opt.gen.m.{i:04}"), a.clone()));
    }
    for (i, a) in gv.iter().enumerate() {
        arrays.push((format!("opt.gen.v.{i:04}"), a.clone()));
    }
    for (i, a) in dm.iter().enumerate() {
        arrays.push((format!("opt.disc.m.{i:04}"), a.clone()));
    }
    for (i, a) in dv.iter().enumerate() {
        arrays.push((format!("opt.disc.v.{i:04}"), a.clone()));
    }
    let word_pos = rng.get_word_pos();
    Checkpoint {
        meta: CheckpointMeta {
            scheme: bundle.scheme,
            specs: bundle.specs,
            weights: bundle.weights,
            epoch,
            trained: bundle.trained,
            rng_seed: rng.get_seed(),
            rng_word_pos: ((word_pos >> 64) as u64, word_pos as u64),
            opt_gen_t: gt,
            opt_disc_t: dt,
            val_metric: val_metric.to_string(),
            config_snapshot: config_snapshot.to_string(),
        },
        arrays,
    }
}

fn optimizer_state_from(
    ckpt: &Checkpoint,
    group: &str,
    t: u64,
    opt: &mut Adam<f32>,
) -> Result<()> {
    let collect = |kind: &str| -> Vec<ArrayD<f32>> {
        let prefix = format!("opt.{group}.{kind}.");
        let mut named: Vec<(&String, &ArrayD<f32>)> = ckpt
            .arrays
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(n, a)| (n, a))
            .collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, a)| a.clone()).collect()
    };
    opt.restore_state(t, collect("m"), collect("v"))
}

// ---- shared loop plumbing ----

fn model_array(img: &Image) -> ArrayD<f32> {
    let m = img.as_model();
    let d = m.data();
    ArrayD::from_shape_fn(IxDyn(&[1, d.nrows(), d.ncols()]), |ix| d[[ix[1], ix[2]]])
}

fn grid_of(arr: &ArrayD<f32>) -> Array2<f32> {
    Array2::from_shape_fn((arr.shape()[1], arr.shape()[2]), |(i, j)| arr[[0, i, j]])
}

fn f64_grid(t: &Tensor<f32>) -> ArrayD<f64> {
    t.data().mapv(|v| v as f64)
}

struct PreppedData {
    pos: Vec<ArrayD<f32>>,
    neg: Vec<ArrayD<f32>>,
    /// Ground-truth effect grids aligned with `val_pos`, where available.
    val_pos: Vec<(ArrayD<f32>, Option<Array2<f32>>)>,
}

fn gt_grid(s: &LabeledSample) -> Option<Array2<f32>> {
    match &s.ground_truth {
        Some(GroundTruth::EffectMap(m)) => Some(m.data().clone()),
        Some(GroundTruth::Mask(m)) => Some(m.data().mapv(|b| b as u8 as f32)),
        None => None,
    }
}

fn prep_data(data: &DatasetSplit, validation_fraction: f64) -> Result<PreppedData> {
    data.validate()?;
    let mut pos: Vec<&LabeledSample> = Vec::new();
    let mut neg: Vec<ArrayD<f32>> = Vec::new();
    for s in &data.train {
        s.validate()?;
        match s.label {
            Label::Positive => pos.push(s),
            Label::Negative => neg.push(model_array(&s.image)),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config(
            "training requires both a positive and a negative class".into(),
        ));
    }
    // held-out validation slice carved from the training positives; file
    // order is already deterministic, take the tail
    let n_val = if pos.len() >= 2 {
        ((pos.len() as f64 * validation_fraction).round() as usize).clamp(1, pos.len() - 1)
    } else {
        0
    };
    let cut = pos.len() - n_val;
    let val_pos = pos[cut..]
        .iter()
        .map(|s| (model_array(&s.image), gt_grid(s)))
        .collect();
    let pos = pos[..cut].iter().map(|s| model_array(&s.image)).collect();
    Ok(PreppedData { pos, neg, val_pos })
}

/// Pairs each index of the larger class with a with-replacement draw from the
/// smaller class; one epoch is one pass over the larger class.
fn epoch_schedule(n_pos: usize, n_neg: usize, rng: &mut ChaCha12Rng) -> Vec<(usize, usize)> {
    let (larger, smaller, pos_major) =
        if n_pos >= n_neg { (n_pos, n_neg, true) } else { (n_neg, n_pos, false) };
    let mut order: Vec<usize> = (0..larger).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| {
            let j = rng.random_range(0..smaller);
            if pos_major { (i, j) } else { (j, i) }
        })
        .collect()
}

struct RunWriter {
    dir: Option<PathBuf>,
    records: Vec<EpochRecord>,
}

impl RunWriter {
    fn new(dir: Option<PathBuf>, config_snapshot: &str) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d.join("checkpoints"))?;
            fs::create_dir_all(d.join("samples"))?;
            fs::write(d.join("config.snapshot"), config_snapshot)?;
        }
        Ok(RunWriter { dir, records: Vec::new() })
    }

    fn push(&mut self, rec: EpochRecord) -> Result<()> {
        self.records.push(rec);
        if let Some(d) = &self.dir {
            fs::write(d.join("metrics.csv"), metrics_csv(&self.records))?;
        }
        Ok(())
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::new();
    if records.is_empty() {
        return s;
    }
    let keys: Vec<&String> = records[0].components.keys().collect();
    s.push_str("epoch");
    for k in &keys {
        let _ = write!(s, ",{k}");
    }
    s.push_str(",total,val_metric,wall_time_s\n");
    for r in records {
        let _ = write!(s, "{}", r.epoch);
        for k in &keys {
            let _ = write!(s, ",{:.6}", r.components.get(*k).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{:.6},{:.6},{:.3}", r.total, r.val_score, r.wall_time_s);
    }
    s
}

fn write_panel(dir: &Path, epoch: usize, input: &Array2<f32>, map: &Array2<f32>, cf: &Array2<f32>) {
    let (h, w) = input.dim();
    let mut panel = Array2::<f32>::zeros((h, w * 3 + 2));
    for i in 0..h {
        for j in 0..w {
            panel[[i, j]] = (input[[i, j]] + 1.0) / 2.0;
            panel[[i, w + 1 + j]] = (map[[i, j]] + 2.0) / 4.0;
            panel[[i, 2 * w + 2 + j]] = (cf[[i, j]].clamp(-1.0, 1.0) + 1.0) / 2.0;
        }
    }
    let path = dir.join(format!("epoch_{epoch:04}_panel.png"));
    if let Err(e) = save_png8(&path, &panel) {
        log::warn!("could not write sample panel {}: {e}", path.display());
    }
}

/// Validation: NCC between ground truth and the negated map when ground truth
/// is available on every held-out positive (maximize), otherwise forward
/// reconstruction L1 (minimize).
fn validation_plan(val_pos: &[(ArrayD<f32>, Option<Array2<f32>>)]) -> (String, StopMode) {
    let all_gt = !val_pos.is_empty() && val_pos.iter().all(|(_, g)| g.is_some());
    if all_gt {
        ("ncc_gt_neg_map".into(), StopMode::Maximize)
    } else {
        ("cycle_l1".into(), StopMode::Minimize)
    }
}

fn improved(score: f64, best: f64, mode: StopMode) -> bool {
    match mode {
        StopMode::Maximize => score > best,
        StopMode::Minimize => score < best,
    }
}

fn worst(mode: StopMode) -> f64 {
    match mode {
        StopMode::Maximize => f64::NEG_INFINITY,
        StopMode::Minimize => f64::INFINITY,
    }
}

/// Mean NCC of gt against -map over the validation positives; samples where
/// NCC is undefined are skipped.
fn ncc_val_score(maps: &[Array2<f32>], val_pos: &[(ArrayD<f32>, Option<Array2<f32>>)]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (m, (_, gt)) in maps.iter().zip(val_pos.iter()) {
        let Some(g) = gt else { continue };
        if let Ok(v) = ncc(g, &m.mapv(|x| -x)) {
            total += v;
            n += 1;
        }
    }
    if n == 0 { f64::NEG_INFINITY } else { total / n as f64 }
}

// ---- training loops ----

struct LoopState {
    rng: ChaCha12Rng,
    start_epoch: usize,
    best_score: f64,
    best_epoch: usize,
    best_params: Option<Vec<ArrayD<f32>>>,
    val_history: Vec<f64>,
}

fn loop_common(
    scheme: Scheme,
    specs: BundleSpecs,
    w: LossWeights,
    opt_cfg: &AdamConfig,
    stop: &EarlyStopConfig,
    topts: &TrainOptions,
) -> Result<(ModelBundle<f32>, Adam<f32>, Adam<f32>, LoopState, String)> {
    opt_cfg.validate()?;
    stop.validate()?;
    if topts.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let snapshot = serde_json::to_string_pretty(&serde_json::json!({
        "scheme": scheme,
        "specs": specs,
        "weights": w,
        "optimizer": opt_cfg,
        "early_stop": stop,
        "options": topts,
    }))?;

    let mut rng = ChaCha12Rng::seed_from_u64(topts.seed);
    let mut bundle;
    let mut start_epoch = 0usize;

    let resume_ckpt = match &topts.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if let Some(ck) = &resume_ckpt {
        if ck.meta.scheme != scheme {
            return Err(Error::Scheme(format!(
                "resume checkpoint was trained with scheme {:?}, requested {:?}",
                ck.meta.scheme, scheme
            )));
        }
        if ck.meta.specs != specs {
            return Err(Error::Checkpoint("resume checkpoint specs do not match".into()));
        }
        bundle = bundle_from_checkpoint(ck)?;
        start_epoch = ck.meta.epoch;
        rng = ChaCha12Rng::from_seed(ck.meta.rng_seed);
        let (hi, lo) = ck.meta.rng_word_pos;
        rng.set_word_pos(((hi as u128) << 64) | lo as u128);
    } else {
        bundle = ModelBundle::build(scheme, specs, w, &mut rng)?;
    }
    bundle.trained = true;

    let gen_params = bundle.generator_params();
    let mut disc_params: Vec<Tensor<f32>> = Vec::new();
    if let Some(d) = &bundle.disc_pos {
        disc_params.extend(d.params("d").into_iter().map(|(_, t)| t));
    }
    disc_params.extend(bundle.disc_neg.params("d").into_iter().map(|(_, t)| t));
    let mut gen_opt = Adam::new(*opt_cfg, gen_params);
    let mut disc_opt = Adam::new(*opt_cfg, disc_params);
    if let Some(ck) = &resume_ckpt {
        optimizer_state_from(ck, "gen", ck.meta.opt_gen_t, &mut gen_opt)?;
        optimizer_state_from(ck, "disc", ck.meta.opt_disc_t, &mut disc_opt)?;
    }

    let state = LoopState {
        rng,
        start_epoch,
        best_score: 0.0,
        best_epoch: 0,
        best_params: None,
        val_history: Vec::new(),
    };
    Ok((bundle, gen_opt, disc_opt, state, snapshot))
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    bundle: &ModelBundle<f32>,
    gen_opt: &Adam<f32>,
    disc_opt: &Adam<f32>,
    st: &mut LoopState,
    writer: &mut RunWriter,
    stop: &EarlyStopConfig,
    topts: &TrainOptions,
    epoch: usize,
    rec: EpochRecord,
    score: f64,
    mode: StopMode,
    snapshot: &str,
) -> Result<StopDecision> {
    writer.push(rec)?;
    st.val_history.push(score);
    if st.best_params.is_none() || improved(score, st.best_score, mode) {
        st.best_score = score;
        st.best_epoch = epoch;
        st.best_params = Some(bundle.params().into_iter().map(|(_, t)| t.to_array()).collect());
        if let Some(dir) = &topts.run_dir {
            let ck = checkpoint_from_state(
                bundle, epoch, &st.rng, gen_opt, disc_opt, &stop.metric, snapshot,
            );
            save_checkpoint(&ck, &dir.join("best.ckpt"))?;
        }
    }
    if let Some(dir) = &topts.run_dir {
        if topts.checkpoint_every > 0 && epoch % topts.checkpoint_every == 0 {
            let ck = checkpoint_from_state(
                bundle, epoch, &st.rng, gen_opt, disc_opt, &stop.metric, snapshot,
            );
            save_checkpoint(&ck, &dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt")))?;
        }
    }
    Ok(early_stop_check(&st.val_history, &EarlyStopConfig { mode, ..stop.clone() }))
}

fn restore_best(bundle: &ModelBundle<f32>, st: &LoopState) {
    if let Some(best) = &st.best_params {
        for ((_, t), arr) in bundle.params().into_iter().zip(best.iter()) {
            t.set_data(arr.clone());
        }
    }
}

/// Phase 1 of the cascaded scheme: unpaired cycle-consistent translation.
pub fn train_ci_cyclegan(
    data: &DatasetSplit,
    specs: BundleSpecs,
    w: LossWeights,
    opt_cfg: &AdamConfig,
    stop: &EarlyStopConfig,
    topts: &TrainOptions,
) -> Result<TrainOutcome> {
    let prepped = prep_data(data, topts.validation_fraction)?;
    let (bundle, mut gen_opt, mut disc_opt, mut st, snapshot) =
        loop_common(Scheme::CascadedCi, specs, w, opt_cfg, stop, topts)?;
    let (metric_id, mode) = validation_plan(&prepped.val_pos);
    let stop = EarlyStopConfig { metric: metric_id.clone(), mode, ..stop.clone() };
    let mut writer = RunWriter::new(topts.run_dir.clone(), &snapshot)?;
    let mut buf_pos = HistoryBuffer::new(topts.buffer_capacity);
    let mut buf_neg = HistoryBuffer::new(topts.buffer_capacity);
    st.best_score = worst(mode);

    let g_ab = &bundle.forward_gen;
    let g_ba = bundle.backward_gen.as_ref().unwrap();
    let d_pos = bundle.disc_pos.as_ref().unwrap();
    let d_neg = &bundle.disc_neg;
    let lam = w.lambda_cc as f32;

    for epoch in st.start_epoch + 1..=st.start_epoch + topts.epochs {
        let t0 = Instant::now();
        let sched = epoch_schedule(prepped.pos.len(), prepped.neg.len(), &mut st.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0f64;
        for (pi, ni) in &sched {
            let xp = Tensor::constant(prepped.pos[*pi].clone());
            let xn = Tensor::constant(prepped.neg[*ni].clone());

            // generator step
            let fake_neg = g_ab.forward(&xp);
            let fake_pos = g_ba.forward(&xn);
            let rec_pos = g_ba.forward(&fake_neg);
            let rec_neg = g_ab.forward(&fake_pos);
            let d_fake_neg = d_neg.forward(&fake_neg);
            let d_fake_pos = d_pos.forward(&fake_pos);
            let adv = if topts.non_saturating {
                ln_mean(&d_fake_neg).add(&ln_mean(&d_fake_pos)).scale(-1.0)
            } else {
                ln_one_minus_mean(&d_fake_neg).add(&ln_one_minus_mean(&d_fake_pos))
            };
            let cc = mean_abs_diff_t(&rec_pos, &xp).add(&mean_abs_diff_t(&rec_neg, &xn));
            let g_loss = adv.add(&cc.scale(lam));
            gen_opt.zero_grad();
            disc_opt.zero_grad();
            g_loss.backward();
            gen_opt.step();
            disc_opt.zero_grad();

            // discriminator step on history-buffered fakes
            let pooled_neg = Tensor::constant(buf_neg.draw(fake_neg.to_array(), &mut st.rng));
            let pooled_pos = Tensor::constant(buf_pos.draw(fake_pos.to_array(), &mut st.rng));
            let d_real_pos = d_pos.forward(&xp);
            let d_real_neg = d_neg.forward(&xn);
            let d_obj = ln_mean(&d_real_pos)
                .add(&ln_mean(&d_real_neg))
                .add(&ln_one_minus_mean(&d_pos.forward(&pooled_pos)))
                .add(&ln_one_minus_mean(&d_neg.forward(&pooled_neg)));
            let d_loss = d_obj.scale(-1.0);
            d_loss.backward();
            disc_opt.step();

            // printed-form scalars for the log
            let gan = losses::gan_loss(
                &f64_grid(&d_real_pos),
                &f64_grid(&d_real_neg),
                &f64_grid(&d_fake_pos),
                &f64_grid(&d_fake_neg),
            )?;
            let cc_v = cc.scalar_value() as f64;
            let bd = losses::ci_objective(gan, cc_v, &w);
            for (k, v) in &bd.components {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            total_sum += bd.total;
        }
        let n = sched.len() as f64;
        let components: BTreeMap<String, f64> =
            sums.into_iter().map(|(k, v)| (k, v / n)).collect();

        // validation: map analogue is G(x+) - x+
        let maps: Vec<Array2<f32>> = prepped
            .val_pos
            .iter()
            .map(|(x, _)| {
                let out = g_ab.forward(&Tensor::constant(x.clone()));
                tensor_to_grid(&out) - grid_of(x)
            })
            .collect();
        let score = match mode {
            StopMode::Maximize => ncc_val_score(&maps, &prepped.val_pos),
            StopMode::Minimize => {
                // forward-cycle L1 on the held-out positives
                let mut acc = 0.0;
                for (x, _) in &prepped.val_pos {
                    let xt = Tensor::constant(x.clone());
                    let rec = g_ba.forward(&g_ab.forward(&xt));
                    acc += mean_abs_diff_t(&rec, &xt).scalar_value() as f64;
                }
                if prepped.val_pos.is_empty() { f64::INFINITY } else { acc / prepped.val_pos.len() as f64 }
            }
        };

        if topts.sample_panels {
            if let (Some(dir), Some((x, _))) = (&topts.run_dir, prepped.val_pos.first()) {
                let out = g_ab.forward(&Tensor::constant(x.clone()));
                let cf = tensor_to_grid(&out);
                let input = grid_of(x);
                let map = &cf - &input;
                write_panel(&dir.join("samples"), epoch, &input, &map, &cf);
            }
        }

        let rec = EpochRecord {
            epoch,
            total: total_sum / n,
            components,
            val_score: score,
            wall_time_s: if topts.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        let decision = finish_epoch(
            &bundle, &gen_opt, &disc_opt, &mut st, &mut writer, &stop, topts, epoch, rec, score,
            mode, &snapshot,
        )?;
        if decision == StopDecision::Stop {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    restore_best(&bundle, &st);
    Ok(TrainOutcome {
        bundle,
        records: writer.records,
        best_epoch: st.best_epoch,
        best_score: st.best_score,
        val_metric: metric_id,
    })
}

/// Pairs every positive with its translated counterfactual.
pub fn synthesize_pairs(
    bundle: &ModelBundle<f32>,
    positives: &[LabeledSample],
) -> Result<Vec<(Image, Image)>> {
    if !bundle.trained {
        return Err(Error::State("pair synthesis requires a trained bundle".into()));
    }
    if bundle.scheme != Scheme::CascadedCi {
        return Err(Error::Scheme(format!(
            "pair synthesis needs a cascaded_ci bundle, got {:?}",
            bundle.scheme
        )));
    }
    let mut pairs = Vec::with_capacity(positives.len());
    for s in positives {
        if s.label != Label::Positive {
            return Err(Error::Contract(format!("sample {} is not positive", s.id)));
        }
        let x = s.image.as_model();
        let out = bundle.forward_gen.forward(&Tensor::constant(model_array(&x)));
        let fake = Image::new_clipped(tensor_to_grid(&out), RangeTag::Model11)?;
        pairs.push((x, fake));
    }
    Ok(pairs)
}

/// Phase 2 of the cascaded scheme: residual generator on synthesized pairs.
pub fn train_rgan(
    pairs: &[(Image, Image)],
    specs: BundleSpecs,
    w: LossWeights,
    opt_cfg: &AdamConfig,
    stop: &EarlyStopConfig,
    topts: &TrainOptions,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Config("paired training set is empty".into()));
    }
    let arrays: Vec<(ArrayD<f32>, ArrayD<f32>)> = pairs
        .iter()
        .map(|(p, n)| (model_array(p), model_array(n)))
        .collect();
    let n_val = if arrays.len() >= 2 {
        ((arrays.len() as f64 * topts.validation_fraction).round() as usize)
            .clamp(1, arrays.len() - 1)
    } else {
        0
    };
    let cut = arrays.len() - n_val;
    let (train_pairs, val_pairs) = arrays.split_at(cut);

    let (bundle, mut gen_opt, mut disc_opt, mut st, snapshot) =
        loop_common(Scheme::CascadedRgan, specs, w, opt_cfg, stop, topts)?;
    let metric_id = "residual_l1".to_string();
    let mode = StopMode::Minimize;
    let stop = EarlyStopConfig { metric: metric_id.clone(), mode, ..stop.clone() };
    let mut writer = RunWriter::new(topts.run_dir.clone(), &snapshot)?;
    let mut buf = HistoryBuffer::new(topts.buffer_capacity);
    st.best_score = worst(mode);

    let g_map = &bundle.forward_gen;
    let d_neg = &bundle.disc_neg;
    let lam = w.lambda_l1 as f32;

    for epoch in st.start_epoch + 1..=st.start_epoch + topts.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut st.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0f64;
        for &i in &order {
            let (xp_arr, xn_arr) = &train_pairs[i];
            let xp = Tensor::constant(xp_arr.clone());
            let xn = Tensor::constant(xn_arr.clone());

            let mapped = xp.add(&g_map.forward(&xp));
            let d_fake = d_neg.forward(&mapped);
            let adv = if topts.non_saturating {
                ln_mean(&d_fake).scale(-1.0)
            } else {
                ln_one_minus_mean(&d_fake)
            };
            let l1r = mean_abs_diff_t(&mapped, &xn);
            let g_loss = adv.add(&l1r.scale(lam));
            gen_opt.zero_grad();
            disc_opt.zero_grad();
            g_loss.backward();
            gen_opt.step();
            disc_opt.zero_grad();

            let pooled = Tensor::constant(buf.draw(mapped.to_array(), &mut st.rng));
            let d_real = d_neg.forward(&xn);
            let d_loss = ln_mean(&d_real)
                .add(&ln_one_minus_mean(&d_neg.forward(&pooled)))
                .scale(-1.0);
            d_loss.backward();
            disc_opt.step();

            let rgan = losses::residual_gan_loss(&f64_grid(&d_real), &f64_grid(&d_fake))?;
            let bd = losses::rgan_objective(rgan, l1r.scalar_value() as f64, &w);
            for (k, v) in &bd.components {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            total_sum += bd.total;
        }
        let n = order.len() as f64;
        let components: BTreeMap<String, f64> =
            sums.into_iter().map(|(k, v)| (k, v / n)).collect();

        let score = if val_pairs.is_empty() {
            components.get("l1r").copied().unwrap_or(f64::INFINITY)
        } else {
            let mut acc = 0.0;
            for (xp_arr, xn_arr) in val_pairs {
                let xp = Tensor::constant(xp_arr.clone());
                let mapped = xp.add(&g_map.forward(&xp));
                acc += mean_abs_diff_t(&mapped, &Tensor::constant(xn_arr.clone())).scalar_value()
                    as f64;
            }
            acc / val_pairs.len() as f64
        };

        if topts.sample_panels {
            if let (Some(dir), Some((xp_arr, _))) = (&topts.run_dir, val_pairs.first()) {
                let xp = Tensor::constant(xp_arr.clone());
                let map = tensor_to_grid(&g_map.forward(&xp));
                let input = grid_of(xp_arr);
                let cf = &input + &map;
                write_panel(&dir.join("samples"), epoch, &input, &map, &cf);
            }
        }

        let rec = EpochRecord {
            epoch,
            total: total_sum / n,
            components,
            val_score: score,
            wall_time_s: if topts.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        let decision = finish_epoch(
            &bundle, &gen_opt, &disc_opt, &mut st, &mut writer, &stop, topts, epoch, rec, score,
            mode, &snapshot,
        )?;
        if decision == StopDecision::Stop {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    restore_best(&bundle, &st);
    Ok(TrainOutcome {
        bundle,
        records: writer.records,
        best_epoch: st.best_epoch,
        best_score: st.best_score,
        val_metric: metric_id,
    })
}

/// The integrated scheme: the forward generator emits the map directly.
pub fn train_integrated(
    data: &DatasetSplit,
    specs: BundleSpecs,
    w: LossWeights,
    opt_cfg: &AdamConfig,
    stop: &EarlyStopConfig,
    topts: &TrainOptions,
) -> Result<TrainOutcome> {
    let prepped = prep_data(data, topts.validation_fraction)?;
    let (bundle, mut gen_opt, mut disc_opt, mut st, snapshot) =
        loop_common(Scheme::Integrated, specs, w, opt_cfg, stop, topts)?;
    let (metric_id, mode) = validation_plan(&prepped.val_pos);
    let stop = EarlyStopConfig { metric: metric_id.clone(), mode, ..stop.clone() };
    let mut writer = RunWriter::new(topts.run_dir.clone(), &snapshot)?;
    let mut buf_pos = HistoryBuffer::new(topts.buffer_capacity);
    let mut buf_neg = HistoryBuffer::new(topts.buffer_capacity);
    st.best_score = worst(mode);

    let g_map = &bundle.forward_gen;
    let g_back = bundle.backward_gen.as_ref().unwrap();
    let d_pos = bundle.disc_pos.as_ref().unwrap();
    let d_neg = &bundle.disc_neg;
    let lam = w.lambda_cc as f32;

    for epoch in st.start_epoch + 1..=st.start_epoch + topts.epochs {
        let t0 = Instant::now();
        let sched = epoch_schedule(prepped.pos.len(), prepped.neg.len(), &mut st.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0f64;
        for (pi, ni) in &sched {
            let xp = Tensor::constant(prepped.pos[*pi].clone());
            let xn = Tensor::constant(prepped.neg[*ni].clone());

            let mapped = xp.add(&g_map.forward(&xp));
            let fake_pos = g_back.forward(&xn);
            let d_fake_neg = d_neg.forward(&mapped);
            let d_fake_pos = d_pos.forward(&fake_pos);
            let adv = if topts.non_saturating {
                ln_mean(&d_fake_neg).add(&ln_mean(&d_fake_pos)).scale(-1.0)
            } else {
                ln_one_minus_mean(&d_fake_neg).add(&ln_one_minus_mean(&d_fake_pos))
            };
            let cyc_fwd = mean_abs_diff_t(&g_back.forward(&mapped), &xp);
            let back_base = if topts.literal_backward_cycle { &xp } else { &fake_pos };
            let cyc_bwd = mean_abs_diff_t(&back_base.add(&g_map.forward(&fake_pos)), &xn);
            let cc = cyc_fwd.add(&cyc_bwd);
            let g_loss = adv.add(&cc.scale(lam));
            gen_opt.zero_grad();
            disc_opt.zero_grad();
            g_loss.backward();
            gen_opt.step();
            disc_opt.zero_grad();

            let pooled_neg = Tensor::constant(buf_neg.draw(mapped.to_array(), &mut st.rng));
            let pooled_pos = Tensor::constant(buf_pos.draw(fake_pos.to_array(), &mut st.rng));
            let d_real_pos = d_pos.forward(&xp);
            let d_real_neg = d_neg.forward(&xn);
            let d_loss = ln_mean(&d_real_pos)
                .add(&ln_mean(&d_real_neg))
                .add(&ln_one_minus_mean(&d_pos.forward(&pooled_pos)))
                .add(&ln_one_minus_mean(&d_neg.forward(&pooled_neg)))
                .scale(-1.0);
            d_loss.backward();
            disc_opt.step();

            let cxgan = losses::cx_gan_loss(
                &f64_grid(&d_real_pos),
                &f64_grid(&d_real_neg),
                &f64_grid(&d_fake_pos),
                &f64_grid(&d_fake_neg),
            )?;
            let bd = losses::cx_objective(cxgan, cc.scalar_value() as f64, &w);
            for (k, v) in &bd.components {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            total_sum += bd.total;
        }
        let n = sched.len() as f64;
        let components: BTreeMap<String, f64> =
            sums.into_iter().map(|(k, v)| (k, v / n)).collect();

        let maps: Vec<Array2<f32>> = prepped
            .val_pos
            .iter()
            .map(|(x, _)| tensor_to_grid(&g_map.forward(&Tensor::constant(x.clone()))))
            .collect();
        let score = match mode {
            StopMode::Maximize => ncc_val_score(&maps, &prepped.val_pos),
            StopMode::Minimize => {
                let mut acc = 0.0;
                for (x, _) in &prepped.val_pos {
                    let xt = Tensor::constant(x.clone());
                    let mapped = xt.add(&g_map.forward(&xt));
                    acc += mean_abs_diff_t(&g_back.forward(&mapped), &xt).scalar_value() as f64;
                }
                if prepped.val_pos.is_empty() { f64::INFINITY } else { acc / prepped.val_pos.len() as f64 }
            }
        };

        if topts.sample_panels {
            if let (Some(dir), Some((x, _))) = (&topts.run_dir, prepped.val_pos.first()) {
                let input = grid_of(x);
                let map = tensor_to_grid(&g_map.forward(&Tensor::constant(x.clone())));
                let cf = &input + &map;
                write_panel(&dir.join("samples"), epoch, &input, &map, &cf);
            }
        }

        let rec = EpochRecord {
            epoch,
            total: total_sum / n,
            components,
            val_score: score,
            wall_time_s: if topts.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        let decision = finish_epoch(
            &bundle, &gen_opt, &disc_opt, &mut st, &mut writer, &stop, topts, epoch, rec, score,
            mode, &snapshot,
        )?;
        if decision == StopDecision::Stop {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    restore_best(&bundle, &st);
    Ok(TrainOutcome {
        bundle,
        records: writer.records,
        best_epoch: st.best_epoch,
        best_score: st.best_score,
        val_metric: metric_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{DiscriminatorSpec, GeneratorSpec};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn fresh(v: f32) -> ArrayD<f32> {
        ArrayD::from_elem(IxDyn(&[1, 2, 2]), v)
    }

    #[test]
    fn buffer_fills_then_caps() {
        let mut buf = HistoryBuffer::new(50);
        let mut r = rng(0);
        let first = buf.draw(fresh(0.0), &mut r);
        assert_eq!(first, fresh(0.0));
        assert_eq!(buf.len(), 1);
        for i in 1..100 {
            buf.draw(fresh(i as f32), &mut r);
            assert!(buf.len() <= 50);
        }
        assert_eq!(buf.len(), 50);
    }

    #[test]
    fn buffer_swap_returns_pooled_image() {
        let mut buf = HistoryBuffer::new(3);
        let mut r = rng(1);
        for i in 0..3 {
            buf.draw(fresh(i as f32), &mut r);
        }
        // warm pool holds {0,1,2}; keep drawing until a swap happens
        let mut swapped = false;
        for i in 3..50 {
            let out = buf.draw(fresh(i as f32), &mut r);
            let v = out[[0, 0, 0]];
            if v != i as f32 {
                assert!(v < i as f32, "returned image must predate the fresh one");
                swapped = true;
                break;
            }
        }
        assert!(swapped, "swap branch never taken in 47 draws");
    }

    #[test]
    fn buffer_warm_fresh_frequency_near_half() {
        let mut buf = HistoryBuffer::new(50);
        let mut r = rng(42);
        for i in 0..50 {
            buf.draw(fresh(i as f32), &mut r);
        }
        let mut fresh_count = 0usize;
        let total = 10_000usize;
        for i in 0..total {
            let v = (100 + i) as f32;
            let out = buf.draw(fresh(v), &mut r);
            if out[[0, 0, 0]] == v {
                fresh_count += 1;
            }
        }
        let freq = fresh_count as f64 / total as f64;
        assert!((freq - 0.5).abs() <= 0.02, "fresh-return frequency {freq}");
    }

    #[test]
    fn early_stop_examples() {
        let cfg = EarlyStopConfig { patience: 10, metric: "m".into(), mode: StopMode::Maximize };
        assert_eq!(early_stop_check(&[1.0, 2.0, 3.0], &cfg), StopDecision::Continue);

        // best at epoch 3 (index 2), then 10 non-improving epochs
        let mut h = vec![1.0, 2.0, 5.0];
        h.extend(std::iter::repeat(4.0).take(9));
        assert_eq!(early_stop_check(&h, &cfg), StopDecision::Continue);
        h.push(4.0);
        assert_eq!(early_stop_check(&h, &cfg), StopDecision::Stop);

        // exact ties are non-improvements
        let ties = vec![2.0; 11];
        assert_eq!(early_stop_check(&ties, &cfg), StopDecision::Stop);
        assert_eq!(early_stop_check(&vec![2.0; 10], &cfg), StopDecision::Continue);
    }

    fn tiny_specs() -> BundleSpecs {
        BundleSpecs {
            generator: GeneratorSpec { input_size: 8, base_channels: 4, depth: 1, skip_connections: true },
            discriminator: DiscriminatorSpec { input_size: 8, base_channels: 4, n_layers: 1 },
        }
    }

    fn tiny_split(n_pos: usize, n_neg: usize) -> DatasetSplit {
        let mut r = rng(5);
        let mut train = Vec::new();
        for i in 0..n_pos {
            let img = Image::new(
                Array2::from_shape_fn((8, 8), |_| r.random_range(0.2f32..0.8)),
                RangeTag::Storage01,
            )
            .unwrap();
            train.push(LabeledSample {
                id: format!("p{i}"),
                image: img,
                label: Label::Positive,
                ground_truth: None,
            });
        }
        for i in 0..n_neg {
            let img = Image::new(
                Array2::from_shape_fn((8, 8), |_| r.random_range(0.2f32..0.8)),
                RangeTag::Storage01,
            )
            .unwrap();
            train.push(LabeledSample {
                id: format!("n{i}"),
                image: img,
                label: Label::Negative,
                ground_truth: None,
            });
        }
        DatasetSplit { train, test: Vec::new(), seed: 0 }
    }

    #[test]
    fn single_class_data_is_config_error() {
        let split = tiny_split(3, 0);
        let err = train_integrated(
            &split,
            tiny_specs(),
            LossWeights::default(),
            &AdamConfig::default(),
            &EarlyStopConfig::default(),
            &TrainOptions { epochs: 1, ..Default::default() },
        )
        .err()
        .expect("expected error");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_learning_rate_keeps_every_parameter() {
        let split = tiny_split(3, 3);
        let opt = AdamConfig { learning_rate: 0.0, ..Default::default() };
        let outcome = train_integrated(
            &split,
            tiny_specs(),
            LossWeights::default(),
            &opt,
            &EarlyStopConfig::default(),
            &TrainOptions { epochs: 1, seed: 3, ..Default::default() },
        )
        .unwrap();
        let mut fresh_rng = rng(3);
        let reference = ModelBundle::<f32>::build(
            Scheme::Integrated,
            tiny_specs(),
            LossWeights::default(),
            &mut fresh_rng,
        )
        .unwrap();
        for ((_, a), (_, b)) in outcome.bundle.params().iter().zip(reference.params().iter()) {
            assert_eq!(a.to_array(), b.to_array());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut r = rng(9);
        let bundle = ModelBundle::<f32>::build(
            Scheme::Integrated,
            tiny_specs(),
            LossWeights::default(),
            &mut r,
        )
        .unwrap();
        let gen_opt = Adam::new(AdamConfig::default(), bundle.generator_params());
        let disc_opt = Adam::new(AdamConfig::default(), Vec::new());
        let ck = checkpoint_from_state(&bundle, 5, &r, &gen_opt, &disc_opt, "m", "{}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta.epoch, 5);
        let restored = bundle_from_checkpoint(&back).unwrap();

        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 8, 8]), 0.3f32));
        let a = bundle.forward_gen.forward(&x).to_array();
        let b = restored.forward_gen.forward(&x).to_array();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_magic_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected checkpoint error, got {:?}", other.err()),
        }
    }

    #[test]
    fn rgan_single_pair_runs() {
        let img = |v: f32| Image::new(Array2::from_elem((8, 8), v), RangeTag::Storage01).unwrap();
        let pairs = vec![(img(0.6), img(0.4))];
        let outcome = train_rgan(
            &pairs,
            tiny_specs(),
            LossWeights::default(),
            &AdamConfig::default(),
            &EarlyStopConfig::default(),
            &TrainOptions { epochs: 2, ..Default::default() },
        )
        .unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert!(outcome.bundle.trained);
    }

    #[test]
    fn untrained_bundle_cannot_synthesize() {
        let mut r = rng(2);
        let bundle = ModelBundle::<f32>::build(
            Scheme::CascadedCi,
            tiny_specs(),
            LossWeights::default(),
            &mut r,
        )
        .unwrap();
        let err = synthesize_pairs(&bundle, &[]).err().expect("expected error");
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn deterministic_replay_gives_identical_metrics() {
        let split = tiny_split(3, 4);
        let run = |seed| {
            train_integrated(
                &split,
                tiny_specs(),
                LossWeights::default(),
                &AdamConfig::default(),
                &EarlyStopConfig::default(),
                &TrainOptions { epochs: 2, seed, ..Default::default() },
            )
            .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
    }

    #[test]
    fn resume_continues_epoch_counter() {
        let split = tiny_split(3, 3);
        let dir = tempfile::tempdir().unwrap();
        let topts = TrainOptions {
            epochs: 2,
            seed: 4,
            run_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let first = train_integrated(
            &split,
            tiny_specs(),
            LossWeights::default(),
            &AdamConfig::default(),
            &EarlyStopConfig::default(),
            &topts,
        )
        .unwrap();
        assert!(dir.path().join("best.ckpt").exists());
        assert!(dir.path().join("metrics.csv").exists());
        assert!(dir.path().join("config.snapshot").exists());
        let last_epoch = first.records.last().unwrap().epoch;

        let resumed = train_integrated(
            &split,
            tiny_specs(),
            LossWeights::default(),
            &AdamConfig::default(),
            &EarlyStopConfig::default(),
            &TrainOptions {
                epochs: 1,
                resume: Some(dir.path().join("best.ckpt")),
                run_dir: None,
                ..topts
            },
        )
        .unwrap();
        assert!(resumed.records[0].epoch > 0);
        assert!(resumed.records[0].epoch <= last_epoch + 1);
    }
}
