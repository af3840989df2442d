//! `cxgen`: synthesize data, train either scheme, explain images and score
//! the results.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cxgen_core::autodiff::AdamConfig;
use cxgen_core::domain::{DatasetSplit, Image, Label, LossWeights, RangeTag};
use cxgen_core::error::{Error, Result};
use cxgen_core::eval::evaluate_dataset;
use cxgen_core::explain::explain;
use cxgen_core::imageio::{load_png_gray, save_f32, save_png16, save_png8};
use cxgen_core::nets::{BundleSpecs, DiscriminatorSpec, GeneratorSpec, ModelBundle};
use cxgen_core::syndata::{export_dataset, generate_dataset, SynthConfig};
use cxgen_core::train::{
    bundle_from_checkpoint, load_checkpoint, synthesize_pairs, train_ci_cyclegan, train_integrated,
    train_rgan, EarlyStopConfig, TrainOptions, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "cxgen", version, about = "Counterfactual-explanation GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and export a synthetic dataset.
    Synth(SynthArgs),
    /// Train a scheme on an exported dataset.
    Train(TrainArgs),
    /// Produce map / counterfactual / mask artifacts for input images.
    Explain(ExplainArgs),
    /// Score a checkpoint on the test split of an exported dataset.
    Evaluate(EvaluateArgs),
    /// Summary table plus per-sample panel figures for a checkpoint.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the export tree.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f32>,
    /// JSON file with a full synthesis configuration; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SchemeArg {
    Integrated,
    Cascaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Profile {
    /// 500 samples at 32 px; the CPU fallback budget.
    Desk32,
    /// 2000 samples at 64 px.
    Desk64,
}

/// File-configurable training settings; any CLI flag overrides its field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFileConfig {
    scheme: Option<SchemeArg>,
    profile: Option<Profile>,
    epochs: Option<usize>,
    seed: Option<u64>,
    learning_rate: Option<f64>,
    lambda_cc: Option<f64>,
    lambda_l1: Option<f64>,
    patience: Option<usize>,
    base_channels: Option<usize>,
    depth: Option<usize>,
    n_layers: Option<usize>,
    deterministic: Option<bool>,
    saturating: Option<bool>,
    literal_backward_cycle: Option<bool>,
    validation_fraction: Option<f64>,
    checkpoint_every: Option<usize>,
    panels: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Exported dataset root (contains manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_cc: Option<f64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    deterministic: Option<bool>,
    /// Use the printed saturating generator loss instead of -ln D(fake).
    #[arg(long)]
    saturating: bool,
    #[arg(long)]
    literal_backward_cycle: bool,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write per-epoch sample panels.
    #[arg(long)]
    panels: bool,
    /// JSON config file; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold_fraction: f32,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Exported dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold_fraction: f32,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold_fraction: f32,
    /// Cap on the number of panel figures.
    #[arg(long, default_value_t = 16)]
    max_panels: usize,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn check_device() -> Result<()> {
    if let Ok(dev) = std::env::var("CXGEN_DEVICE") {
        if dev != "cpu" {
            return Err(Error::Config(format!(
                "CXGEN_DEVICE={dev} is not available; only \"cpu\" is supported"
            )));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Explain(a) => cmd_explain(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::for_size(a.size.unwrap_or(128)),
    };
    if let Some(size) = a.size {
        let scaled = SynthConfig::for_size(size);
        cfg.image_size = scaled.image_size;
        cfg.circle_radius = scaled.circle_radius;
    }
    if let Some(n) = a.n {
        cfg.n_samples = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    let split = generate_dataset(&cfg)?;
    export_dataset(&split, &cfg, &a.out)?;
    println!(
        "exported {} train / {} test samples to {}",
        split.train.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

struct ResolvedTrain {
    scheme: SchemeArg,
    base_channels: usize,
    depth: usize,
    n_layers: usize,
    weights: LossWeights,
    opt: AdamConfig,
    stop: EarlyStopConfig,
    topts: TrainOptions,
}

fn make_specs(input_size: usize, base: usize, depth: usize, n_layers: usize) -> BundleSpecs {
    BundleSpecs {
        generator: GeneratorSpec {
            input_size,
            base_channels: base,
            depth,
            skip_connections: true,
        },
        discriminator: DiscriminatorSpec { input_size, base_channels: base, n_layers },
    }
}

fn resolve_train(a: &TrainArgs) -> Result<ResolvedTrain> {
    let file: TrainFileConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFileConfig::default(),
    };
    let profile = a.profile.or(file.profile);
    let (p_epochs, p_base, p_depth, p_layers) = match profile {
        Some(Profile::Desk32) => (100, 16, 3, 2),
        Some(Profile::Desk64) => (100, 32, 4, 3),
        None => (50, 16, 3, 2),
    };
    let scheme = a
        .scheme
        .or(file.scheme)
        .ok_or_else(|| Error::Config("--scheme is required (integrated or cascaded)".into()))?;
    let weights = LossWeights {
        lambda_cc: a.lambda_cc.or(file.lambda_cc).unwrap_or(10.0),
        lambda_l1: a.lambda_l1.or(file.lambda_l1).unwrap_or(100.0),
    };
    let opt = AdamConfig {
        learning_rate: a.learning_rate.or(file.learning_rate).unwrap_or(2e-4),
        ..AdamConfig::default()
    };
    let stop = EarlyStopConfig {
        patience: a.patience.or(file.patience).unwrap_or(10),
        ..EarlyStopConfig::default()
    };
    let topts = TrainOptions {
        epochs: a.epochs.or(file.epochs).unwrap_or(p_epochs),
        seed: a.seed.or(file.seed).unwrap_or(7),
        deterministic: a.deterministic.or(file.deterministic).unwrap_or(true),
        non_saturating: !(a.saturating || file.saturating.unwrap_or(false)),
        literal_backward_cycle: a.literal_backward_cycle
            || file.literal_backward_cycle.unwrap_or(false),
        validation_fraction: a.validation_fraction.or(file.validation_fraction).unwrap_or(0.1),
        checkpoint_every: a.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
        sample_panels: a.panels || file.panels.unwrap_or(false),
        resume: a.resume.clone(),
        ..TrainOptions::default()
    };
    Ok(ResolvedTrain {
        scheme,
        base_channels: a.base_channels.or(file.base_channels).unwrap_or(p_base),
        depth: a.depth.or(file.depth).unwrap_or(p_depth),
        n_layers: a.n_layers.or(file.n_layers).unwrap_or(p_layers),
        weights,
        opt,
        stop,
        topts,
    })
}

fn dataset_image_size(data: &DatasetSplit) -> Result<usize> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Ingest("dataset has no training samples".into()))?;
    let (h, w) = first.image.shape();
    if h != w {
        return Err(Error::Ingest(format!("expected square images, found {h}x{w}")));
    }
    Ok(h)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let r = resolve_train(&a)?;
    let data = cxgen_core::ingest::load_export(&a.data)?;
    let size = dataset_image_size(&data)?;
    let specs = make_specs(size, r.base_channels, r.depth, r.n_layers);
    fs::create_dir_all(&a.run)?;

    match r.scheme {
        SchemeArg::Integrated => {
            let topts = TrainOptions { run_dir: Some(a.run.clone()), ..r.topts };
            let outcome = train_integrated(&data, specs, r.weights, &r.opt, &r.stop, &topts)?;
            print_outcome("integrated", &outcome);
        }
        SchemeArg::Cascaded => {
            // phase 1: unpaired translation
            let phase1 = TrainOptions {
                run_dir: Some(a.run.join("phase1_ci")),
                resume: r.topts.resume.clone(),
                ..r.topts.clone()
            };
            let ci = train_ci_cyclegan(&data, specs, r.weights, &r.opt, &r.stop, &phase1)?;
            print_outcome("cascaded phase 1 (ci)", &ci);

            // synthesized pair cache
            let positives: Vec<_> = data
                .train
                .iter()
                .filter(|s| s.label == Label::Positive)
                .cloned()
                .collect();
            let pairs = synthesize_pairs(&ci.bundle, &positives)?;
            let pair_dir = a.run.join("pairs");
            fs::create_dir_all(&pair_dir)?;
            for (i, (pos, neg)) in pairs.iter().enumerate() {
                save_png16(&pair_dir.join(format!("pair_{i:05}_pos.png")), pos.as_storage().data())?;
                save_png16(&pair_dir.join(format!("pair_{i:05}_neg.png")), neg.as_storage().data())?;
            }

            // phase 2: residual generator on the pairs
            let phase2 = TrainOptions {
                run_dir: Some(a.run.join("phase2_rgan")),
                resume: None,
                ..r.topts
            };
            let rg = train_rgan(&pairs, specs, r.weights, &r.opt, &r.stop, &phase2)?;
            print_outcome("cascaded phase 2 (rgan)", &rg);
        }
    }
    Ok(())
}

fn print_outcome(name: &str, outcome: &TrainOutcome) {
    println!(
        "{name}: {} epochs, best {} = {:.4} at epoch {}",
        outcome.records.len(),
        outcome.val_metric,
        outcome.best_score,
        outcome.best_epoch
    );
}

fn fnv1a_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn checkpoint_hash(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", fnv1a_bytes(&fs::read(path)?)))
}

fn load_bundle(path: &Path) -> Result<(ModelBundle<f32>, String)> {
    let ckpt = load_checkpoint(path)?;
    let bundle = bundle_from_checkpoint(&ckpt)?;
    Ok((bundle, checkpoint_hash(path)?))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest(format!("no PNG files under {}", input.display())));
    }
    Ok(files)
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let (bundle, hash) = load_bundle(&a.ckpt)?;
    fs::create_dir_all(&a.out)?;
    for path in png_inputs(&a.input)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Ingest(format!("bad file name: {}", path.display())))?;
        let img = Image::new(load_png_gray(&path)?, RangeTag::Storage01)?;
        let ex = explain(&bundle, &img, a.threshold_fraction)?;
        save_f32(&a.out.join(format!("{stem}_map.f32")), ex.map.data())?;
        save_png16(
            &a.out.join(format!("{stem}_cf.png")),
            ex.counterfactual.from_model_range()?.data(),
        )?;
        save_png8(
            &a.out.join(format!("{stem}_mask.png")),
            &ex.mask.data().mapv(|b| if b { 1.0f32 } else { 0.0 }),
        )?;
        let sidecar = serde_json::json!({
            "source": path.display().to_string(),
            "threshold_fraction": a.threshold_fraction,
            "checkpoint_hash": hash,
            "map_shape": [ex.map.shape().0, ex.map.shape().1],
        });
        fs::write(
            a.out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (bundle, hash) = load_bundle(&a.ckpt)?;
    let data = cxgen_core::ingest::load_export(&a.data)?;
    let report = evaluate_dataset(&bundle, &data.test, a.threshold_fraction, &hash)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    let summary = report.summary_table();
    fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    let skipped = report.rows.iter().filter(|r| r.skipped.is_some()).count();
    if skipped > 0 {
        return Err(Error::Metric(format!("{skipped} samples skipped (missing ground truth)")));
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let (bundle, hash) = load_bundle(&a.ckpt)?;
    let data = cxgen_core::ingest::load_export(&a.data)?;
    let report = evaluate_dataset(&bundle, &data.test, a.threshold_fraction, &hash)?;
    fs::create_dir_all(a.out.join("panels"))?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    fs::write(a.out.join("summary.txt"), report.summary_table())?;
    print!("{}", report.summary_table());

    let mut written = 0usize;
    for s in data.test.iter().filter(|s| s.label == Label::Positive) {
        if written >= a.max_panels {
            break;
        }
        let Some(gt) = &s.ground_truth else { continue };
        let ex = explain(&bundle, &s.image, a.threshold_fraction)?;
        let input = s.image.as_storage();
        let (h, w) = input.shape();
        let mut panel = ndarray::Array2::<f32>::zeros((h, w * 4 + 3));
        let gt_mask = gt.mask();
        let cf = ex.counterfactual.from_model_range()?;
        for i in 0..h {
            for j in 0..w {
                panel[[i, j]] = input.data()[[i, j]];
                panel[[i, w + 1 + j]] = (ex.map.data()[[i, j]] + 2.0) / 4.0;
                panel[[i, 2 * w + 2 + j]] = cf.data()[[i, j]];
                panel[[i, 3 * w + 3 + j]] = gt_mask.data()[[i, j]] as u8 as f32;
            }
        }
        save_png8(&a.out.join("panels").join(format!("{}.png", s.id)), &panel)?;
        written += 1;
    }
    println!("wrote {written} panel figures");
    Ok(())
}
