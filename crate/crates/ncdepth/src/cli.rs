//! The `ncdepth` command-line driver: train / eval / infer / gradcheck /
//! synth / summary over the library, with a strict JSON configuration.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error (missing or
//! malformed files, shape mismatches), 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_dataset, load_depth_png, save_conf_png, save_dataset, save_depth_png,
    MetricsAccumulator, MetricsReport, Sample,
};
use crate::error::{NcError, Result};
use crate::nconv::NConvLayer;
use crate::network::{
    build_model, load_checkpoint, model_forward_padded, Model, ModelSpec, Variant,
};
use crate::rng::SeededRng;
use crate::tensor::SignalPair;
use crate::training::{gradcheck_layer, gradcheck_model, train, TrainConfig};

/// Gradcheck failures above this relative error make the subcommand exit
/// nonzero.
pub const GRADCHECK_GATE: f64 = 1e-4;

/// JSON training configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
}

fn default_variant() -> Variant {
    Variant::Hms
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticDataset),
    Directory(DirectoryDataset),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    pub size: usize,
    pub density: f64,
    pub gt_coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryDataset {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<CliConfig> {
        serde_json::from_str(text).map_err(|e| NcError::Invalid(format!("config json: {e}")))
    }

    /// The seeded training samples this configuration describes.
    pub fn load_train_samples(&self) -> Result<Vec<Sample>> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                let all = gen_synthetic(self.seed, s.n_train + s.n_test, s.size, s.density, s.gt_coverage)?;
                Ok(all.into_iter().take(s.n_train).collect())
            }
            DatasetConfig::Directory(d) => load_dataset(&d.path, &d.split),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ncdepth",
    version,
    about = "Confidence-propagating normalized convolution networks for sparse depth completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a JSON config file.
    Train {
        /// Path to the JSON configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset split and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (contains <split>/{sparse,gt}/NNNNN.png).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Densify one sparse depth PNG; writes dense depth and confidence PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit sparse depth PNG (pixel = meters * 256, 0 = missing).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_depth: PathBuf,
        #[arg(long)]
        out_conf: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "hms")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize a seeded synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        density: f64,
        #[arg(long, default_value_t = 0.3)]
        gt_coverage: f64,
    },
    /// Print a variant's layer manifest and parameter total.
    Summary {
        #[arg(long, default_value = "hms")]
        variant: String,
    },
}

fn exit_code(err: &NcError) -> i32 {
    match err {
        NcError::Invalid(_) => 1,
        NcError::NonFinite(_) => 3,
        NcError::Shape(_)
        | NcError::Io { .. }
        | NcError::Format(_)
        | NcError::InsufficientSupport(_)
        | NcError::DegenerateBasis(_) => 2,
    }
}

/// Parse `std::env::args` and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and exit 0; real usage errors
            // are configuration errors
            let is_error = e.use_stderr();
            let _ = e.print();
            return if is_error { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, &split, &out),
        Command::Infer {
            checkpoint,
            input,
            out_depth,
            out_conf,
        } => cmd_infer(&checkpoint, &input, &out_depth, &out_conf),
        Command::Gradcheck { variant, seed } => cmd_gradcheck(&variant, seed),
        Command::Synth {
            out,
            seed,
            n_train,
            n_test,
            size,
            density,
            gt_coverage,
        } => cmd_synth(&out, seed, n_train, n_test, size, density, gt_coverage),
        Command::Summary { variant } => cmd_summary(&variant),
    }
}

fn cmd_train(config_path: &Path) -> Result<()> {
    // an unreadable config file is a configuration error, not a data error
    let text = fs::read_to_string(config_path)
        .map_err(|e| NcError::Invalid(format!("cannot read config {}: {e}", config_path.display())))?;
    let cfg = CliConfig::from_json(&text)?;
    let samples = cfg.load_train_samples()?;
    let model = build_model(ModelSpec {
        variant: cfg.variant,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
    })?;
    println!(
        "training {} ({} parameters) on {} samples for {} epochs",
        cfg.variant.name(),
        model.count_params(),
        samples.len(),
        cfg.epochs
    );
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        output_dir: Some(cfg.output_dir.clone()),
    };
    let outcome = train(model, &samples, &train_cfg)?;
    for row in &outcome.history {
        println!(
            "epoch {:>3}: data {:.6}  total {:.6}  mean conf {:.4}  ({:.2}s)",
            row.epoch, row.mean_data_loss, row.mean_total_loss, row.mean_output_conf, row.seconds
        );
    }
    println!(
        "best epoch {} -> {}; final -> {}",
        outcome.best_epoch,
        cfg.output_dir.join(crate::training::BEST_CHECKPOINT).display(),
        cfg.output_dir.join(crate::training::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// Evaluation report schema, versioned.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub variant: String,
    pub param_count: usize,
    pub n_samples: usize,
    pub metrics: MetricsReport,
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_dataset(data, split)?;
    let report = evaluate_model(&model, &samples)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| NcError::Format(format!("report json: {e}")))?;
    fs::write(out, format!("{json}\n")).map_err(|e| NcError::io(out, e))?;
    println!("{json}");
    Ok(())
}

/// Pool metrics for a model over a set of samples.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(NcError::Invalid("no samples to evaluate".into()));
    }
    let mut acc = MetricsAccumulator::new();
    for s in samples {
        let input = SignalPair::new(s.sparse_depth.clone(), s.input_conf.clone())?;
        let out = model_forward_padded(model, &input)?;
        acc.add(&out.data, &s.gt_depth, &s.gt_valid)?;
    }
    Ok(EvalReport {
        schema: "ncdepth-eval/1".into(),
        variant: model.variant().name().into(),
        param_count: model.count_params(),
        n_samples: samples.len(),
        metrics: acc.finish()?,
    })
}

fn cmd_infer(checkpoint: &Path, input: &Path, out_depth: &Path, out_conf: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (depth, conf) = load_depth_png(input)?;
    let out = model_forward_padded(&model, &SignalPair::new(depth, conf)?)?;
    // depth PNGs cannot encode negative values; clip for export
    let mut dense = out.data;
    for v in dense.values_mut() {
        *v = v.max(0.0);
    }
    let mut confidence = out.conf;
    for v in confidence.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    save_depth_png(&dense, out_depth)?;
    save_conf_png(&confidence, out_conf)?;
    println!(
        "wrote {} and {}",
        out_depth.display(),
        out_conf.display()
    );
    Ok(())
}

fn cmd_gradcheck(variant: &str, seed: u64) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let mut rng = SeededRng::new(seed);
    let layer = NConvLayer::new_seeded(2, 3, 3, 3, 1e-8, &mut rng)?;
    let layer_report = gradcheck_layer(&layer, 6, 6, seed ^ 0x5eed)?;
    println!(
        "single layer : worst relative error {:.3e} at {} ({} parameters)",
        layer_report.worst_rel_err, layer_report.worst_param, layer_report.params_probed
    );
    let model = build_model(ModelSpec {
        variant,
        epsilon: 1e-8,
        seed,
    })?;
    let model_report = gradcheck_model(&model, 8, 8, seed ^ 0xfeed)?;
    println!(
        "full model   : worst relative error {:.3e} at {} ({} parameters)",
        model_report.worst_rel_err, model_report.worst_param, model_report.params_probed
    );
    let worst = layer_report.worst_rel_err.max(model_report.worst_rel_err);
    if worst > GRADCHECK_GATE {
        return Err(NcError::NonFinite(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {GRADCHECK_GATE:.0e}"
        )));
    }
    println!("gradient check passed (gate {GRADCHECK_GATE:.0e})");
    Ok(())
}

fn cmd_synth(
    out: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
    size: usize,
    density: f64,
    gt_coverage: f64,
) -> Result<()> {
    let all = gen_synthetic(seed, n_train + n_test, size, density, gt_coverage)?;
    let (train_split, test_split) = all.split_at(n_train);
    if !train_split.is_empty() {
        save_dataset(out, "train", train_split)?;
    }
    if !test_split.is_empty() {
        save_dataset(out, "test", test_split)?;
    }
    println!(
        "wrote {} train / {} test samples ({}x{}, density {density}, gt coverage {gt_coverage}) to {}",
        train_split.len(),
        test_split.len(),
        size,
        size,
        out.display()
    );
    Ok(())
}

fn cmd_summary(variant: &str) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let model = build_model(ModelSpec {
        variant,
        epsilon: 1e-8,
        seed: 0,
    })?;
    println!("variant: {}", variant.name());
    println!("{:<10} {:<6} {:<18} {:>8}", "bank", "kind", "weights", "params");
    for bank in model.banks() {
        let (o, i, kh, kw) = bank.weight_shape();
        println!(
            "{:<10} {:<6} {:<18} {:>8}",
            bank.name,
            bank.kind(),
            format!("{o}x{i}x{kh}x{kw} (+{o} bias)"),
            bank.param_count()
        );
    }
    println!("total parameters: {}", model.count_params());
    Ok(())
}
