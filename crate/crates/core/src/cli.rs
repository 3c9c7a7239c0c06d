//! Command-line entry points. Machine-readable JSON goes to stdout, human
//! summaries and the resolved seed to stderr.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use crate::augment::{apply_plan, sample_plan, AugmentConfig};
use crate::bayes::{uncertainty_profile, McConfig};
use crate::dataset::{generate_synthetic_corpus, prepare_test_image, scan_corpus, Split, SynthOptions};
use crate::error::{Error, Result};
use crate::eval::{ablation_to_csv, confusion_to_csv, evaluate, run_ablation, AblationSpec, Inference};
use crate::imaging::{load_image, save_image};
use crate::model::{load_checkpoint, save_checkpoint, DropoutMode, ModelConfig};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::service::{serve, LoadedModel, ServiceConfig};
use crate::train::{train, write_trace_csv, TrainConfig};

/// Environment variable that overrides every `--seed` flag.
pub const SEED_ENV: &str = "CAPTURE_ONESHOT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "capture-oneshot",
    version,
    about = "One-shot splash-screen classifier with capture augmentation and Monte Carlo dropout rejection"
)]
pub struct Cli {
    /// Worker threads for augmentation and inference (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus
    Synth(SynthArgs),
    /// Write augmented variants of one image
    Preview(PreviewArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Evaluate a checkpoint on the positive test split
    Eval(EvalArgs),
    /// Train one no-dropout model per augmentation subset and tabulate the results
    Ablate(AblateArgs),
    /// Monte Carlo uncertainty profile of a test split
    Uncertainty(UncertaintyArgs),
    /// Classify one image with rejection
    Classify(ClassifyArgs),
    /// Run the HTTP inference service
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Base seed for all randomness (overridden by CAPTURE_ONESHOT_SEED)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes
    #[arg(long)]
    pub classes: usize,
    /// Output corpus directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Captured positives per class
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
    /// Negative images (default: max(20, classes))
    #[arg(long)]
    pub negatives: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Source image
    #[arg(long, value_name = "F")]
    pub image: PathBuf,
    /// Augmentation config JSON (default: every technique enabled)
    #[arg(long, value_name = "F")]
    pub config: Option<PathBuf>,
    /// Number of variants
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Square side of the variants in pixels
    #[arg(long, default_value_t = 128)]
    pub side: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DropoutArg {
    None,
    Fixed,
    Concrete,
    Variational,
}

impl DropoutArg {
    fn mode(self) -> DropoutMode {
        match self {
            Self::None => DropoutMode::None,
            Self::Fixed => DropoutMode::fixed(),
            Self::Concrete => DropoutMode::concrete(),
            Self::Variational => DropoutMode::variational(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Dropout mode
    #[arg(long, value_enum, default_value_t = DropoutArg::Fixed)]
    pub dropout: DropoutArg,
    /// Optimizer steps
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    /// Batch size
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Network input side in pixels
    #[arg(long, default_value_t = 128, value_parser = parse_side)]
    pub side: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f32,
    /// Augmentation config JSON (default: every technique enabled)
    #[arg(long, value_name = "F")]
    pub augment: Option<PathBuf>,
    /// Loss and batch-accuracy trace CSV
    #[arg(long, value_name = "F")]
    pub trace: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn parse_side(s: &str) -> std::result::Result<usize, String> {
    match s {
        "128" => Ok(128),
        "256" => Ok(256),
        _ => Err(format!("side must be 128 or 256, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file
    #[arg(long, value_name = "F")]
    pub ckpt: PathBuf,
    /// Corpus directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Report JSON output
    #[arg(long, value_name = "F")]
    pub report: Option<PathBuf>,
    /// Confusion matrix CSV output
    #[arg(long, value_name = "F")]
    pub confusion: Option<PathBuf>,
    /// Monte Carlo passes per image; 0 evaluates one deterministic pass
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Corpus directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Ablation spec JSON, or `single` / `nested` for the built-in tables
    #[arg(long, value_name = "F")]
    pub spec: String,
    /// Output CSV (method,accuracy,f1,auc)
    #[arg(long, value_name = "F")]
    pub out: PathBuf,
    /// Optimizer steps per subset
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    /// Batch size
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Network input side in pixels
    #[arg(long, default_value_t = 128, value_parser = parse_side)]
    pub side: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Pos,
    Neg,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    /// Checkpoint file
    #[arg(long, value_name = "F")]
    pub ckpt: PathBuf,
    /// Corpus directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Test split to profile
    #[arg(long, value_enum)]
    pub split: SplitArg,
    /// Monte Carlo passes per image
    #[arg(long, default_value_t = 50)]
    pub mc_samples: usize,
    /// Rejection threshold on the uncertainty
    #[arg(long, default_value_t = 0.12)]
    pub threshold: f64,
    /// Per-item CSV output
    #[arg(long, value_name = "F")]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Checkpoint file
    #[arg(long, value_name = "F")]
    pub ckpt: PathBuf,
    /// Image to classify (PNG or JPEG)
    #[arg(long, value_name = "F")]
    pub image: PathBuf,
    /// Monte Carlo passes
    #[arg(long, default_value_t = 50)]
    pub mc_samples: usize,
    /// Rejection threshold on the uncertainty
    #[arg(long, default_value_t = 0.12)]
    pub threshold: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint file
    #[arg(long, value_name = "F")]
    pub ckpt: PathBuf,
    /// TCP port (0 picks a free one)
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Bind address
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Monte Carlo passes per request
    #[arg(long, default_value_t = 50)]
    pub mc_samples: usize,
    /// Rejection threshold on the uncertainty
    #[arg(long, default_value_t = 0.12)]
    pub threshold: f64,
    /// Requests admitted at once before answering 429
    #[arg(long, default_value_t = 64)]
    pub max_in_flight: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// `--seed`, unless the environment variable holds a valid override.
pub fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn announce_seed(flag: &SeedArg) -> Result<u64> {
    let seed = resolve_seed(flag.seed)?;
    eprintln!("seed: {seed}");
    Ok(seed)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, text)?)
}

fn mc_config(samples: usize, threshold: f64) -> Result<McConfig> {
    let mc = McConfig {
        samples,
        reject_threshold: threshold,
        ..McConfig::default()
    };
    mc.validate()?;
    Ok(mc)
}

fn load_augment(path: Option<&Path>) -> Result<AugmentConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => AugmentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let opts = SynthOptions {
        shots_per_class: args.shots,
        negatives: args.negatives,
        ..SynthOptions::with_classes(args.classes)
    };
    let manifest = generate_synthetic_corpus(&opts, &args.out, seed)?;
    eprintln!(
        "wrote {} classes, {} positives, {} negatives to {}",
        manifest.num_classes(),
        manifest.positive_test_items.len(),
        manifest.negative_test_items.len(),
        args.out.display()
    );
    println!("{}", serde_json::to_string_pretty(&manifest.to_provenance_json()?)?);
    Ok(())
}

fn run_preview(args: PreviewArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let cfg = load_augment(args.config.as_deref())?;
    let src = prepare_test_image(&load_image(&args.image)?, args.side)?;
    fs::create_dir_all(&args.out)?;
    let mut plans = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let mut rng = stream_rng(seed, stream::PREVIEW, i as u64);
        let plan = sample_plan(&cfg, &mut rng)?;
        save_image(&apply_plan(&src, &plan)?, args.out.join(format!("preview_{i:03}.png")))?;
        plans.push(serde_json::from_str::<serde_json::Value>(&plan.to_json())?);
    }
    write_text(&args.out.join("plans.json"), &serde_json::to_string_pretty(&plans)?)?;
    eprintln!("wrote {} variants to {}", args.n, args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let manifest = scan_corpus(&args.data)?;
    let augment = load_augment(args.augment.as_deref())?;
    let model_cfg = ModelConfig {
        input_side: args.side,
        ..ModelConfig::new(manifest.num_classes(), args.dropout.mode())
    };
    let train_cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&manifest, &model_cfg, &train_cfg, &augment)?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    if let Some(trace) = &args.trace {
        write_trace_csv(&outcome.trace, trace)?;
    }
    let (_, model_id) = load_checkpoint(&args.out)?;
    eprintln!("saved {} (model id {model_id})", args.out.display());
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "checkpoint": args.out,
            "model_id": model_id,
            "steps": outcome.checkpoint.step,
            "final_loss": outcome.trace.last().map(|r| r.loss),
        }))?
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let (ckpt, model_id) = load_checkpoint(&args.ckpt)?;
    let manifest = scan_corpus(&args.data)?;
    let inference = if args.mc_samples == 0 {
        Inference::Deterministic
    } else {
        Inference::MonteCarlo {
            mc: mc_config(args.mc_samples, McConfig::default().reject_threshold)?,
            seed,
        }
    };
    let report = evaluate(&ckpt, &manifest, Split::Positive, &inference)?;
    let text = report.to_json()?;
    if let Some(p) = &args.report {
        write_text(p, &text)?;
    }
    if let Some(p) = &args.confusion {
        write_text(p, &confusion_to_csv(&report))?;
    }
    eprintln!(
        "model {model_id}: accuracy {:.4}, macro F1 {:.4}, macro AUC {:.4} over {} items",
        report.accuracy, report.f1_macro, report.auc_macro_ovr, report.n_items
    );
    println!("{text}");
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let spec = match args.spec.as_str() {
        "single" => AblationSpec::single_techniques(),
        "nested" => AblationSpec::nested_combinations(),
        path => AblationSpec::from_json(&fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(PathBuf::from(path)),
            _ => Error::Io(e),
        })?)?,
    };
    let manifest = scan_corpus(&args.data)?;
    let model_cfg = ModelConfig {
        input_side: args.side,
        ..ModelConfig::new(manifest.num_classes(), DropoutMode::None)
    };
    let train_cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        seed,
        ..TrainConfig::default()
    };
    let rows = run_ablation(&manifest, &model_cfg, &train_cfg, &AugmentConfig::default(), &spec)?;
    let csv = ablation_to_csv(&rows);
    write_text(&args.out, &csv)?;
    eprint!("{csv}");
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

fn run_uncertainty(args: UncertaintyArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let (ckpt, _) = load_checkpoint(&args.ckpt)?;
    let manifest = scan_corpus(&args.data)?;
    let split = match args.split {
        SplitArg::Pos => Split::Positive,
        SplitArg::Neg => Split::Negative,
    };
    let mc = mc_config(args.mc_samples, args.threshold)?;
    let paths = manifest.split_paths(split);
    let items = manifest
        .test_samples(split, ckpt.config.input_side)?
        .into_iter()
        .zip(&paths)
        .map(|(s, p)| (p.display().to_string(), s.image))
        .collect::<Vec<_>>();
    if items.is_empty() {
        return Err(Error::EmptySplit(split.name()));
    }
    let profile = uncertainty_profile(&ckpt.params, &ckpt.config, &ckpt.classes, &items, &mc, seed)?;
    write_text(&args.out, &profile.to_csv())?;
    eprintln!(
        "{} items: confidence {}, uncertainty {:.4} ± {:.4}, rejection rate {:.3}",
        profile.summary.n,
        profile.confidence_summary(),
        profile.summary.uncertainty_mean,
        profile.summary.uncertainty_std,
        profile.summary.rejection_rate
    );
    println!("{}", serde_json::to_string_pretty(&profile.summary)?);
    Ok(())
}

fn run_classify(args: ClassifyArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let model = LoadedModel::load(&args.ckpt)?;
    let mc = mc_config(args.mc_samples, args.threshold)?;
    let bytes = fs::read(&args.image).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(args.image.clone()),
        _ => Error::Io(e),
    })?;
    let response = model.classify_bytes(&bytes, &mc, derive_seed(seed, stream::MC, 0))?;
    println!("{}", serde_json::to_string_pretty(&response)?);
    Ok(())
}

fn run_serve(args: ServeArgs) -> Result<()> {
    let seed = announce_seed(&args.seed)?;
    let cfg = ServiceConfig {
        mc: mc_config(args.mc_samples, args.threshold)?,
        server_seed: seed,
        max_in_flight: args.max_in_flight,
    };
    if !args.ckpt.is_file() {
        return Err(Error::NotFound(args.ckpt));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.host, args.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        };
        serve(listener, args.ckpt, cfg, shutdown).await
    })
}

/// Exit code for an error: 1 when the input or flags are at fault, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotFound(_)
        | Error::Decode(_)
        | Error::OutOfRange { .. }
        | Error::EvenKernel(_)
        | Error::DegenerateQuad
        | Error::EmptyClass(_)
        | Error::UnknownTestClass(_)
        | Error::Config(_)
        | Error::EmptySplit(_)
        | Error::Checkpoint(_)
        | Error::Json(_) => 1,
        _ => 2,
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // an already built pool (a second call in one process) keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Preview(a) => run_preview(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Uncertainty(a) => run_uncertainty(a),
        Command::Classify(a) => run_classify(a),
        Command::Serve(a) => run_serve(a),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Long help of a subcommand, or of the whole program for `None`.
pub fn help_text(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand {
        None => cmd.render_long_help().to_string(),
        Some(name) => cmd
            .find_subcommand_mut(name)
            .map(|c| c.render_long_help().to_string())
            .unwrap_or_default(),
    }
}

/// Names of every subcommand.
pub fn subcommands() -> Vec<String> {
    Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_flag_and_unknown_flag_exit_1() {
        assert_eq!(run_cli(["capture-oneshot", "synth", "--out", "x"]), 1);
        assert_eq!(run_cli(["capture-oneshot", "synth", "--classes", "2", "--out", "x", "--bogus"]), 1);
        assert_eq!(run_cli(["capture-oneshot", "train", "--data", "d", "--out", "o", "--side", "64"]), 1);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_cli(["capture-oneshot", "--help"]), 0);
        assert_eq!(run_cli(["capture-oneshot", "eval", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_is_a_validation_error() {
        let code = run_cli([
            "capture-oneshot",
            "classify",
            "--ckpt",
            "/nonexistent/model.ckpt",
            "--image",
            "x.png",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn help_documents_every_flag() {
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            let help = help_text(Some(sub.get_name()));
            for arg in sub.get_arguments() {
                if let Some(long) = arg.get_long() {
                    assert!(help.contains(&format!("--{long}")), "{} --{long}", sub.get_name());
                }
                assert!(arg.get_help().is_some() || arg.get_long_help().is_some() || arg.get_id() == "help");
            }
        }
    }
}
