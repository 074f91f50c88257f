//! Command-line driver for the meme robustness benchmark.
//!
//! Subcommands cover the full workflow: `train` a classifier on clean
//! data, `perturb-text`/`perturb-image` to materialize noisy datasets,
//! `attack` to craft gradient-guided artifacts (character edits, universal
//! triggers, universal image perturbations), `eval` for one condition,
//! `grid` for the full 4x3 combined-noise table, `ablate` for the
//! single-channel suite, `gen-aug` for the augmented training split, and
//! `report` to re-render persisted results.
//!
//! Every run resolves a single `RunConfig` (flags > config file >
//! defaults), derives a run id from its hash, and writes the resolved
//! config next to its outputs, so any artifact can be reproduced from the
//! directory alone. All randomness flows from the one `--seed`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 remote-endpoint
//! error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use memebench::dataset::{load_manifest, save_dataset, Dataset, Label, Split};
use memebench::harness::{
    self, evaluate_opts, gen_aug_dataset, parse_grid_csv, prepare_artifacts, remote_predict,
    render_grid, render_suite, run_grid, run_single_channel_suite, HarnessError, NoiseDefaults,
    NoiseSpec, RemoteEndpoint, ReportFormat,
};
use memebench::imagenoise::{load_uap, save_uap, CorruptionKind, ImageNoiseFamily};
use memebench::metrics::MetricsRow;
use memebench::textnoise::{TextNoiseError, TextNoiseFamily, Trigger};
use memebench::toymodel::{
    checkpoint_hash, load_checkpoint, save_checkpoint, train_classifier_with_curve, ChannelMode,
    GateKind, TrainConfig,
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Fully resolved run configuration; serialized as TOML beside every run's
/// outputs. Re-executing a persisted config reproduces the run exactly.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub run: RunSection,
    pub training: TrainingSection,
    pub noise: NoiseDefaults,
    pub channel: ChannelSection,
    pub remote: Option<RemoteEndpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, jobs: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub d: usize,
    pub d_t: usize,
    pub dropout_p: f64,
    pub with_tda: bool,
    pub gate: GateKind,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            d: t.d,
            d_t: t.d_t,
            dropout_p: t.dropout_p,
            with_tda: false,
            gate: t.gate,
        }
    }
}

impl TrainingSection {
    fn to_train_config(&self, curve_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            d: self.d,
            d_t: self.d_t,
            dropout_p: self.dropout_p,
            gate: self.gate,
            curve_path,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSection {
    pub mode: ChannelMode,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            mode: ChannelMode::Multimodal,
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "memebench",
    about = "Robustness benchmarking for multimodal meme classifiers",
    version
)]
struct Cli {
    /// Config file (TOML); explicit flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Input JSONL manifest.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Output root; runs land in `<out>/<run-id>/`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; every random choice derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid cells.
    #[arg(long)]
    jobs: Option<usize>,
    /// Trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
struct NoiseArgs {
    /// Per-eligible-word typo probability.
    #[arg(long)]
    typo_rate: Option<f64>,
    /// Character-edit budget as a fraction of caption length.
    #[arg(long)]
    hotflip_budget: Option<f64>,
    #[arg(long)]
    trigger_len: Option<usize>,
    #[arg(long)]
    trigger_iterations: Option<usize>,
    /// Corruption kind (omit to cycle through all fifteen).
    #[arg(long)]
    corruption_kind: Option<String>,
    /// Corruption severity 1-5.
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    augmix_width: Option<usize>,
    #[arg(long)]
    augmix_depth: Option<usize>,
    #[arg(long)]
    augmix_alpha: Option<f64>,
    /// L-infinity budget for the universal perturbation.
    #[arg(long)]
    uap_eps: Option<f64>,
    #[arg(long)]
    uap_epochs: Option<usize>,
    #[arg(long)]
    uap_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TextFamilyArg {
    Typos,
    Hotflip,
    Triggers,
    Backtranslation,
}

impl TextFamilyArg {
    fn family(self) -> TextNoiseFamily {
        match self {
            TextFamilyArg::Typos => TextNoiseFamily::Typos,
            TextFamilyArg::Hotflip => TextNoiseFamily::HotFlip,
            TextFamilyArg::Triggers => TextNoiseFamily::Triggers,
            TextFamilyArg::Backtranslation => TextNoiseFamily::BackTranslation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ImageFamilyArg {
    Uap,
    Corruption,
    Augmix,
}

impl ImageFamilyArg {
    fn family(self) -> ImageNoiseFamily {
        match self {
            ImageFamilyArg::Uap => ImageNoiseFamily::Uap,
            ImageFamilyArg::Corruption => ImageNoiseFamily::Corruption,
            ImageFamilyArg::Augmix => ImageNoiseFamily::Augmix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChannelArg {
    Multimodal,
    TextOnly,
    ImageOnly,
}

impl ChannelArg {
    fn mode(self) -> ChannelMode {
        match self {
            ChannelArg::Multimodal => ChannelMode::Multimodal,
            ChannelArg::TextOnly => ChannelMode::TextOnly,
            ChannelArg::ImageOnly => ChannelMode::ImageOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

impl FormatArg {
    fn format(self) -> ReportFormat {
        match self {
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the classifier on the manifest's clean train split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// Shared embedding width.
        #[arg(long)]
        dim: Option<usize>,
        /// Byte embedding width.
        #[arg(long)]
        text_dim: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Attach the text denoising adapter.
        #[arg(long)]
        with_tda: bool,
        /// Adapter gate kind: scalar | per-dimension.
        #[arg(long)]
        gate: Option<String>,
    },
    /// Write a caption-perturbed copy of a dataset.
    PerturbText {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        #[arg(long, value_enum)]
        family: TextFamilyArg,
        /// Typo rate in [0,1] (typos family).
        #[arg(long)]
        rate: Option<f64>,
        /// Trigger artifact (JSON) for the triggers family.
        #[arg(long, value_name = "FILE")]
        trigger: Option<PathBuf>,
    },
    /// Write an image-perturbed copy of a dataset.
    PerturbImage {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        #[arg(long, value_enum)]
        family: ImageFamilyArg,
        /// Universal perturbation raster for the uap family.
        #[arg(long, value_name = "FILE")]
        uap: Option<PathBuf>,
    },
    /// Craft attack artifacts against a trained model.
    Attack {
        #[command(subcommand)]
        attack: AttackCommand,
    },
    /// Evaluate one noise condition on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Text family (omit for clean captions).
        #[arg(long, value_enum)]
        text_family: Option<TextFamilyArg>,
        /// Image family (omit for clean images).
        #[arg(long, value_enum)]
        image_family: Option<ImageFamilyArg>,
        #[arg(long, value_enum)]
        channel: Option<ChannelArg>,
        /// Trigger artifact (JSON), required for the triggers family.
        #[arg(long, value_name = "FILE")]
        trigger: Option<PathBuf>,
        /// Universal perturbation raster, required for the uap family.
        #[arg(long, value_name = "FILE")]
        uap: Option<PathBuf>,
        /// Classify through the configured remote endpoint instead of the
        /// local checkpoint.
        #[arg(long)]
        remote: bool,
        /// Remote endpoint URL (overrides the config file).
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Run the full 4x3 combined text/image noise grid.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Run the single-channel (text-only / image-only) ablation suite.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Generate an augmented dataset (paraphrased captions, mixed images).
    GenAug {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Number of samples to draw (with replacement) from train.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Re-render a persisted grid report.
    Report {
        /// Grid CSV produced by `grid`.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        /// Write here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum AttackCommand {
    /// Gradient-guided character edits over a whole manifest.
    Hotflip {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Search a universal trigger on the train split.
    Trigger {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Label the trigger pushes toward (0 benign, 1 hateful).
        #[arg(long)]
        target: Option<u8>,
    },
    /// Train a universal image perturbation on the train split.
    Uap {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

// ---------------------------------------------------------------------------
// Entry
// ---------------------------------------------------------------------------

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify_error(&e)
        }
    }
}

/// Usage-level failure: wrong flag combination or value (exit 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn classify_error(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(h) = e.downcast_ref::<HarnessError>() {
        if h.is_remote() {
            return 3;
        }
        if let HarnessError::Text(TextNoiseError::Remote(_) | TextNoiseError::RemoteMalformed(_)) =
            h
        {
            return 3;
        }
    }
    if let Some(t) = e.downcast_ref::<TextNoiseError>() {
        if matches!(
            t,
            TextNoiseError::Remote(_) | TextNoiseError::RemoteMalformed(_)
        ) {
            return 3;
        }
    }
    2
}

fn execute(cli: Cli) -> Result<()> {
    let file_config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };

    match cli.command {
        Command::Train {
            common,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            dim,
            text_dim,
            dropout,
            with_tda,
            gate,
        } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_opt(&mut config.training.epochs, epochs);
            merge_opt(&mut config.training.batch_size, batch_size);
            merge_opt(&mut config.training.learning_rate, learning_rate);
            merge_opt(&mut config.training.momentum, momentum);
            merge_opt(&mut config.training.d, dim);
            merge_opt(&mut config.training.d_t, text_dim);
            merge_opt(&mut config.training.dropout_p, dropout);
            if with_tda {
                config.training.with_tda = true;
            }
            if let Some(gate) = gate {
                config.training.gate = match gate.as_str() {
                    "scalar" => GateKind::Scalar,
                    "per-dimension" | "per_dimension" => GateKind::PerDimension,
                    other => return Err(usage(format!("unknown gate kind {other:?}"))),
                };
            }
            cmd_train(config)
        }
        Command::PerturbText {
            common,
            noise,
            family,
            rate,
            trigger,
        } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            merge_opt(&mut config.noise.typo_rate, rate);
            cmd_perturb_text(config, family.family(), trigger)
        }
        Command::PerturbImage {
            common,
            noise,
            family,
            uap,
        } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            cmd_perturb_image(config, family.family(), uap)
        }
        Command::Attack { attack } => match attack {
            AttackCommand::Hotflip { common, noise } => {
                let mut config = file_config;
                merge_common(&mut config, &common);
                merge_noise(&mut config, &noise)?;
                cmd_attack_hotflip(config)
            }
            AttackCommand::Trigger {
                common,
                noise,
                target,
            } => {
                let mut config = file_config;
                merge_common(&mut config, &common);
                merge_noise(&mut config, &noise)?;
                if let Some(t) = target {
                    config.noise.trigger_target = Label::from_index(t)
                        .ok_or_else(|| usage(format!("target must be 0 or 1, got {t}")))?;
                }
                cmd_attack_trigger(config)
            }
            AttackCommand::Uap { common, noise } => {
                let mut config = file_config;
                merge_common(&mut config, &common);
                merge_noise(&mut config, &noise)?;
                cmd_attack_uap(config)
            }
        },
        Command::Eval {
            common,
            noise,
            text_family,
            image_family,
            channel,
            trigger,
            uap,
            remote,
            endpoint,
        } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            if let Some(ch) = channel {
                config.channel.mode = ch.mode();
            }
            if let Some(url) = endpoint {
                let mut ep = config.remote.take().unwrap_or(RemoteEndpoint {
                    url: String::new(),
                    timeout_ms: 10_000,
                    retries: 2,
                    backoff_ms: 250,
                    api_key: None,
                });
                ep.url = url;
                config.remote = Some(ep);
            }
            cmd_eval(
                config,
                text_family.map(TextFamilyArg::family),
                image_family.map(ImageFamilyArg::family),
                trigger,
                uap,
                remote,
            )
        }
        Command::Grid { common, noise } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            cmd_grid(config)
        }
        Command::Ablate { common, noise } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            cmd_ablate(config)
        }
        Command::GenAug { common, noise, n } => {
            let mut config = file_config;
            merge_common(&mut config, &common);
            merge_noise(&mut config, &noise)?;
            cmd_gen_aug(config, n.unwrap_or(10_000))
        }
        Command::Report { input, format, out } => cmd_report(&input, format.format(), out),
    }
}

fn merge_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn merge_common(config: &mut RunConfig, common: &CommonArgs) {
    if common.manifest.is_some() {
        config.paths.manifest = common.manifest.clone();
    }
    if common.out.is_some() {
        config.paths.out_dir = common.out.clone();
    }
    if common.checkpoint.is_some() {
        config.paths.checkpoint = common.checkpoint.clone();
    }
    merge_opt(&mut config.run.seed, common.seed);
    merge_opt(&mut config.run.jobs, common.jobs);
}

fn merge_noise(config: &mut RunConfig, noise: &NoiseArgs) -> Result<()> {
    merge_opt(&mut config.noise.typo_rate, noise.typo_rate);
    merge_opt(&mut config.noise.hotflip_budget_frac, noise.hotflip_budget);
    merge_opt(&mut config.noise.trigger_len, noise.trigger_len);
    merge_opt(
        &mut config.noise.trigger_iterations,
        noise.trigger_iterations,
    );
    if let Some(kind) = &noise.corruption_kind {
        let parsed = CorruptionKind::parse(kind)
            .ok_or_else(|| usage(format!("unknown corruption kind {kind:?}")))?;
        config.noise.corruption_kind = Some(parsed);
    }
    if let Some(severity) = noise.severity {
        if !(1..=5).contains(&severity) {
            return Err(usage(format!("severity must be 1..=5, got {severity}")));
        }
        config.noise.corruption_severity = severity;
    }
    merge_opt(&mut config.noise.augmix_width, noise.augmix_width);
    merge_opt(&mut config.noise.augmix_depth, noise.augmix_depth);
    merge_opt(&mut config.noise.augmix_alpha, noise.augmix_alpha);
    merge_opt(&mut config.noise.uap_eps, noise.uap_eps);
    merge_opt(&mut config.noise.uap_epochs, noise.uap_epochs);
    merge_opt(&mut config.noise.uap_step, noise.uap_step);
    Ok(())
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Deterministic run id: hash of the subcommand tag and the resolved
/// config, so identical invocations share a directory and re-running
/// overwrites with identical bytes.
fn run_dir(config: &RunConfig, tag: &str) -> Result<PathBuf> {
    use sha2::{Digest, Sha256};
    let toml = toml::to_string(config).context("serialize resolved config")?;
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(toml.as_bytes());
    let hash = format!("{:x}", hasher.finalize());
    let out_root = config
        .paths
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let dir = out_root.join(format!("{tag}-{}", &hash[..12]));
    fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml).context("write resolved config")?;
    Ok(dir)
}

fn require_manifest(config: &RunConfig) -> Result<Dataset> {
    let path = config
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| usage("--manifest (or [paths].manifest in the config) is required"))?;
    Ok(load_manifest(path)?)
}

fn require_model(config: &RunConfig) -> Result<memebench::toymodel::ToyModel> {
    let path = config
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("--checkpoint (or [paths].checkpoint in the config) is required"))?;
    Ok(load_checkpoint(path)?)
}

fn init_jobs(config: &RunConfig) {
    if config.run.jobs > 0 {
        // Errors only if a global pool exists already, which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.jobs)
            .build_global();
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_train(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let train_split = data.subset(Split::Train);
    let dir = run_dir(&config, "train")?;
    let train_config = config.training.to_train_config(Some(dir.join("curve.csv")));
    let (model, curve) = train_classifier_with_curve(
        &train_split,
        &train_config,
        config.training.with_tda,
        config.run.seed,
    )?;
    let checkpoint = dir.join("model.bin");
    let config_hash = {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(toml::to_string(&config)?.as_bytes());
        format!("{:x}", hasher.finalize())
    };
    save_checkpoint(&model, &checkpoint, config.run.seed, &config_hash)?;
    if let Some(last) = curve.last() {
        eprintln!(
            "trained {} epochs on {} samples: loss {:.4}, accuracy {:.3}",
            curve.len(),
            train_split.len(),
            last.loss,
            last.accuracy
        );
    }
    println!("{}", checkpoint.display());
    Ok(())
}

fn load_trigger(path: &Path) -> Result<Trigger> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read trigger {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad trigger file {}", path.display()))
}

fn cmd_perturb_text(
    config: RunConfig,
    family: TextNoiseFamily,
    trigger_path: Option<PathBuf>,
) -> Result<()> {
    let data = require_manifest(&config)?;
    let trigger = match (&family, trigger_path) {
        (TextNoiseFamily::Triggers, Some(path)) => Some(load_trigger(&path)?),
        (TextNoiseFamily::Triggers, None) => {
            return Err(usage("--trigger FILE is required for the triggers family"))
        }
        _ => None,
    };
    let model = match family {
        TextNoiseFamily::HotFlip => Some(require_model(&config)?),
        _ => None,
    };
    let dir = run_dir(&config, "perturb-text")?;
    let spec = config.noise.cell_spec(
        config.run.seed,
        family,
        ImageNoiseFamily::None,
        trigger.as_ref(),
        None,
    );
    let perturbed = harness::perturb_dataset(model.as_ref(), &data, &spec, &config.noise)?;
    let manifest = save_dataset(&perturbed, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_perturb_image(
    config: RunConfig,
    family: ImageNoiseFamily,
    uap_path: Option<PathBuf>,
) -> Result<()> {
    let data = require_manifest(&config)?;
    let uap = match (&family, uap_path) {
        (ImageNoiseFamily::Uap, Some(path)) => Some(std::sync::Arc::new(load_uap(&path)?.0)),
        (ImageNoiseFamily::Uap, None) => {
            return Err(usage("--uap FILE is required for the uap family"))
        }
        _ => None,
    };
    let dir = run_dir(&config, "perturb-image")?;
    let spec = config.noise.cell_spec(
        config.run.seed,
        TextNoiseFamily::None,
        family,
        None,
        uap.as_ref(),
    );
    let perturbed = harness::perturb_dataset(None, &data, &spec, &config.noise)?;
    let manifest = save_dataset(&perturbed, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_attack_hotflip(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let model = require_model(&config)?;
    let dir = run_dir(&config, "attack-hotflip")?;
    let spec = config.noise.cell_spec(
        config.run.seed,
        TextNoiseFamily::HotFlip,
        ImageNoiseFamily::None,
        None,
        None,
    );
    let perturbed = harness::perturb_dataset(Some(&model), &data, &spec, &config.noise)?;
    let manifest = save_dataset(&perturbed, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_attack_trigger(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let model = require_model(&config)?;
    let dir = run_dir(&config, "attack-trigger")?;
    let train = data.subset(Split::Train);
    let trigger = prepare_artifacts_trigger_only(&model, &train, &config)?;
    let path = dir.join("trigger.json");
    fs::write(&path, serde_json::to_string_pretty(&trigger)?)?;
    eprintln!(
        "trigger {:?} with search loss {:.6}",
        trigger.tokens, trigger.search_loss
    );
    println!("{}", path.display());
    Ok(())
}

/// Trigger search without the expense of also training a UAP.
fn prepare_artifacts_trigger_only(
    model: &memebench::toymodel::ToyModel,
    train: &Dataset,
    config: &RunConfig,
) -> Result<Trigger> {
    let mut defaults = config.noise.clone();
    defaults.uap_epochs = 0;
    defaults.uap_eps = 0.0;
    let artifacts = prepare_artifacts(model, train, config.run.seed, &defaults)?;
    Ok(artifacts.trigger)
}

fn cmd_attack_uap(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let model = require_model(&config)?;
    let dir = run_dir(&config, "attack-uap")?;
    let train = data.subset(Split::Train);
    if train.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Train).into());
    }
    let delta = memebench::imagenoise::train_uap(
        &model,
        &train,
        config.noise.uap_eps,
        config.noise.uap_epochs,
        config.noise.uap_step,
        memebench::rng::derive_seed(config.run.seed, &[0x0a9]),
    )?;
    let model_hash = config
        .paths
        .checkpoint
        .as_ref()
        .map(|p| checkpoint_hash(p))
        .transpose()?
        .unwrap_or_default();
    let path = dir.join("uap.bin");
    save_uap(&delta, &path, &model_hash)?;
    eprintln!("fooling rate {:.3}", delta.fooling_rate);
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(
    config: RunConfig,
    text_family: Option<TextNoiseFamily>,
    image_family: Option<ImageNoiseFamily>,
    trigger_path: Option<PathBuf>,
    uap_path: Option<PathBuf>,
    remote: bool,
) -> Result<()> {
    let data = require_manifest(&config)?;
    let test = data.subset(Split::Test);
    if test.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Test).into());
    }
    let trigger = trigger_path.map(|p| load_trigger(&p)).transpose()?;
    let uap = uap_path
        .map(|p| load_uap(&p).map(|(d, _)| std::sync::Arc::new(d)))
        .transpose()?;
    let text = text_family.unwrap_or(TextNoiseFamily::None);
    let image = image_family.unwrap_or(ImageNoiseFamily::None);
    if text == TextNoiseFamily::Triggers && trigger.is_none() {
        return Err(usage("--trigger FILE is required for the triggers family"));
    }
    if image == ImageNoiseFamily::Uap && uap.is_none() {
        return Err(usage("--uap FILE is required for the uap family"));
    }
    let spec = config
        .noise
        .cell_spec(config.run.seed, text, image, trigger.as_ref(), uap.as_ref());

    let dir = run_dir(&config, "eval")?;
    let rows = if remote {
        let endpoint = config
            .remote
            .clone()
            .filter(|e| !e.url.is_empty())
            .ok_or_else(|| {
                usage("--endpoint (or [remote] in the config) is required with --remote")
            })?;
        eval_remote(&endpoint, &test, &spec, &config.noise)?
    } else {
        let model = require_model(&config)?;
        init_jobs(&config);
        let clean = evaluate_opts(
            &model,
            &test,
            &NoiseSpec::clean(config.run.seed),
            config.channel.mode,
            &config.noise,
            None,
        )?;
        if spec.is_clean() {
            vec![clean]
        } else {
            let row = evaluate_opts(
                &model,
                &test,
                &spec,
                config.channel.mode,
                &config.noise,
                Some(&clean),
            )?;
            vec![clean, row]
        }
    };

    let mut csv = String::from(MetricsRow::CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    }
    fs::write(dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Remote-channel evaluation: perturb locally, classify via the endpoint,
/// compute metrics locally.
fn eval_remote(
    endpoint: &RemoteEndpoint,
    test: &Dataset,
    spec: &NoiseSpec,
    defaults: &NoiseDefaults,
) -> Result<Vec<MetricsRow>> {
    use memebench::metrics::{auroc, basic_metrics, confusion};
    let eval_one = |eval_spec: &NoiseSpec| -> Result<MetricsRow> {
        let perturbed = harness::perturb_dataset(None, test, eval_spec, defaults)?;
        let mut predictions = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for sample in &perturbed.samples {
            let (label, probs) = remote_predict(endpoint, sample)?;
            predictions.push(label);
            scores.push(probs[1]);
            labels.push(sample.label);
        }
        let counts = confusion(&predictions, &labels)?;
        let basics = basic_metrics(&counts)?;
        let area = auroc(&scores, &labels)?;
        Ok(MetricsRow::from_parts(eval_spec.condition(), &basics, area))
    };
    let clean = eval_one(&NoiseSpec::clean(spec.cell_seed))?;
    if spec.is_clean() {
        return Ok(vec![clean]);
    }
    let row = eval_one(spec)?.with_robustness(clean.accuracy)?;
    Ok(vec![clean, row])
}

fn cmd_grid(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let model = require_model(&config)?;
    init_jobs(&config);
    let dir = run_dir(&config, "grid")?;
    let report = run_grid(&model, &data, config.run.seed, &config.noise)?;
    let csv = render_grid(&report, ReportFormat::Csv);
    let md = render_grid(&report, ReportFormat::Markdown);
    fs::write(dir.join("grid.csv"), &csv)?;
    fs::write(dir.join("grid.md"), &md)?;
    eprintln!(
        "average drop acc/auroc/f1: {:.4}/{:.4}/{:.4}; dropping rate {:.2}%/{:.2}%/{:.2}%",
        report.average_drop.accuracy,
        report.average_drop.auroc,
        report.average_drop.f1,
        report.average_dropping_rate.accuracy * 100.0,
        report.average_dropping_rate.auroc * 100.0,
        report.average_dropping_rate.f1 * 100.0,
    );
    println!("{}", dir.join("grid.csv").display());
    Ok(())
}

fn cmd_ablate(config: RunConfig) -> Result<()> {
    let data = require_manifest(&config)?;
    let model = require_model(&config)?;
    init_jobs(&config);
    let dir = run_dir(&config, "ablate")?;
    let suite = run_single_channel_suite(&model, &data, config.run.seed, &config.noise)?;
    fs::write(dir.join("ablate.csv"), render_suite(&suite, ReportFormat::Csv))?;
    fs::write(
        dir.join("ablate.md"),
        render_suite(&suite, ReportFormat::Markdown),
    )?;
    println!("{}", dir.join("ablate.csv").display());
    Ok(())
}

fn cmd_gen_aug(config: RunConfig, n: usize) -> Result<()> {
    let data = require_manifest(&config)?;
    let dir = run_dir(&config, "gen-aug")?;
    let manifest = gen_aug_dataset(&data, n, config.run.seed, &dir.join("aug"), &config.noise)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_report(input: &Path, format: ReportFormat, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(input)
        .with_context(|| format!("cannot read report {}", input.display()))?;
    let report = parse_grid_csv(&text)?;
    let rendered = render_grid(&report, format);
    match out {
        Some(path) => fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
