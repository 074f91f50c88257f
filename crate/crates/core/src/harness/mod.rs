//! Evaluation harness: single-condition evaluation, the 4x3 combined-noise
//! grid, single-channel ablations, augmented-dataset generation, an
//! optional remote classifier client, and table rendering.
//!
//! Reproducibility contract: every random choice derives from the run seed
//! through order-free per-cell and per-sample seeds, the clean baseline is
//! computed once per run and shared by all robustness columns, and attack
//! artifacts (universal perturbation, trigger) are trained once per run on
//! the train split only.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{save_dataset, DataError, Dataset, Label, MemeSample, Split};
use crate::imagenoise::{
    apply_corruption, apply_uap, augmix, train_uap, CorruptionKind, ImageNoiseError,
    ImageNoiseFamily, ImageNoiseSpec, UapDelta,
};
use crate::metrics::{auroc, basic_metrics, confusion, MetricsError, MetricsRow};
use crate::rng::{derive_seed, seeded_rng};
use crate::textnoise::{
    apply_trigger_tokens, backtranslate, hotflip_attack, perturb_typos, universal_trigger_search,
    RuleParaphraser, TextNoiseError, TextNoiseFamily, TextNoiseSpec, Trigger, TriggerSearchInput,
};
use crate::toymodel::{predict_with_mode, ChannelMode, ModelError, ToyModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("noise spec requires a trained uap delta but none is attached")]
    MissingUapDelta,
    #[error("noise spec requires precomputed trigger tokens but none are attached")]
    MissingTrigger,
    #[error("the character-edit attack needs a trained model")]
    NeedsModel,
    #[error("dataset has no non-empty {0} split")]
    EmptySplit(Split),
    #[error("cannot draw {n} augmented samples from an empty source")]
    EmptyAugSource { n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextNoiseError),
    #[error(transparent)]
    Image(#[from] ImageNoiseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("remote endpoint error: {0}")]
    Remote(String),
    #[error("remote endpoint returned malformed payload: {0}")]
    MalformedResponse(String),
    #[error("cannot parse report: {0}")]
    BadReport(String),
}

impl HarnessError {
    /// True for failures of the remote classifier channel (exit code 3).
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            HarnessError::Remote(_) | HarnessError::MalformedResponse(_)
        )
    }
}

// ---------------------------------------------------------------------------
// Noise specs and defaults
// ---------------------------------------------------------------------------

/// One perturbation condition: a text family crossed with an image family.
/// `(none, none)` is the clean baseline.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub text: TextNoiseSpec,
    pub image: ImageNoiseSpec,
    /// Derived deterministically from `(run_seed, text family, image
    /// family)`, so adding cells never perturbs existing ones.
    pub cell_seed: u64,
}

impl NoiseSpec {
    pub fn clean(run_seed: u64) -> NoiseSpec {
        let cell_seed = cell_seed(run_seed, 0, 0);
        NoiseSpec {
            text: TextNoiseSpec::clean(cell_seed),
            image: ImageNoiseSpec::clean(cell_seed),
            cell_seed,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.text.family == TextNoiseFamily::None && self.image.family == ImageNoiseFamily::None
    }

    /// Condition tag used in reports: `clean` or `t<i>-i<j>`.
    pub fn condition(&self) -> String {
        if self.is_clean() {
            "clean".to_string()
        } else {
            format!("t{}-i{}", self.text.family.index(), self.image.family.index())
        }
    }
}

/// Per-cell seed: an order-free mix of the run seed and the family pair.
pub fn cell_seed(run_seed: u64, text_family: u8, image_family: u8) -> u64 {
    derive_seed(run_seed, &[text_family as u64, image_family as u64])
}

/// Default knobs for every noise family; all overridable via config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseDefaults {
    /// Per-eligible-word typo probability.
    pub typo_rate: f64,
    /// Character-edit budget as a fraction of caption length (ceil).
    pub hotflip_budget_frac: f64,
    pub trigger_len: usize,
    pub trigger_iterations: usize,
    /// Vocabulary size mined from the most frequent train-split words.
    pub trigger_vocab: usize,
    /// At most this many train samples drive the trigger search.
    pub trigger_search_cap: usize,
    /// Label the trigger pushes toward (benign = evasion).
    pub trigger_target: Label,
    /// Fixed corruption kind; `None` cycles deterministically through all
    /// fifteen kinds per sample, which is what a "common corruptions"
    /// grid cell means.
    pub corruption_kind: Option<CorruptionKind>,
    pub corruption_severity: u8,
    pub augmix_width: usize,
    pub augmix_depth: usize,
    pub augmix_alpha: f64,
    pub uap_eps: f64,
    pub uap_epochs: usize,
    pub uap_step: f64,
}

impl Default for NoiseDefaults {
    fn default() -> Self {
        NoiseDefaults {
            typo_rate: 0.3,
            hotflip_budget_frac: 0.05,
            trigger_len: 3,
            trigger_iterations: 5,
            trigger_vocab: 24,
            trigger_search_cap: 128,
            trigger_target: Label::Benign,
            corruption_kind: None,
            corruption_severity: 3,
            augmix_width: 3,
            augmix_depth: 3,
            augmix_alpha: 1.0,
            uap_eps: 8.0 / 255.0,
            uap_epochs: 10,
            uap_step: 2.0 / 255.0,
        }
    }
}

impl NoiseDefaults {
    /// Build the spec for grid cell `(text_family, image_family)`,
    /// attaching shared attack artifacts where the family needs them.
    pub fn cell_spec(
        &self,
        run_seed: u64,
        text_family: TextNoiseFamily,
        image_family: ImageNoiseFamily,
        trigger: Option<&Trigger>,
        uap: Option<&Arc<UapDelta>>,
    ) -> NoiseSpec {
        let seed = cell_seed(run_seed, text_family.index(), image_family.index());
        let severity = match text_family {
            TextNoiseFamily::HotFlip => self.hotflip_budget_frac,
            _ => self.typo_rate,
        };
        NoiseSpec {
            text: TextNoiseSpec {
                family: text_family,
                severity,
                seed,
                trigger: trigger.map(|t| t.tokens.clone()),
            },
            image: ImageNoiseSpec {
                family: image_family,
                corruption_kind: self
                    .corruption_kind
                    .unwrap_or(CorruptionKind::GaussianNoise),
                severity: self.corruption_severity,
                seed,
                uap_delta: uap.cloned(),
            },
            cell_seed: seed,
        }
    }

    fn rotate_corruptions(&self) -> bool {
        self.corruption_kind.is_none()
    }
}

// ---------------------------------------------------------------------------
// Single-condition evaluation
// ---------------------------------------------------------------------------

/// Perturb one sample according to the spec (text first, then image; the
/// two pipelines are independent, the order is fixed for reproducibility).
/// A model is required only by the gradient-guided character attack.
fn perturb_sample(
    model: Option<&ToyModel>,
    sample: &MemeSample,
    sample_idx: usize,
    spec: &NoiseSpec,
    defaults: &NoiseDefaults,
    mode: ChannelMode,
) -> Result<MemeSample, HarnessError> {
    let mut out = sample.clone();

    match spec.text.family {
        TextNoiseFamily::None => {}
        TextNoiseFamily::Typos => {
            let seed = derive_seed(spec.cell_seed, &[1, sample_idx as u64]);
            out.caption = perturb_typos(&sample.caption, spec.text.severity, seed);
        }
        TextNoiseFamily::HotFlip => {
            let model = model.ok_or(HarnessError::NeedsModel)?;
            let budget = (spec.text.severity * sample.caption.chars().count() as f64).ceil() as usize;
            let surface = model.caption_surface(sample, sample.label, mode)?;
            out.caption = hotflip_attack(
                &surface,
                &sample.caption,
                budget,
                &crate::textnoise::default_charset(),
            )?;
        }
        TextNoiseFamily::Triggers => {
            let tokens = spec
                .text
                .trigger
                .as_ref()
                .ok_or(HarnessError::MissingTrigger)?;
            out.caption = apply_trigger_tokens(&sample.caption, tokens);
        }
        TextNoiseFamily::BackTranslation => {
            let provider = RuleParaphraser::new(derive_seed(spec.cell_seed, &[4]));
            out.caption = backtranslate(&sample.caption, &provider)?;
        }
    }

    match spec.image.family {
        ImageNoiseFamily::None => {}
        ImageNoiseFamily::Uap => {
            let delta = spec
                .image
                .uap_delta
                .as_ref()
                .ok_or(HarnessError::MissingUapDelta)?;
            out.image = apply_uap(&sample.image, delta);
        }
        ImageNoiseFamily::Corruption => {
            let seed = derive_seed(spec.cell_seed, &[2, sample_idx as u64]);
            let kind = if defaults.rotate_corruptions() {
                let all = CorruptionKind::ALL;
                all[(derive_seed(spec.cell_seed, &[0x6b, sample_idx as u64]) % all.len() as u64)
                    as usize]
            } else {
                spec.image.corruption_kind
            };
            out.image = apply_corruption(&sample.image, kind, spec.image.severity, seed)?;
        }
        ImageNoiseFamily::Augmix => {
            let seed = derive_seed(spec.cell_seed, &[3, sample_idx as u64]);
            out.image = augmix(
                &sample.image,
                defaults.augmix_width,
                defaults.augmix_depth,
                defaults.augmix_alpha,
                seed,
            )?;
        }
    }

    Ok(out)
}

/// Apply one noise spec to every sample, returning the perturbed copy of
/// the dataset. Per-sample seeds derive from the spec's cell seed exactly
/// as during evaluation.
pub fn perturb_dataset(
    model: Option<&ToyModel>,
    data: &Dataset,
    spec: &NoiseSpec,
    defaults: &NoiseDefaults,
) -> Result<Dataset, HarnessError> {
    let samples = data
        .samples
        .iter()
        .enumerate()
        .map(|(idx, s)| perturb_sample(model, s, idx, spec, defaults, ChannelMode::Multimodal))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        samples,
        split: data.split,
        source_manifest: data.source_manifest.clone(),
    })
}

/// Evaluate one condition over a dataset.
///
/// Perturbed specs get robustness columns relative to a clean baseline; a
/// clean spec returns them absent. When no baseline row is supplied for a
/// perturbed spec, the clean baseline is evaluated internally first.
pub fn evaluate(
    model: &ToyModel,
    dataset: &Dataset,
    spec: &NoiseSpec,
    mode: ChannelMode,
) -> Result<MetricsRow, HarnessError> {
    evaluate_opts(model, dataset, spec, mode, &NoiseDefaults::default(), None)
}

pub fn evaluate_opts(
    model: &ToyModel,
    dataset: &Dataset,
    spec: &NoiseSpec,
    mode: ChannelMode,
    defaults: &NoiseDefaults,
    baseline: Option<&MetricsRow>,
) -> Result<MetricsRow, HarnessError> {
    if dataset.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut scores = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for (idx, sample) in dataset.samples.iter().enumerate() {
        let perturbed = perturb_sample(Some(model), sample, idx, spec, defaults, mode)?;
        let (label, probs) = predict_with_mode(model, &perturbed, mode)?;
        predictions.push(label);
        scores.push(probs[1]);
        labels.push(sample.label);
    }
    let counts = confusion(&predictions, &labels)?;
    let basics = basic_metrics(&counts)?;
    let area = auroc(&scores, &labels)?;
    let row = MetricsRow::from_parts(spec.condition(), &basics, area);

    if spec.is_clean() {
        return Ok(row);
    }
    let clean_accuracy = match baseline {
        Some(clean) => clean.accuracy,
        None => {
            let clean_spec = NoiseSpec::clean(spec.cell_seed);
            evaluate_opts(model, dataset, &clean_spec, mode, defaults, None)?.accuracy
        }
    };
    Ok(row.with_robustness(clean_accuracy)?)
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Grid cell key: text family index 1..=4, image family index 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub text: u8,
    pub image: u8,
}

/// Per-metric drop (clean minus cell).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deltas {
    pub accuracy: f64,
    pub auroc: f64,
    pub f1: f64,
}

/// The combined-noise report: the clean baseline, all 12 cells, per-cell
/// drops, and the footer averages.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub clean: MetricsRow,
    pub cells: Vec<(CellKey, MetricsRow)>,
    pub deltas: Vec<(CellKey, Deltas)>,
    /// Mean drop over the 12 cells, per metric.
    pub average_drop: Deltas,
    /// `average_drop / clean`, per metric (a fraction; render as percent).
    pub average_dropping_rate: Deltas,
}

impl GridReport {
    /// Assemble a report from evaluated rows, recomputing every derived
    /// column exactly (`delta = clean - cell`, footer means, rate =
    /// drop / clean).
    pub fn from_rows(clean: MetricsRow, mut cells: Vec<(CellKey, MetricsRow)>) -> GridReport {
        cells.sort_by_key(|(key, _)| *key);
        let deltas: Vec<(CellKey, Deltas)> = cells
            .iter()
            .map(|(key, row)| {
                (
                    *key,
                    Deltas {
                        accuracy: clean.accuracy - row.accuracy,
                        auroc: clean.auroc - row.auroc,
                        f1: clean.f1 - row.f1,
                    },
                )
            })
            .collect();
        let n = deltas.len().max(1) as f64;
        let average_drop = Deltas {
            accuracy: deltas.iter().map(|(_, d)| d.accuracy).sum::<f64>() / n,
            auroc: deltas.iter().map(|(_, d)| d.auroc).sum::<f64>() / n,
            f1: deltas.iter().map(|(_, d)| d.f1).sum::<f64>() / n,
        };
        let average_dropping_rate = Deltas {
            accuracy: average_drop.accuracy / clean.accuracy,
            auroc: average_drop.auroc / clean.auroc,
            f1: average_drop.f1 / clean.f1,
        };
        GridReport {
            clean,
            cells,
            deltas,
            average_drop,
            average_dropping_rate,
        }
    }

    /// Build a report from table-shaped `(accuracy, auroc, f1)` triples,
    /// e.g. printed values; the non-table metric fields stay zero.
    pub fn from_table(
        clean: (f64, f64, f64),
        cells: &[(u8, u8, (f64, f64, f64))],
    ) -> GridReport {
        let clean_row = table_row("clean".to_string(), clean, None);
        let cell_rows: Vec<(CellKey, MetricsRow)> = cells
            .iter()
            .map(|&(t, i, values)| {
                (
                    CellKey { text: t, image: i },
                    table_row(format!("t{t}-i{i}"), values, Some(clean.0)),
                )
            })
            .collect();
        GridReport::from_rows(clean_row, cell_rows)
    }
}

fn table_row(condition: String, (accuracy, auroc, f1): (f64, f64, f64), clean_acc: Option<f64>) -> MetricsRow {
    let mut row = MetricsRow {
        condition,
        accuracy,
        precision: 0.0,
        recall: 0.0,
        f1,
        f1_macro: 0.0,
        auroc,
        abs_robust: None,
        rel_robust: None,
        degenerate: false,
    };
    if let Some(clean) = clean_acc {
        row.abs_robust = Some(crate::metrics::abs_robustness(clean, accuracy));
        row.rel_robust = crate::metrics::rel_robustness(clean, accuracy).ok();
    }
    row
}

/// Shared attack artifacts for one run: both are produced once on the
/// train split and reused by every cell that needs them, so attack
/// variance never leaks into grid comparisons.
pub struct RunArtifacts {
    pub uap: Arc<UapDelta>,
    pub trigger: Trigger,
}

/// Train the run's universal perturbation and search its trigger.
pub fn prepare_artifacts(
    model: &ToyModel,
    train: &Dataset,
    run_seed: u64,
    defaults: &NoiseDefaults,
) -> Result<RunArtifacts, HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Train));
    }
    let uap = train_uap(
        model,
        train,
        defaults.uap_eps,
        defaults.uap_epochs,
        defaults.uap_step,
        derive_seed(run_seed, &[0x0a9]),
    )?;

    let vocab = mine_vocabulary(train, defaults.trigger_vocab);
    let search_samples: Vec<&MemeSample> = train
        .samples
        .iter()
        .take(defaults.trigger_search_cap)
        .collect();
    let surfaces: Vec<_> = search_samples
        .iter()
        .map(|s| model.caption_surface(s, defaults.trigger_target, ChannelMode::Multimodal))
        .collect::<Result<_, _>>()?;
    let inputs: Vec<TriggerSearchInput> = search_samples
        .iter()
        .zip(surfaces.iter())
        .map(|(s, surface)| TriggerSearchInput {
            caption: &s.caption,
            surface,
        })
        .collect();
    let trigger = universal_trigger_search(
        &inputs,
        &vocab,
        defaults.trigger_len,
        defaults.trigger_target,
        defaults.trigger_iterations,
    )?;
    Ok(RunArtifacts {
        uap: Arc::new(uap),
        trigger,
    })
}

/// Most frequent train-split words, ties broken lexicographically.
pub fn mine_vocabulary(dataset: &Dataset, size: usize) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for sample in &dataset.samples {
        for word in sample.caption.split_whitespace() {
            *counts.entry(word).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(size)
        .map(|(w, _)| w.to_string())
        .collect()
}

/// Run the full 4x3 combined grid: clean baseline plus every text/image
/// family pair, deltas, and footer averages. The model is evaluated on the
/// test split; attack artifacts come from the train split.
pub fn run_grid(
    model: &ToyModel,
    data: &Dataset,
    run_seed: u64,
    defaults: &NoiseDefaults,
) -> Result<GridReport, HarnessError> {
    let train = data.subset(Split::Train);
    let test = data.subset(Split::Test);
    if test.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Test));
    }
    let artifacts = prepare_artifacts(model, &train, run_seed, defaults)?;

    let clean = evaluate_opts(
        model,
        &test,
        &NoiseSpec::clean(run_seed),
        ChannelMode::Multimodal,
        defaults,
        None,
    )?;

    let mut cell_specs = Vec::new();
    for text_family in TextNoiseFamily::perturbed() {
        for image_family in ImageNoiseFamily::perturbed() {
            cell_specs.push((
                CellKey {
                    text: text_family.index(),
                    image: image_family.index(),
                },
                defaults.cell_spec(
                    run_seed,
                    text_family,
                    image_family,
                    Some(&artifacts.trigger),
                    Some(&artifacts.uap),
                ),
            ));
        }
    }

    // Cells are independent: per-cell seeds are order-free, so parallel
    // evaluation collects into the same report.
    let cells: Vec<(CellKey, MetricsRow)> = cell_specs
        .par_iter()
        .map(|(key, spec)| {
            evaluate_opts(
                model,
                &test,
                spec,
                ChannelMode::Multimodal,
                defaults,
                Some(&clean),
            )
            .map(|row| (*key, row))
        })
        .collect::<Result<_, _>>()?;

    Ok(GridReport::from_rows(clean, cells))
}

// ---------------------------------------------------------------------------
// Single-channel ablation suite
// ---------------------------------------------------------------------------

/// Table-6-shaped output: text-only rows over the caption families,
/// image-only rows over the image families, each with its own clean
/// baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSuite {
    pub text_rows: Vec<MetricsRow>,
    pub image_rows: Vec<MetricsRow>,
}

pub fn run_single_channel_suite(
    model: &ToyModel,
    data: &Dataset,
    run_seed: u64,
    defaults: &NoiseDefaults,
) -> Result<ChannelSuite, HarnessError> {
    let train = data.subset(Split::Train);
    let test = data.subset(Split::Test);
    if test.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Test));
    }
    let artifacts = prepare_artifacts(model, &train, run_seed, defaults)?;

    let mut text_rows = Vec::with_capacity(5);
    let text_clean = evaluate_opts(
        model,
        &test,
        &NoiseSpec::clean(run_seed),
        ChannelMode::TextOnly,
        defaults,
        None,
    )?;
    for family in TextNoiseFamily::perturbed() {
        let spec = defaults.cell_spec(
            run_seed,
            family,
            ImageNoiseFamily::None,
            Some(&artifacts.trigger),
            None,
        );
        let mut row = evaluate_opts(
            model,
            &test,
            &spec,
            ChannelMode::TextOnly,
            defaults,
            Some(&text_clean),
        )?;
        row.condition = text_family_tag(family).to_string();
        text_rows.push(row);
    }
    let mut text_clean = text_clean;
    text_clean.condition = "clean".to_string();
    text_rows.insert(0, text_clean);

    let mut image_rows = Vec::with_capacity(4);
    let image_clean = evaluate_opts(
        model,
        &test,
        &NoiseSpec::clean(run_seed),
        ChannelMode::ImageOnly,
        defaults,
        None,
    )?;
    for family in ImageNoiseFamily::perturbed() {
        let spec = defaults.cell_spec(
            run_seed,
            TextNoiseFamily::None,
            family,
            None,
            Some(&artifacts.uap),
        );
        let mut row = evaluate_opts(
            model,
            &test,
            &spec,
            ChannelMode::ImageOnly,
            defaults,
            Some(&image_clean),
        )?;
        row.condition = image_family_tag(family).to_string();
        image_rows.push(row);
    }
    let mut image_clean = image_clean;
    image_clean.condition = "clean".to_string();
    image_rows.insert(0, image_clean);

    Ok(ChannelSuite {
        text_rows,
        image_rows,
    })
}

pub fn text_family_tag(family: TextNoiseFamily) -> &'static str {
    match family {
        TextNoiseFamily::None => "clean",
        TextNoiseFamily::Typos => "typos",
        TextNoiseFamily::HotFlip => "hotflip",
        TextNoiseFamily::Triggers => "triggers",
        TextNoiseFamily::BackTranslation => "backtranslation",
    }
}

pub fn image_family_tag(family: ImageNoiseFamily) -> &'static str {
    match family {
        ImageNoiseFamily::None => "clean",
        ImageNoiseFamily::Uap => "uap",
        ImageNoiseFamily::Corruption => "corruption",
        ImageNoiseFamily::Augmix => "augmix",
    }
}

// ---------------------------------------------------------------------------
// Augmented dataset generation
// ---------------------------------------------------------------------------

/// Draw `n` samples (with replacement) from the train split, paraphrase
/// every caption through the built-in provider and push every image
/// through the compositional augmenter, then persist under `out_dir` with
/// split tag `aug`. Each output records its source id in
/// `aux["source_id"]`. Returns the manifest path.
pub fn gen_aug_dataset(
    data: &Dataset,
    n: usize,
    run_seed: u64,
    out_dir: &Path,
    defaults: &NoiseDefaults,
) -> Result<PathBuf, HarnessError> {
    let source = data.subset(Split::Train);
    if source.is_empty() && n > 0 {
        return Err(HarnessError::EmptyAugSource { n });
    }
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = seeded_rng(derive_seed(run_seed, &[0xa7_6, k as u64]));
        let src = &source.samples[rng.random_range(0..source.len())];
        let provider = RuleParaphraser::new(derive_seed(run_seed, &[0xb7, k as u64]));
        let caption = backtranslate(&src.caption, &provider)?;
        let image = augmix(
            &src.image,
            defaults.augmix_width,
            defaults.augmix_depth,
            defaults.augmix_alpha,
            derive_seed(run_seed, &[0xa0, k as u64]),
        )?;
        let mut aux = src.aux.clone();
        aux.insert("source_id".to_string(), src.id.clone());
        samples.push(MemeSample {
            id: format!("aug-{k:06}"),
            image,
            caption,
            label: src.label,
            split: Split::Aug,
            aux,
        });
    }
    let dataset = Dataset::new(samples, out_dir.join("manifest.jsonl"))?;
    Ok(save_dataset(&dataset, out_dir)?)
}

// ---------------------------------------------------------------------------
// Remote classifier client
// ---------------------------------------------------------------------------

/// Remote classifier endpoint configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Bearer token, typically sourced from an environment variable.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub api_key: Option<String>,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    caption: &'a str,
    /// Base64-encoded PNG.
    image: String,
}

#[derive(Deserialize)]
struct RemoteResponse {
    label: i64,
    probs: Vec<f64>,
}

/// Classify one sample through a remote endpoint:
/// `POST {caption, image}` (image as base64 PNG) expecting
/// `{label, probs}`. Transport failures and 5xx responses are retried with
/// backoff, then surfaced as typed errors — never as a default label.
pub fn remote_predict(
    endpoint: &RemoteEndpoint,
    sample: &MemeSample,
) -> Result<(Label, [f64; 2]), HarnessError> {
    use base64::Engine;

    let mut png = Vec::new();
    sample
        .image
        .write_with_encoder(image::codecs::png::PngEncoder::new(&mut png))
        .map_err(|e| HarnessError::Remote(format!("png encode: {e}")))?;
    let body = RemoteRequest {
        caption: &sample.caption,
        image: base64::engine::general_purpose::STANDARD.encode(&png),
    };

    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(endpoint.timeout_ms))
        .build()
        .map_err(|e| HarnessError::Remote(e.to_string()))?;

    let mut last_error = String::new();
    for attempt in 0..=endpoint.retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(
                endpoint.backoff_ms.saturating_mul(attempt as u64),
            ));
        }
        let mut request = client.post(&endpoint.url).json(&body);
        if let Some(key) = &endpoint.api_key {
            request = request.bearer_auth(key);
        }
        match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_server_error() {
                    last_error = format!("server error {status}");
                    continue;
                }
                if !status.is_success() {
                    return Err(HarnessError::Remote(format!("status {status}")));
                }
                let payload: RemoteResponse = response
                    .json()
                    .map_err(|e| HarnessError::MalformedResponse(e.to_string()))?;
                let label = u8::try_from(payload.label)
                    .ok()
                    .and_then(Label::from_index)
                    .ok_or_else(|| {
                        HarnessError::MalformedResponse(format!("label {}", payload.label))
                    })?;
                if payload.probs.len() != 2 || payload.probs.iter().any(|p| !p.is_finite()) {
                    return Err(HarnessError::MalformedResponse(format!(
                        "probs {:?}",
                        payload.probs
                    )));
                }
                return Ok((label, [payload.probs[0], payload.probs[1]]));
            }
            Err(e) => {
                last_error = e.to_string();
            }
        }
    }
    Err(HarnessError::Remote(format!(
        "gave up after {} attempts: {last_error}",
        endpoint.retries + 1
    )))
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

const GRID_CSV_HEADER: &str = "text_noise,image_noise,accuracy,auroc,f1,delta_acc,delta_auroc,delta_f1";

const GRID_FOOTNOTES: &str = "\u{2020} text noise: 1 = typos, 2 = character edits, 3 = universal triggers, 4 = back-translation\n\u{2021} image noise: 1 = universal adversarial perturbation, 2 = common corruptions, 3 = compositional augmentation\n";

/// Render a grid report. Metrics print with 3 decimals, deltas with 4,
/// dropping rates as percentages with 2.
pub fn render_grid(report: &GridReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(GRID_CSV_HEADER);
            out.push('\n');
            out.push_str(&format!(
                "0,0,{:.3},{:.3},{:.3},,,\n",
                report.clean.accuracy, report.clean.auroc, report.clean.f1
            ));
            for ((key, row), (_, delta)) in report.cells.iter().zip(report.deltas.iter()) {
                out.push_str(&format!(
                    "{},{},{:.3},{:.3},{:.3},{:.4},{:.4},{:.4}\n",
                    key.text,
                    key.image,
                    row.accuracy,
                    row.auroc,
                    row.f1,
                    delta.accuracy,
                    delta.auroc,
                    delta.f1
                ));
            }
            out.push_str(&format!(
                "average_drop,,,,,{:.4},{:.4},{:.4}\n",
                report.average_drop.accuracy, report.average_drop.auroc, report.average_drop.f1
            ));
            out.push_str(&format!(
                "average_dropping_rate,,,,,{:.2}%,{:.2}%,{:.2}%\n",
                report.average_dropping_rate.accuracy * 100.0,
                report.average_dropping_rate.auroc * 100.0,
                report.average_dropping_rate.f1 * 100.0
            ));
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(
                "| Text noise\u{2020} | Image noise\u{2021} | Accuracy | AUROC | F1 | \u{394}Acc | \u{394}AUROC | \u{394}F1 |\n",
            );
            out.push_str("|---|---|---|---|---|---|---|---|\n");
            out.push_str(&format!(
                "| 0 | 0 | {:.3} | {:.3} | {:.3} | \u{2013} | \u{2013} | \u{2013} |\n",
                report.clean.accuracy, report.clean.auroc, report.clean.f1
            ));
            for ((key, row), (_, delta)) in report.cells.iter().zip(report.deltas.iter()) {
                out.push_str(&format!(
                    "| {} | {} | {:.3} | {:.3} | {:.3} | {:.4} | {:.4} | {:.4} |\n",
                    key.text,
                    key.image,
                    row.accuracy,
                    row.auroc,
                    row.f1,
                    delta.accuracy,
                    delta.auroc,
                    delta.f1
                ));
            }
            out.push_str(&format!(
                "| **Average drop** | | | | | {:.4} | {:.4} | {:.4} |\n",
                report.average_drop.accuracy, report.average_drop.auroc, report.average_drop.f1
            ));
            out.push_str(&format!(
                "| **Average dropping rate** | | | | | {:.2}% | {:.2}% | {:.2}% |\n",
                report.average_dropping_rate.accuracy * 100.0,
                report.average_dropping_rate.auroc * 100.0,
                report.average_dropping_rate.f1 * 100.0
            ));
            out.push('\n');
            out.push_str(GRID_FOOTNOTES);
            out
        }
    }
}

/// Parse a grid CSV back into a report. Table-visible fields are restored
/// verbatim; deltas, footer averages and robustness columns are recomputed
/// from the parsed rows (they are recomputable by construction).
pub fn parse_grid_csv(text: &str) -> Result<GridReport, HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::BadReport("empty input".to_string()))?;
    if header != GRID_CSV_HEADER {
        return Err(HarnessError::BadReport(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut clean: Option<(f64, f64, f64)> = None;
    let mut cells: Vec<(u8, u8, (f64, f64, f64))> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == "average_drop" || fields[0] == "average_dropping_rate" {
            continue; // recomputed from the cells
        }
        if fields.len() != 8 {
            return Err(HarnessError::BadReport(format!(
                "row has {} fields: {line:?}",
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, HarnessError> {
            s.parse()
                .map_err(|_| HarnessError::BadReport(format!("bad number {s:?}")))
        };
        let t: u8 = fields[0]
            .parse()
            .map_err(|_| HarnessError::BadReport(format!("bad family {:?}", fields[0])))?;
        let i: u8 = fields[1]
            .parse()
            .map_err(|_| HarnessError::BadReport(format!("bad family {:?}", fields[1])))?;
        let values = (parse_f(fields[2])?, parse_f(fields[3])?, parse_f(fields[4])?);
        if t == 0 && i == 0 {
            clean = Some(values);
        } else {
            cells.push((t, i, values));
        }
    }
    let clean = clean.ok_or_else(|| HarnessError::BadReport("missing clean row".to_string()))?;
    Ok(GridReport::from_table(clean, &cells))
}

/// Render the single-channel suite. The text table keys rows by caption
/// family, the image table by image family; neither carries the other
/// channel's column.
pub fn render_suite(suite: &ChannelSuite, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::new();
            out.push_str("text_noise,accuracy,auroc,f1,precision,recall,abs_robust,rel_robust\n");
            for row in &suite.text_rows {
                out.push_str(&row.to_csv_line());
                out.push('\n');
            }
            out.push('\n');
            out.push_str("image_noise,accuracy,auroc,f1,precision,recall,abs_robust,rel_robust\n");
            for row in &suite.image_rows {
                out.push_str(&row.to_csv_line());
                out.push('\n');
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("## Text-only channel\n\n");
            out.push_str(&suite_table(&suite.text_rows, "Text noise"));
            out.push_str("\n## Image-only channel\n\n");
            out.push_str(&suite_table(&suite.image_rows, "Image noise"));
            out
        }
    }
}

fn suite_table(rows: &[MetricsRow], first_column: &str) -> String {
    let mut out = format!(
        "| {first_column} | Accuracy | AUROC | F1 | Abs. Robust. | Rel. Robust. |\n|---|---|---|---|---|---|\n"
    );
    for row in rows {
        let abs = row
            .abs_robust
            .map(|v| format!("{v:.5}"))
            .unwrap_or_else(|| "\u{2013}".to_string());
        let rel = row
            .rel_robust
            .map(|v| format!("{v:.5}"))
            .unwrap_or_else(|| "\u{2013}".to_string());
        out.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {} | {} |\n",
            row.condition, row.accuracy, row.auroc, row.f1, abs, rel
        ));
    }
    out
}

#[cfg(test)]
mod tests;
