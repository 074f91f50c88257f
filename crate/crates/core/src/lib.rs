//! Robustness benchmarking for multimodal meme classifiers.
//!
//! The crate pairs four caption-noise families (typos, gradient-guided
//! character edits, universal triggers, back-translation) with three
//! image-noise families (universal adversarial perturbations, common
//! corruptions, compositional augmentation), runs them against a small
//! fully differentiable image+text classifier, and reports accuracy,
//! AUROC, F1 and absolute/relative robustness for every condition,
//! including the full 4x3 combined-noise grid.
//!
//! Modules:
//! - [`dataset`]: JSONL manifest + PNG storage for image/caption/label records.
//! - [`textnoise`]: the four caption perturbation families.
//! - [`imagenoise`]: the three image perturbation families.
//! - [`toymodel`]: the classifier, its manual backpropagation, the text
//!   denoising adapter, and the Jacobian sensitivity probe.
//! - [`metrics`]: classification metrics and robustness scores.
//! - [`harness`]: single-cell evaluation, the combined grid, channel
//!   ablations, augmented-dataset generation, and report rendering.
//! - [`synth`]: synthetic fixture datasets for smoke tests and demos.

pub mod dataset;
pub mod harness;
pub mod imagenoise;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod textnoise;
pub mod toymodel;
