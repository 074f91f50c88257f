//! Synthetic fixture datasets.
//!
//! Generates small, label-separable image+caption corpora: captions draw
//! from disjoint per-class vocabularies (plus shared filler words) and
//! images carry a class-correlated color shift under texture and noise.
//! Useful for smoke tests, demos, and anywhere a real meme corpus is not
//! available or not redistributable.

use std::collections::BTreeMap;
use std::path::PathBuf;

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{Dataset, Label, MemeSample, Split};
use crate::rng::{derive_seed, seeded_rng};

const BENIGN_WORDS: &[&str] = &[
    "sunny", "kind", "hope", "friend", "happy", "flower", "gentle", "smile", "peace", "warm",
    "garden", "bright", "caring", "welcome", "together",
];

const HOSTILE_WORDS: &[&str] = &[
    "vile", "nasty", "cruel", "sneer", "mock", "spite", "bitter", "harsh", "grim", "scorn",
    "sour", "bleak", "taunt", "loathe", "menace",
];

const FILLER_WORDS: &[&str] = &[
    "the", "this", "that", "meme", "post", "very", "so", "much", "about", "people", "today",
    "online", "again", "when", "share", "look", "with", "just", "like", "everyone",
];

/// Fraction of captions carrying one stray word from the other class.
/// Keeps the decision margin realistic so perturbations can flip samples.
const CONTAMINATION: f64 = 0.15;

/// How far the red/blue channels shift with the class. Small relative to
/// the caption signal so trained models lean on text, mirroring the
/// modality balance the harness is designed to probe.
const CLASS_COLOR_SHIFT: f32 = 0.02;

/// A single-split fixture dataset (all samples tagged `train`).
pub fn make_synthetic_dataset(n: usize, seed: u64, img_size: u32) -> Dataset {
    let samples = (0..n)
        .map(|i| make_sample(i, seed, img_size, Split::Train))
        .collect();
    Dataset::new(samples, PathBuf::from(format!("synthetic-{seed}"))).expect("synthetic ids unique")
}

/// A fixture dataset with explicit train/val/test partition sizes.
pub fn make_synthetic_dataset_with_splits(
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
    img_size: u32,
) -> Dataset {
    let mut samples = Vec::with_capacity(train + val + test);
    let mut idx = 0;
    for (count, split) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        for _ in 0..count {
            samples.push(make_sample(idx, seed, img_size, split));
            idx += 1;
        }
    }
    Dataset::new(samples, PathBuf::from(format!("synthetic-{seed}"))).expect("synthetic ids unique")
}

/// Knobs for [`make_benchmark_dataset`].
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub img_size: u32,
    /// Fraction of labels flipped after caption generation; bounds the
    /// attainable margin like real annotation noise does.
    pub label_noise: f64,
    /// Extra filler words per caption beyond the separable fixture.
    pub extra_fillers: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            train: 196,
            val: 0,
            test: 63,
            img_size: 32,
            label_noise: 0.08,
            extra_fillers: 4,
        }
    }
}

/// A harder fixture for robustness experiments: the same generator as
/// [`make_synthetic_dataset_with_splits`] but with diluted captions and a
/// slice of flipped labels, so trained models sit at realistic margins
/// that perturbations can actually cross.
pub fn make_benchmark_dataset(options: &BenchmarkOptions, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(options.train + options.val + options.test);
    let mut idx = 0;
    for (count, split) in [
        (options.train, Split::Train),
        (options.val, Split::Val),
        (options.test, Split::Test),
    ] {
        for _ in 0..count {
            let mut sample = make_sample(idx, seed, options.img_size, split);
            let mut rng = seeded_rng(derive_seed(seed, &[0xbe9c, idx as u64]));
            for _ in 0..options.extra_fillers {
                sample.caption.push(' ');
                sample.caption.push_str(FILLER_WORDS.choose(&mut rng).unwrap());
            }
            if rng.random::<f64>() < options.label_noise {
                sample.label = sample.label.flipped();
            }
            samples.push(sample);
            idx += 1;
        }
    }
    Dataset::new(samples, PathBuf::from(format!("benchmark-{seed}"))).expect("synthetic ids unique")
}

fn make_sample(index: usize, seed: u64, img_size: u32, split: Split) -> MemeSample {
    let label = if index % 2 == 0 {
        Label::Benign
    } else {
        Label::Hateful
    };
    let mut rng = seeded_rng(derive_seed(seed, &[0x5f17, index as u64]));

    let (class_words, other_words): (&[&str], &[&str]) = match label {
        Label::Benign => (BENIGN_WORDS, HOSTILE_WORDS),
        Label::Hateful => (HOSTILE_WORDS, BENIGN_WORDS),
    };
    // Between one and three signal words under a variable filler load:
    // per-sample margins spread out instead of sitting on one cliff.
    let n_class = rng.random_range(1..=3);
    let n_filler = rng.random_range(4..=12);
    let mut words: Vec<&str> = Vec::with_capacity(n_class + n_filler + 1);
    for _ in 0..n_class {
        words.push(class_words.choose(&mut rng).unwrap());
    }
    for _ in 0..n_filler {
        words.push(FILLER_WORDS.choose(&mut rng).unwrap());
    }
    if rng.random::<f64>() < CONTAMINATION {
        words.push(other_words.choose(&mut rng).unwrap());
    }
    // Interleave fillers deterministically rather than sorting, so captions
    // read like short posts instead of word lists.
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    let caption = words.join(" ");

    let image = make_image(&mut rng, img_size, label);

    MemeSample {
        id: format!("sample-{index:05}"),
        image,
        caption,
        label,
        split,
        aux: BTreeMap::new(),
    }
}

fn make_image(rng: &mut impl Rng, size: u32, label: Label) -> RgbImage {
    let shift = match label {
        Label::Benign => -CLASS_COLOR_SHIFT,
        Label::Hateful => CLASS_COLOR_SHIFT,
    };
    let mut img = RgbImage::new(size.max(1), size.max(1));
    let denom = (img.width() + img.height()).max(1) as f32;
    // A couple of fixed rectangles give the image edges and structure so
    // blur/compression corruptions have something to destroy.
    let rect = (img.width() / 4, img.height() / 4, img.width() / 2, img.height() / 2);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let gradient = 0.15 * ((x + y) as f32 / denom - 0.5);
            let in_rect = x >= rect.0 && x < rect.0 + rect.2 && y >= rect.1 && y < rect.1 + rect.3;
            let block = if in_rect { 0.10 } else { -0.05 };
            let noise = rng.random_range(-0.10..0.10f32);
            let base = 0.5 + gradient + block + noise;
            let r = (base + shift).clamp(0.0, 1.0);
            let g = base.clamp(0.0, 1.0);
            let b = (base - shift).clamp(0.0, 1.0);
            img.put_pixel(
                x,
                y,
                image::Rgb([
                    (r * 255.0).round() as u8,
                    (g * 255.0).round() as u8,
                    (b * 255.0).round() as u8,
                ]),
            );
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = make_synthetic_dataset(6, 42, 16);
        let b = make_synthetic_dataset(6, 42, 16);
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.image.as_raw(), y.image.as_raw());
        }
    }

    #[test]
    fn labels_are_balanced_and_vocabularies_disjoint() {
        let ds = make_synthetic_dataset(20, 1, 8);
        let hateful = ds
            .samples
            .iter()
            .filter(|s| s.label == Label::Hateful)
            .count();
        assert_eq!(hateful, 10);
        for s in &ds.samples {
            let (own, other): (&[&str], &[&str]) = match s.label {
                Label::Benign => (BENIGN_WORDS, HOSTILE_WORDS),
                Label::Hateful => (HOSTILE_WORDS, BENIGN_WORDS),
            };
            let own_count = s.caption.split(' ').filter(|w| own.contains(w)).count();
            let stray = s.caption.split(' ').filter(|w| other.contains(w)).count();
            assert!(own_count >= 1, "class signal missing: {}", s.caption);
            assert!(stray <= 1, "too many stray words: {}", s.caption);
        }
    }
}
