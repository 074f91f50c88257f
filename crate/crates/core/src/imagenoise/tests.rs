use super::*;
use crate::synth;
use crate::toymodel::{train_classifier, TrainConfig};
use tempfile::TempDir;

fn fixture_image(seed: u64, size: u32) -> RgbImage {
    synth::make_synthetic_dataset(2, seed, size).samples[1].image.clone()
}

#[test]
fn catalog_parses_with_version_and_full_coverage() {
    let cat = catalog();
    assert_eq!(cat.version, 1);
    for severity in 1..=5u8 {
        assert!(cat.constant("gaussian_noise.sigma", severity) > 0.0);
        assert!(cat.constant("jpeg_compression.quality", severity) >= 1.0);
    }
    // Severity scaling is monotone for the kinds where that is meaningful.
    for key in [
        "gaussian_noise.sigma",
        "impulse_noise.amount",
        "brightness.delta",
        "fog.thickness",
        "snow.whiten",
        "frost.strength",
    ] {
        for s in 1..5u8 {
            assert!(
                cat.constant(key, s) < cat.constant(key, s + 1),
                "{key} not increasing at severity {s}"
            );
        }
    }
}

#[test]
fn all_kinds_preserve_dimensions_and_are_deterministic() {
    let image = fixture_image(1, 37); // odd size exercises grid edges
    for kind in CorruptionKind::ALL {
        for severity in [1u8, 3, 5] {
            let a = apply_corruption(&image, kind, severity, 99).unwrap();
            let b = apply_corruption(&image, kind, severity, 99).unwrap();
            assert_eq!(a.dimensions(), image.dimensions(), "{kind:?}");
            assert_eq!(a.as_raw(), b.as_raw(), "{kind:?} not deterministic");
        }
    }
}

#[test]
fn severity_out_of_range_is_rejected() {
    let image = fixture_image(2, 16);
    assert!(matches!(
        apply_corruption(&image, CorruptionKind::Fog, 0, 1),
        Err(ImageNoiseError::SeverityOutOfRange(0))
    ));
    assert!(matches!(
        apply_corruption(&image, CorruptionKind::Fog, 6, 1),
        Err(ImageNoiseError::SeverityOutOfRange(6))
    ));
}

/// Monte Carlo check of the documented sigma, measured on mid-gray where
/// clamping is inactive.
#[test]
fn gaussian_noise_matches_catalog_sigma_on_mid_gray() {
    let image = RgbImage::from_pixel(64, 64, image::Rgb([128, 128, 128]));
    let out = apply_corruption(&image, CorruptionKind::GaussianNoise, 1, 7).unwrap();
    let diffs: Vec<f64> = out
        .as_raw()
        .iter()
        .zip(image.as_raw().iter())
        .map(|(&a, &b)| (a as f64 - b as f64) / 255.0)
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let sigma = catalog().constant("gaussian_noise.sigma", 1);
    assert!(mean.abs() < 0.01, "mean shift {mean}");
    assert!(
        (var.sqrt() - sigma).abs() / sigma < 0.05,
        "sample sigma {} vs catalog {sigma}",
        var.sqrt()
    );
}

/// On an all-zero image the lower clamp halves the distribution; the
/// closed-form moments of max(N(0, sigma), 0) are the oracle:
/// mean = sigma/sqrt(2 pi), variance = sigma^2 (1/2 - 1/(2 pi)).
#[test]
fn gaussian_noise_on_zero_image_matches_clipped_normal_oracle() {
    let image = RgbImage::from_pixel(64, 64, image::Rgb([0, 0, 0]));
    let out = apply_corruption(&image, CorruptionKind::GaussianNoise, 1, 11).unwrap();
    let values: Vec<f64> = out.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = catalog().constant("gaussian_noise.sigma", 1);
    let expected_mean = sigma / (2.0 * std::f64::consts::PI).sqrt();
    let expected_var = sigma * sigma * (0.5 - 1.0 / (2.0 * std::f64::consts::PI));
    assert!(
        (mean - expected_mean).abs() / expected_mean < 0.1,
        "clipped mean {mean} vs oracle {expected_mean}"
    );
    assert!(
        (var - expected_var).abs() / expected_var < 0.15,
        "clipped var {var} vs oracle {expected_var}"
    );
}

#[test]
fn brightness_is_an_exact_uniform_shift_on_mid_gray() {
    let image = RgbImage::from_pixel(32, 32, image::Rgb([128, 128, 128]));
    for severity in 1..=5u8 {
        let out = apply_corruption(&image, CorruptionKind::Brightness, severity, 0).unwrap();
        let delta = catalog().constant("brightness.delta", severity);
        let expected = 128 + (delta * 255.0).round() as i32;
        for &v in out.as_raw() {
            assert_eq!(v as i32, expected.min(255), "severity {severity}");
        }
    }
}

#[test]
fn contrast_pulls_values_toward_the_mean() {
    let image = fixture_image(3, 32);
    let out = apply_corruption(&image, CorruptionKind::Contrast, 5, 0).unwrap();
    let spread = |img: &RgbImage| {
        let (min, max) = img
            .as_raw()
            .iter()
            .fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        max as i32 - min as i32
    };
    assert!(spread(&out) < spread(&image) / 2);
}

#[test]
fn pixelate_preserves_shape_and_coarsens() {
    let image = fixture_image(4, 33);
    let out = apply_corruption(&image, CorruptionKind::Pixelate, 5, 0).unwrap();
    assert_eq!(out.dimensions(), image.dimensions());
    // Fewer distinct values per channel than the original texture.
    let distinct = |img: &RgbImage| {
        let mut set = std::collections::BTreeSet::new();
        for px in img.pixels() {
            set.insert(px.0);
        }
        set.len()
    };
    assert!(distinct(&out) < distinct(&image));
}

#[test]
fn weather_severity_is_monotone_in_psnr() {
    let image = fixture_image(5, 64);
    for kind in [CorruptionKind::Snow, CorruptionKind::Frost, CorruptionKind::Fog] {
        let mut last = f64::INFINITY;
        for severity in 1..=5u8 {
            let out = apply_corruption(&image, kind, severity, 17).unwrap();
            let quality = psnr(&image, &out);
            assert!(
                quality < last,
                "{kind:?} severity {severity}: psnr {quality} not below {last}"
            );
            last = quality;
        }
    }
}

#[test]
fn augmix_width_zero_is_identity() {
    let image = fixture_image(6, 24);
    let out = augmix(&image, 0, 3, 1.0, 5).unwrap();
    assert_eq!(out.as_raw(), image.as_raw());
}

#[test]
fn augmix_rejects_non_positive_alpha() {
    let image = fixture_image(7, 16);
    assert!(matches!(
        augmix(&image, 3, 2, 0.0, 1),
        Err(ImageNoiseError::NonPositiveAlpha(_))
    ));
}

#[test]
fn augmix_is_deterministic_and_shape_preserving() {
    let image = fixture_image(8, 41);
    let a = augmix(&image, 3, 3, 1.0, 12).unwrap();
    let b = augmix(&image, 3, 3, 1.0, 12).unwrap();
    assert_eq!(a.as_raw(), b.as_raw());
    assert_eq!(a.dimensions(), image.dimensions());
    let c = augmix(&image, 3, 3, 1.0, 13).unwrap();
    assert_ne!(a.as_raw(), c.as_raw(), "different seed should differ");
}

#[test]
fn augmix_forced_full_skip_is_identity() {
    let image = fixture_image(9, 32);
    for seed in 0..5 {
        let out = augmix_with_skip(&image, 3, 3, 1.0, seed, Some(1.0)).unwrap();
        assert_eq!(out.as_raw(), image.as_raw(), "m = 1 must skip the mix");
    }
}

#[test]
fn dirichlet_weights_normalize_for_any_width() {
    let mut rng = crate::rng::seeded_rng(31);
    for k in 1..8usize {
        for _ in 0..20 {
            let w = dirichlet_weights(k, 1.0, &mut rng);
            assert_eq!(w.len(), k);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "k={k} sum {sum}");
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }
}

fn trained_fixture_model(n: usize, seed: u64) -> (crate::dataset::Dataset, crate::toymodel::ToyModel) {
    let ds = synth::make_synthetic_dataset(n, seed, 32);
    let config = TrainConfig {
        epochs: 12,
        ..TrainConfig::default()
    };
    let model = train_classifier(&ds, &config, false, seed).unwrap();
    (ds, model)
}

#[test]
fn zero_eps_uap_is_all_zero_with_zero_fooling() {
    let (ds, model) = trained_fixture_model(24, 51);
    let delta = train_uap(&model, &ds, 0.0, 3, 0.01, 1).unwrap();
    assert!(delta.delta.iter().all(|&v| v == 0.0));
    assert_eq!(delta.fooling_rate, 0.0);
}

#[test]
fn trained_uap_respects_projection_and_changes_images() {
    let (ds, model) = trained_fixture_model(24, 53);
    let eps = 0.1;
    let delta = train_uap(&model, &ds, eps, 3, 0.02, 2).unwrap();
    assert!(delta.max_abs() <= eps as f32);
    assert!(delta.max_abs() > 0.0, "training should move the delta");

    let image = &ds.samples[0].image;
    let once = apply_uap(image, &delta);
    let twice = apply_uap(&once, &delta);
    assert_ne!(once.as_raw(), twice.as_raw(), "application is not idempotent");
}

#[test]
fn zero_delta_application_is_identity() {
    let image = fixture_image(10, 28);
    let delta = UapDelta::zeros(28, 28, 0.1);
    let out = apply_uap(&image, &delta);
    assert_eq!(out.as_raw(), image.as_raw());
}

#[test]
fn positive_delta_saturates_on_white() {
    let image = RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]));
    let mut delta = UapDelta::zeros(16, 16, 0.2);
    for v in delta.delta.iter_mut() {
        *v = 0.2;
    }
    let out = apply_uap(&image, &delta);
    assert!(out.as_raw().iter().all(|&v| v == 255));
}

#[test]
fn delta_resamples_to_other_dimensions() {
    let image = fixture_image(11, 48);
    let mut delta = UapDelta::zeros(16, 16, 0.5);
    for v in delta.delta.iter_mut() {
        *v = 0.5;
    }
    let out = apply_uap(&image, &delta);
    assert_eq!(out.dimensions(), image.dimensions());
    assert!(out
        .as_raw()
        .iter()
        .zip(image.as_raw().iter())
        .all(|(&a, &b)| a >= b));
}

#[test]
fn uap_rejects_bad_arguments() {
    let (ds, model) = trained_fixture_model(8, 57);
    assert!(matches!(
        train_uap(&model, &ds, -0.1, 1, 0.01, 1),
        Err(ImageNoiseError::NegativeEps(_))
    ));
    let empty = crate::dataset::Dataset::new(Vec::new(), "x".into()).unwrap();
    assert!(matches!(
        train_uap(&model, &empty, 0.1, 1, 0.01, 1),
        Err(ImageNoiseError::EmptyDataset)
    ));
}

#[test]
fn uap_round_trips_through_disk() {
    let dir = TempDir::new().unwrap();
    let (ds, model) = trained_fixture_model(16, 59);
    let delta = train_uap(&model, &ds, 0.05, 2, 0.01, 3).unwrap();
    let path = dir.path().join("delta.bin");
    save_uap(&delta, &path, "abc123").unwrap();
    let (loaded, hash) = load_uap(&path).unwrap();
    assert_eq!(hash, "abc123");
    assert_eq!(loaded.delta, delta.delta);
    assert_eq!(loaded.eps, delta.eps);
    assert_eq!(loaded.fooling_rate, delta.fooling_rate);
    assert_eq!((loaded.width, loaded.height), (delta.width, delta.height));
}

#[test]
fn corrupted_uap_sidecar_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("delta.bin");
    std::fs::write(&path, [0u8; 12]).unwrap();
    std::fs::write(dir.path().join("delta.bin.json"), b"{}").unwrap();
    assert!(load_uap(&path).is_err());
}

#[test]
fn family_indices_match_table_numbering() {
    assert_eq!(ImageNoiseFamily::None.index(), 0);
    assert_eq!(ImageNoiseFamily::Uap.index(), 1);
    assert_eq!(ImageNoiseFamily::Corruption.index(), 2);
    assert_eq!(ImageNoiseFamily::Augmix.index(), 3);
    for i in 0..=3u8 {
        assert_eq!(ImageNoiseFamily::from_index(i).unwrap().index(), i);
    }
}

#[test]
fn corruption_kind_names_round_trip() {
    for kind in CorruptionKind::ALL {
        assert_eq!(CorruptionKind::parse(kind.name()), Some(kind));
    }
    assert_eq!(CorruptionKind::parse("nonsense"), None);
}
