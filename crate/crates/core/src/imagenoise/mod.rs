//! Image perturbation families.
//!
//! Three generators over 8-bit RGB rasters, every one deterministic given
//! its seed and dimension-preserving:
//!
//! 1. a 15-kind common-corruption suite at severities 1-5, with all
//!    severity constants pinned in a versioned catalog file;
//! 2. compositional augmentation: several randomly chained light
//!    augmentation ops mixed under Dirichlet weights with a Beta-weighted
//!    skip connection back to the original;
//! 3. a universal adversarial perturbation: one L-infinity-bounded raster
//!    trained by projected gradient ascent to flip predictions across a
//!    whole image set.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Label, MemeSample};
use crate::rng::{derive_seed, seeded_rng};
use crate::toymodel::{ModelError, PixelGradient};

#[derive(Debug, Error)]
pub enum ImageNoiseError {
    #[error("severity {0} out of range 1..=5")]
    SeverityOutOfRange(u8),
    #[error("augmix alpha must be positive (got {0})")]
    NonPositiveAlpha(f64),
    #[error("uap epsilon must be non-negative (got {0})")]
    NegativeEps(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad perturbation artifact at {path}: {reason}")]
    BadArtifact {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error("jpeg round trip failed: {0}")]
    Jpeg(#[from] image::ImageError),
}

/// Image noise family. Indices match the grid tables' footnote numbering
/// (1 = universal perturbation, 2 = common corruptions, 3 = compositional
/// augmentation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageNoiseFamily {
    None,
    Uap,
    Corruption,
    Augmix,
}

impl ImageNoiseFamily {
    pub fn index(self) -> u8 {
        match self {
            ImageNoiseFamily::None => 0,
            ImageNoiseFamily::Uap => 1,
            ImageNoiseFamily::Corruption => 2,
            ImageNoiseFamily::Augmix => 3,
        }
    }

    pub fn from_index(value: u8) -> Option<ImageNoiseFamily> {
        match value {
            0 => Some(ImageNoiseFamily::None),
            1 => Some(ImageNoiseFamily::Uap),
            2 => Some(ImageNoiseFamily::Corruption),
            3 => Some(ImageNoiseFamily::Augmix),
            _ => None,
        }
    }

    pub fn perturbed() -> [ImageNoiseFamily; 3] {
        [
            ImageNoiseFamily::Uap,
            ImageNoiseFamily::Corruption,
            ImageNoiseFamily::Augmix,
        ]
    }
}

/// The fifteen corruption kinds: noise, blur, weather, digital.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    ElasticTransform,
    Pixelate,
    JpegCompression,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::ElasticTransform,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegCompression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::ElasticTransform => "elastic_transform",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegCompression => "jpeg_compression",
        }
    }

    pub fn parse(name: &str) -> Option<CorruptionKind> {
        CorruptionKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Declarative description of one image perturbation.
#[derive(Debug, Clone)]
pub struct ImageNoiseSpec {
    pub family: ImageNoiseFamily,
    /// Used when `family` is `Corruption`.
    pub corruption_kind: CorruptionKind,
    /// Severity 1-5 (corruptions only).
    pub severity: u8,
    pub seed: u64,
    /// Pre-trained perturbation, required when `family` is `Uap`.
    pub uap_delta: Option<Arc<UapDelta>>,
}

impl ImageNoiseSpec {
    pub fn clean(seed: u64) -> ImageNoiseSpec {
        ImageNoiseSpec {
            family: ImageNoiseFamily::None,
            corruption_kind: CorruptionKind::GaussianNoise,
            severity: 3,
            seed,
            uap_delta: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Corruption catalog
// ---------------------------------------------------------------------------

/// Severity constants parsed from the bundled, versioned catalog file.
#[derive(Debug)]
pub struct CorruptionCatalog {
    pub version: u32,
    constants: BTreeMap<String, [f64; 5]>,
}

impl CorruptionCatalog {
    fn parse(text: &str) -> CorruptionCatalog {
        let mut version = 0;
        let mut constants = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .unwrap_or_else(|| panic!("catalog line without '=': {line}"));
            let key = key.trim();
            let value = value.trim();
            if key == "version" {
                version = value.parse().expect("catalog version");
                continue;
            }
            let values: Vec<f64> = value
                .split_whitespace()
                .map(|v| v.parse().expect("catalog constant"))
                .collect();
            assert_eq!(values.len(), 5, "catalog key {key} needs 5 severities");
            constants.insert(key.to_string(), values.try_into().unwrap());
        }
        CorruptionCatalog { version, constants }
    }

    /// Constant for `<key>` at `severity` in 1..=5.
    pub fn constant(&self, key: &str, severity: u8) -> f64 {
        self.constants
            .get(key)
            .unwrap_or_else(|| panic!("unknown catalog key {key}"))[severity as usize - 1]
    }
}

/// The catalog bundled with this build.
pub fn catalog() -> &'static CorruptionCatalog {
    static CATALOG: OnceLock<CorruptionCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| CorruptionCatalog::parse(include_str!("corruption_catalog.txt")))
}

// ---------------------------------------------------------------------------
// f32 plane helpers
// ---------------------------------------------------------------------------

/// Interleaved RGB float buffer in [0,1], layout `(y * w + x) * 3 + c`.
fn to_f32(image: &RgbImage) -> Vec<f32> {
    image.as_raw().iter().map(|&v| v as f32 / 255.0).collect()
}

fn to_image(width: u32, height: u32, data: &[f32]) -> RgbImage {
    let raw: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(width, height, raw).expect("buffer size matches dims")
}

/// Low-resolution random lattice bilinearly upsampled to w x h; values in
/// [0, 1]. The cheap building block for fog/frost/elastic fields.
fn smooth_noise(w: u32, h: u32, grid: usize, rng: &mut impl Rng) -> Vec<f32> {
    let g = grid.max(1);
    let lattice: Vec<f32> = (0..(g + 1) * (g + 1)).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0f32; (w * h) as usize];
    for y in 0..h {
        let fy = if h > 1 {
            y as f32 / (h - 1) as f32 * g as f32
        } else {
            0.0
        };
        let gy = (fy as usize).min(g - 1);
        let ty = fy - gy as f32;
        for x in 0..w {
            let fx = if w > 1 {
                x as f32 / (w - 1) as f32 * g as f32
            } else {
                0.0
            };
            let gx = (fx as usize).min(g - 1);
            let tx = fx - gx as f32;
            let v00 = lattice[gy * (g + 1) + gx];
            let v01 = lattice[gy * (g + 1) + gx + 1];
            let v10 = lattice[(gy + 1) * (g + 1) + gx];
            let v11 = lattice[(gy + 1) * (g + 1) + gx + 1];
            let top = v00 * (1.0 - tx) + v01 * tx;
            let bottom = v10 * (1.0 - tx) + v11 * tx;
            out[(y * w + x) as usize] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Sample an RGB buffer at fractional coordinates, bilinear, edge-clamped.
fn sample_bilinear(data: &[f32], w: u32, h: u32, x: f32, y: f32, c: usize) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f32;
    let ty = y - y0 as f32;
    let at = |yy: u32, xx: u32| data[((yy * w + xx) * 3) as usize + c];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Inverse-map affine warp: for each output pixel, sample the source at
/// `(a x + b y + c, d x + e y + f)`.
fn affine_warp(data: &[f32], w: u32, h: u32, inv: [f32; 6]) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            let sx = inv[0] * x as f32 + inv[1] * y as f32 + inv[2];
            let sy = inv[3] * x as f32 + inv[4] * y as f32 + inv[5];
            let base = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                out[base + c] = sample_bilinear(data, w, h, sx, sy, c);
            }
        }
    }
    out
}

/// Separable Gaussian blur with radius 3 sigma.
fn gaussian_blur(data: &[f32], w: u32, h: u32, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f32 / sigma).powi(2)).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let base = ((y * w as i64 + x) * 3) as usize;
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as i64 - radius).clamp(0, w as i64 - 1);
                    acc += k * data[((y * w as i64 + sx) * 3) as usize + c];
                }
                tmp[base + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let base = ((y * w as i64 + x) * 3) as usize;
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y + ki as i64 - radius).clamp(0, h as i64 - 1);
                    acc += k * tmp[((sy * w as i64 + x) * 3) as usize + c];
                }
                out[base + c] = acc;
            }
        }
    }
    out
}

/// Peak signal-to-noise ratio between two equally sized rasters, in dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let mse: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

/// Apply one catalog corruption. Output has the input's dimensions with
/// channels clamped to [0, 255]; stochastic kinds are deterministic given
/// the seed.
pub fn apply_corruption(
    image: &RgbImage,
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
) -> Result<RgbImage, ImageNoiseError> {
    if !(1..=5).contains(&severity) {
        return Err(ImageNoiseError::SeverityOutOfRange(severity));
    }
    let (w, h) = image.dimensions();
    let cat = catalog();
    let mut rng = seeded_rng(derive_seed(seed, &[0xc0_44, kind.index_tag(), severity as u64]));
    let data = to_f32(image);

    let out: Vec<f32> = match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = cat.constant("gaussian_noise.sigma", severity);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            data.iter()
                .map(|&v| v + normal.sample(&mut rng) as f32)
                .collect()
        }
        CorruptionKind::ShotNoise => {
            let photons = cat.constant("shot_noise.photons", severity);
            data.iter()
                .map(|&v| {
                    let lambda = (v as f64 * photons).max(0.0);
                    if lambda == 0.0 {
                        0.0
                    } else {
                        let poisson = Poisson::new(lambda).expect("positive lambda");
                        (poisson.sample(&mut rng) / photons) as f32
                    }
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let amount = cat.constant("impulse_noise.amount", severity);
            data.iter()
                .map(|&v| {
                    let r: f64 = rng.random();
                    if r < amount / 2.0 {
                        0.0
                    } else if r < amount {
                        1.0
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::DefocusBlur => {
            let radius = cat.constant("defocus_blur.radius_px", severity) as i64;
            let mut offsets = Vec::new();
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    if dx * dx + dy * dy <= radius * radius {
                        offsets.push((dy, dx));
                    }
                }
            }
            let norm = 1.0 / offsets.len() as f32;
            convolve_offsets(&data, w, h, &offsets, norm)
        }
        CorruptionKind::GlassBlur => {
            let sigma = cat.constant("glass_blur.sigma", severity) as f32;
            let max_shift = cat.constant("glass_blur.max_shift_px", severity) as i64;
            let passes = cat.constant("glass_blur.passes", severity) as usize;
            let mut buf = gaussian_blur(&data, w, h, sigma);
            for _ in 0..passes {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let dy = rng.random_range(-max_shift..=max_shift);
                        let dx = rng.random_range(-max_shift..=max_shift);
                        let sy = (y + dy).clamp(0, h as i64 - 1);
                        let sx = (x + dx).clamp(0, w as i64 - 1);
                        let a = ((y * w as i64 + x) * 3) as usize;
                        let b = ((sy * w as i64 + sx) * 3) as usize;
                        for c in 0..3 {
                            buf.swap(a + c, b + c);
                        }
                    }
                }
            }
            gaussian_blur(&buf, w, h, sigma * 0.5)
        }
        CorruptionKind::MotionBlur => {
            let length = cat.constant("motion_blur.length_px", severity) as i64;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            motion_streak(&data, w, h, length, angle)
        }
        CorruptionKind::ZoomBlur => {
            let max_zoom = cat.constant("zoom_blur.max_zoom", severity) as f32;
            let step = cat.constant("zoom_blur.step", severity) as f32;
            let cx = (w - 1) as f32 / 2.0;
            let cy = (h - 1) as f32 / 2.0;
            let mut acc = data.clone();
            let mut layers = 1.0f32;
            let mut z = 1.0 + step;
            while z <= max_zoom + 1e-6 {
                let inv = [1.0 / z, 0.0, cx * (1.0 - 1.0 / z), 0.0, 1.0 / z, cy * (1.0 - 1.0 / z)];
                let layer = affine_warp(&data, w, h, inv);
                for (a, l) in acc.iter_mut().zip(layer.iter()) {
                    *a += l;
                }
                layers += 1.0;
                z += step;
            }
            acc.iter().map(|v| v / layers).collect()
        }
        CorruptionKind::Snow => {
            let density = cat.constant("snow.density", severity);
            let streak = cat.constant("snow.streak_px", severity) as i64;
            let whiten = cat.constant("snow.whiten", severity) as f32;
            // Flake layer.
            let mut flakes = vec![0.0f32; data.len()];
            let n_flakes = (density * w as f64 * h as f64) as usize;
            for _ in 0..n_flakes {
                let x = rng.random_range(0..w);
                let y = rng.random_range(0..h);
                let strength: f32 = rng.random_range(0.6..1.0);
                let base = ((y * w + x) * 3) as usize;
                for c in 0..3 {
                    flakes[base + c] = flakes[base + c].max(strength);
                }
            }
            let angle: f64 = rng.random_range(std::f64::consts::FRAC_PI_3..std::f64::consts::FRAC_PI_2);
            let streaked = motion_streak(&flakes, w, h, streak, angle);
            data.iter()
                .zip(streaked.iter())
                .map(|(&v, &s)| {
                    let lifted = v * (1.0 - whiten) + 0.9 * whiten;
                    lifted.max((s * 2.5).min(1.0) * 0.85 + lifted * 0.15)
                })
                .collect()
        }
        CorruptionKind::Frost => {
            let coverage = cat.constant("frost.coverage", severity) as f32;
            let strength = cat.constant("frost.strength", severity) as f32;
            let n1 = smooth_noise(w, h, 4, &mut rng);
            let n2 = smooth_noise(w, h, 9, &mut rng);
            let n3 = smooth_noise(w, h, 17, &mut rng);
            let tint = [0.86f32, 0.91, 1.0];
            let mut out = vec![0.0f32; data.len()];
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    let field = 0.55 * n1[i] + 0.3 * n2[i] + 0.15 * n3[i];
                    let mask = ((field - (1.0 - coverage)) * 4.0).clamp(0.0, 1.0);
                    let weight = strength * mask;
                    let crystal = 0.75 + 0.25 * n3[i];
                    let base = i * 3;
                    for c in 0..3 {
                        out[base + c] =
                            data[base + c] * (1.0 - weight) + tint[c] * crystal * weight;
                    }
                }
            }
            out
        }
        CorruptionKind::Fog => {
            let thickness = cat.constant("fog.thickness", severity) as f32;
            let haze_field = smooth_noise(w, h, 4, &mut rng);
            let mut out = vec![0.0f32; data.len()];
            for i in 0..(w * h) as usize {
                let haze = 0.8 + 0.2 * haze_field[i];
                for c in 0..3 {
                    out[i * 3 + c] = data[i * 3 + c] * (1.0 - thickness) + haze * thickness;
                }
            }
            out
        }
        CorruptionKind::Brightness => {
            // Integer shift so the change is a uniform, exactly equal step
            // on every pixel.
            let delta = cat.constant("brightness.delta", severity);
            let shift = (delta * 255.0).round() as i32;
            let raw: Vec<u8> = image
                .as_raw()
                .iter()
                .map(|&v| (v as i32 + shift).clamp(0, 255) as u8)
                .collect();
            return Ok(RgbImage::from_raw(w, h, raw).expect("same dims"));
        }
        CorruptionKind::Contrast => {
            let factor = cat.constant("contrast.factor", severity) as f32;
            let mut means = [0.0f32; 3];
            for px in data.chunks_exact(3) {
                for c in 0..3 {
                    means[c] += px[c];
                }
            }
            for m in means.iter_mut() {
                *m /= (w * h) as f32;
            }
            data.chunks_exact(3)
                .flat_map(|px| {
                    [
                        (px[0] - means[0]) * factor + means[0],
                        (px[1] - means[1]) * factor + means[1],
                        (px[2] - means[2]) * factor + means[2],
                    ]
                })
                .collect()
        }
        CorruptionKind::ElasticTransform => {
            let alpha_ref = cat.constant("elastic_transform.alpha_px", severity) as f32;
            let grid = cat.constant("elastic_transform.grid", severity) as usize;
            // Reference amplitude is tuned for 64 px images; scale with size.
            let alpha = alpha_ref * (w.min(h) as f32 / 64.0).max(0.25);
            let fx = smooth_noise(w, h, grid, &mut rng);
            let fy = smooth_noise(w, h, grid, &mut rng);
            let mut out = vec![0.0f32; data.len()];
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    let dx = (fx[i] * 2.0 - 1.0) * alpha;
                    let dy = (fy[i] * 2.0 - 1.0) * alpha;
                    let base = i * 3;
                    for c in 0..3 {
                        out[base + c] =
                            sample_bilinear(&data, w, h, x as f32 + dx, y as f32 + dy, c);
                    }
                }
            }
            out
        }
        CorruptionKind::Pixelate => {
            let factor = cat.constant("pixelate.factor", severity) as f32;
            let dw = ((w as f32 * factor).round() as u32).max(1);
            let dh = ((h as f32 * factor).round() as u32).max(1);
            let mut out = vec![0.0f32; data.len()];
            for y in 0..h {
                for x in 0..w {
                    // Box-average the source block this output pixel maps to.
                    let bx = x * dw / w;
                    let by = y * dh / h;
                    let x0 = (bx * w) / dw;
                    let x1 = (((bx + 1) * w) / dw).max(x0 + 1).min(w);
                    let y0 = (by * h) / dh;
                    let y1 = (((by + 1) * h) / dh).max(y0 + 1).min(h);
                    let mut acc = [0.0f32; 3];
                    for sy in y0..y1 {
                        for sx in x0..x1 {
                            let b = ((sy * w + sx) * 3) as usize;
                            for c in 0..3 {
                                acc[c] += data[b + c];
                            }
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f32;
                    let base = ((y * w + x) * 3) as usize;
                    for c in 0..3 {
                        out[base + c] = acc[c] / count;
                    }
                }
            }
            out
        }
        CorruptionKind::JpegCompression => {
            let quality = cat.constant("jpeg_compression.quality", severity) as u8;
            let mut encoded = Vec::new();
            let encoder =
                image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
            image.write_with_encoder(encoder)?;
            let decoded = image::load_from_memory(&encoded)?.to_rgb8();
            return Ok(decoded);
        }
    };
    Ok(to_image(w, h, &out))
}

impl CorruptionKind {
    fn index_tag(self) -> u64 {
        CorruptionKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

fn convolve_offsets(
    data: &[f32],
    w: u32,
    h: u32,
    offsets: &[(i64, i64)],
    weight: f32,
) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let base = ((y * w as i64 + x) * 3) as usize;
            for &(dy, dx) in offsets {
                let sy = (y + dy).clamp(0, h as i64 - 1);
                let sx = (x + dx).clamp(0, w as i64 - 1);
                let src = ((sy * w as i64 + sx) * 3) as usize;
                for c in 0..3 {
                    out[base + c] += data[src + c] * weight;
                }
            }
        }
    }
    out
}

fn motion_streak(data: &[f32], w: u32, h: u32, length: i64, angle: f64) -> Vec<f32> {
    let length = length.max(1);
    let (dy, dx) = (angle.sin(), angle.cos());
    let offsets: Vec<(i64, i64)> = (0..length)
        .map(|i| {
            let t = i as f64 - (length - 1) as f64 / 2.0;
            ((t * dy).round() as i64, (t * dx).round() as i64)
        })
        .collect();
    convolve_offsets(data, w, h, &offsets, 1.0 / offsets.len() as f32)
}

// ---------------------------------------------------------------------------
// Compositional augmentation
// ---------------------------------------------------------------------------

/// Mix `width` random augmentation chains under Dirichlet weights with a
/// Beta-weighted skip connection:
/// `out = m * image + (1 - m) * sum_i w_i * chain_i(image)`.
///
/// The op set (rotate, shears, translations, posterize, solarize,
/// equalize, autocontrast) deliberately avoids contrast/brightness/noise,
/// which belong to the corruption test set. `width = 0` returns the image
/// unchanged. Deterministic given the seed.
pub fn augmix(
    image: &RgbImage,
    width: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
) -> Result<RgbImage, ImageNoiseError> {
    augmix_with_skip(image, width, depth, alpha, seed, None)
}

/// [`augmix`] with a forced skip weight, for tests that pin `m`.
pub fn augmix_with_skip(
    image: &RgbImage,
    width: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
    skip_override: Option<f64>,
) -> Result<RgbImage, ImageNoiseError> {
    if alpha <= 0.0 {
        return Err(ImageNoiseError::NonPositiveAlpha(alpha));
    }
    if width == 0 {
        return Ok(image.clone());
    }
    let (w, h) = image.dimensions();
    let mut rng = seeded_rng(derive_seed(seed, &[0xa06_u64]));
    let weights = dirichlet_weights(width, alpha, &mut rng);
    let m = match skip_override {
        Some(m) => m,
        None => Beta::new(alpha, alpha).expect("alpha > 0").sample(&mut rng),
    };

    let data = to_f32(image);
    let mut mix = vec![0.0f32; data.len()];
    for weight in weights.iter().take(width) {
        let ops = rng.random_range(1..=depth.max(1));
        let mut chain = data.clone();
        for _ in 0..ops {
            chain = random_aug_op(&chain, w, h, &mut rng);
        }
        for (acc, v) in mix.iter_mut().zip(chain.iter()) {
            *acc += *weight as f32 * v;
        }
    }

    let mf = m as f32;
    let out: Vec<f32> = data
        .iter()
        .zip(mix.iter())
        .map(|(&orig, &aug)| mf * orig + (1.0 - mf) * aug)
        .collect();
    Ok(to_image(w, h, &out))
}

/// Dirichlet(alpha * 1_k) via normalized Gamma draws (valid for any k).
fn dirichlet_weights(k: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

fn random_aug_op(data: &[f32], w: u32, h: u32, rng: &mut impl Rng) -> Vec<f32> {
    let cx = (w - 1) as f32 / 2.0;
    let cy = (h - 1) as f32 / 2.0;
    match rng.random_range(0..9u8) {
        0 => {
            // rotate
            let deg: f32 = rng.random_range(5.0..25.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let rad = deg.to_radians();
            let (s, c) = rad.sin_cos();
            let inv = [
                c,
                s,
                cx - c * cx - s * cy,
                -s,
                c,
                cy + s * cx - c * cy,
            ];
            affine_warp(data, w, h, inv)
        }
        1 => {
            // shear-x
            let s: f32 = rng.random_range(-0.3..0.3);
            affine_warp(data, w, h, [1.0, -s, s * cy, 0.0, 1.0, 0.0])
        }
        2 => {
            // shear-y
            let s: f32 = rng.random_range(-0.3..0.3);
            affine_warp(data, w, h, [1.0, 0.0, 0.0, -s, 1.0, s * cx])
        }
        3 => {
            // translate-x
            let t = rng.random_range(-(w as f32) / 8.0..w as f32 / 8.0);
            affine_warp(data, w, h, [1.0, 0.0, -t, 0.0, 1.0, 0.0])
        }
        4 => {
            // translate-y
            let t = rng.random_range(-(h as f32) / 8.0..h as f32 / 8.0);
            affine_warp(data, w, h, [1.0, 0.0, 0.0, 0.0, 1.0, -t])
        }
        5 => {
            // posterize
            let bits = rng.random_range(3..=5u32);
            let levels = (1u32 << bits) as f32;
            data.iter()
                .map(|&v| ((v * (levels - 1.0)).round()) / (levels - 1.0))
                .collect()
        }
        6 => {
            // solarize
            let threshold: f32 = rng.random_range(0.5..0.9);
            data.iter()
                .map(|&v| if v > threshold { 1.0 - v } else { v })
                .collect()
        }
        7 => {
            // equalize (per channel, 256 bins)
            let mut out = data.to_vec();
            for c in 0..3 {
                let mut hist = [0u32; 256];
                for px in data.chunks_exact(3) {
                    hist[(px[c].clamp(0.0, 1.0) * 255.0) as usize] += 1;
                }
                let mut cdf = [0u32; 256];
                let mut acc = 0;
                for (i, &count) in hist.iter().enumerate() {
                    acc += count;
                    cdf[i] = acc;
                }
                let total = acc.max(1);
                let first = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
                for (i, px) in out.chunks_exact_mut(3).enumerate() {
                    let bin = (data[i * 3 + c].clamp(0.0, 1.0) * 255.0) as usize;
                    let num = cdf[bin].saturating_sub(first) as f32;
                    let den = (total - first).max(1) as f32;
                    px[c] = num / den;
                }
            }
            out
        }
        _ => {
            // autocontrast (per channel min-max stretch)
            let mut out = data.to_vec();
            for c in 0..3 {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for px in data.chunks_exact(3) {
                    lo = lo.min(px[c]);
                    hi = hi.max(px[c]);
                }
                if hi > lo {
                    let scale = 1.0 / (hi - lo);
                    for px in out.chunks_exact_mut(3) {
                        px[c] = (px[c] - lo) * scale;
                    }
                }
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Universal adversarial perturbation
// ---------------------------------------------------------------------------

/// A single image-agnostic additive raster, bounded in L-infinity norm.
#[derive(Debug, Clone)]
pub struct UapDelta {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB offsets in [0,1] pixel scale, each in [-eps, eps].
    pub delta: Vec<f32>,
    pub eps: f32,
    /// Fraction of training images whose prediction the delta flips.
    pub fooling_rate: f64,
}

impl UapDelta {
    pub fn zeros(width: u32, height: u32, eps: f32) -> UapDelta {
        UapDelta {
            width,
            height,
            delta: vec![0.0; (width * height * 3) as usize],
            eps,
            fooling_rate: 0.0,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.delta.iter().fold(0.0f32, |acc, v| acc.max(v.abs()))
    }
}

/// White-box pixel loss surface: cross-entropy toward the sample's own
/// label, plus its exact pixel gradient.
pub trait PixelLossModel {
    fn pixel_loss_gradient(&self, sample: &MemeSample)
        -> Result<(f64, PixelGradient), ModelError>;
    fn predict_label(&self, sample: &MemeSample) -> Result<Label, ModelError>;
}

/// Add the delta to an image ([0,1] scale, clamped back to [0,255]).
/// Deltas of different dimensions are resampled by nearest neighbor.
pub fn apply_uap(image: &RgbImage, delta: &UapDelta) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut raw = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        let dy = (y as u64 * delta.height as u64 / h as u64).min(delta.height as u64 - 1) as u32;
        for x in 0..w {
            let dx = (x as u64 * delta.width as u64 / w as u64).min(delta.width as u64 - 1) as u32;
            let px = image.get_pixel(x, y);
            let base = ((dy * delta.width + dx) * 3) as usize;
            for c in 0..3 {
                let v = px[c] as f64 / 255.0 + delta.delta[base + c] as f64;
                raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage::from_raw(w, h, raw).expect("same dims")
}

const UAP_BATCH: usize = 16;

/// Train a universal perturbation by projected gradient ascent.
///
/// Every minibatch accumulates the pixel gradient of the classification
/// loss, steps the delta in the sign direction, and projects back onto the
/// L-infinity ball of radius `eps` — the projection invariant holds after
/// every step, not just at return. The delta raster adopts the first
/// image's dimensions. Returns the trained delta and the fraction of
/// training predictions it flips.
pub fn train_uap(
    model: &dyn PixelLossModel,
    images: &Dataset,
    eps: f64,
    iterations: usize,
    step: f64,
    seed: u64,
) -> Result<UapDelta, ImageNoiseError> {
    if eps < 0.0 {
        return Err(ImageNoiseError::NegativeEps(eps));
    }
    if images.is_empty() {
        return Err(ImageNoiseError::EmptyDataset);
    }
    let (w, h) = images.samples[0].image.dimensions();
    let mut delta = UapDelta::zeros(w, h, eps as f32);

    let clean_predictions: Vec<Label> = images
        .samples
        .iter()
        .map(|s| model.predict_label(s))
        .collect::<Result<_, _>>()?;

    if eps > 0.0 {
        for iteration in 0..iterations {
            let mut order: Vec<usize> = (0..images.len()).collect();
            let mut shuffle_rng = seeded_rng(derive_seed(seed, &[0x0a9, iteration as u64]));
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            for batch in order.chunks(UAP_BATCH) {
                let mut grad = vec![0.0f64; delta.delta.len()];
                for &idx in batch {
                    let sample = &images.samples[idx];
                    let mut perturbed = sample.clone();
                    perturbed.image = apply_uap(&sample.image, &delta);
                    let (_, pixel_grad) = model.pixel_loss_gradient(&perturbed)?;
                    accumulate_into_delta_grid(&mut grad, &delta, &pixel_grad);
                }
                let stepf = step as f32;
                let epsf = eps as f32;
                for (d, g) in delta.delta.iter_mut().zip(grad.iter()) {
                    if *g > 0.0 {
                        *d += stepf;
                    } else if *g < 0.0 {
                        *d -= stepf;
                    }
                    *d = d.clamp(-epsf, epsf);
                }
                debug_assert!(delta.max_abs() <= delta.eps);
            }
        }
    }

    let mut flips = 0usize;
    for (sample, clean) in images.samples.iter().zip(clean_predictions.iter()) {
        let mut perturbed = sample.clone();
        perturbed.image = apply_uap(&sample.image, &delta);
        if model.predict_label(&perturbed)? != *clean {
            flips += 1;
        }
    }
    delta.fooling_rate = flips as f64 / images.len() as f64;
    Ok(delta)
}

/// Map per-pixel gradients onto the delta grid by the same nearest-neighbor
/// correspondence [`apply_uap`] uses.
fn accumulate_into_delta_grid(grad: &mut [f64], delta: &UapDelta, pixel_grad: &PixelGradient) {
    let (w, h) = (pixel_grad.width, pixel_grad.height);
    for y in 0..h {
        let dy = (y as u64 * delta.height as u64 / h as u64).min(delta.height as u64 - 1) as u32;
        for x in 0..w {
            let dx = (x as u64 * delta.width as u64 / w as u64).min(delta.width as u64 - 1) as u32;
            let src = ((y * w + x) * 3) as usize;
            let dst = ((dy * delta.width + dx) * 3) as usize;
            for c in 0..3 {
                grad[dst + c] += pixel_grad.data[src + c];
            }
        }
    }
}

const UAP_SIDECAR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct UapSidecar {
    format_version: u32,
    width: u32,
    height: u32,
    channels: u32,
    eps: f32,
    fooling_rate: f64,
    model_hash: String,
}

/// Persist the delta as a little-endian f32 raster plus a JSON sidecar
/// (`<raster>.json`) carrying eps, fooling rate, and the model hash.
pub fn save_uap(delta: &UapDelta, raster_path: &Path, model_hash: &str) -> Result<(), ImageNoiseError> {
    let mut raw = Vec::with_capacity(delta.delta.len() * 4);
    for v in &delta.delta {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(raster_path, raw).map_err(|source| ImageNoiseError::Io {
        path: raster_path.to_path_buf(),
        source,
    })?;
    let sidecar = UapSidecar {
        format_version: UAP_SIDECAR_VERSION,
        width: delta.width,
        height: delta.height,
        channels: 3,
        eps: delta.eps,
        fooling_rate: delta.fooling_rate,
        model_hash: model_hash.to_string(),
    };
    let sidecar_path = sidecar_path_for(raster_path);
    std::fs::write(
        &sidecar_path,
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|source| ImageNoiseError::Io {
        path: sidecar_path.clone(),
        source,
    })?;
    Ok(())
}

/// Load a persisted delta; returns it with the recorded model hash.
pub fn load_uap(raster_path: &Path) -> Result<(UapDelta, String), ImageNoiseError> {
    let sidecar_path = sidecar_path_for(raster_path);
    let sidecar_bytes = std::fs::read(&sidecar_path).map_err(|source| ImageNoiseError::Io {
        path: sidecar_path.clone(),
        source,
    })?;
    let sidecar: UapSidecar =
        serde_json::from_slice(&sidecar_bytes).map_err(|e| ImageNoiseError::BadArtifact {
            path: sidecar_path.clone(),
            reason: e.to_string(),
        })?;
    if sidecar.format_version != UAP_SIDECAR_VERSION || sidecar.channels != 3 {
        return Err(ImageNoiseError::BadArtifact {
            path: sidecar_path,
            reason: "unsupported sidecar version or channel count".to_string(),
        });
    }
    let raw = std::fs::read(raster_path).map_err(|source| ImageNoiseError::Io {
        path: raster_path.to_path_buf(),
        source,
    })?;
    let expected = (sidecar.width * sidecar.height * 3) as usize * 4;
    if raw.len() != expected {
        return Err(ImageNoiseError::BadArtifact {
            path: raster_path.to_path_buf(),
            reason: format!("raster payload {} bytes, expected {expected}", raw.len()),
        });
    }
    let delta: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((
        UapDelta {
            width: sidecar.width,
            height: sidecar.height,
            delta,
            eps: sidecar.eps,
            fooling_rate: sidecar.fooling_rate,
        },
        sidecar.model_hash,
    ))
}

fn sidecar_path_for(raster_path: &Path) -> std::path::PathBuf {
    let mut os = raster_path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests;
