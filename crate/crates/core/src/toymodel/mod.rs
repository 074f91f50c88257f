//! A small, fully differentiable multimodal classifier.
//!
//! The model stands in for frozen-backbone meme detectors: a byte-level
//! text pathway (embedding table, mean pooling, linear projection, optional
//! denoising adapter) and a fixed 8x8 patch-mean image pathway, fused by a
//! two-layer head into two logits. Backpropagation is written by hand and
//! exposes exact input gradients — with respect to caption byte one-hots
//! and to pixels — which is what the character-level attacks and the
//! universal image perturbation need.

mod tda;

pub mod probe;

pub use tda::{tda_backward, tda_forward, tda_forward_cached, GateKind, TdaCache, TdaGradients, TdaParams};

use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Label, MemeSample};
use crate::rng::{derive_seed, seeded_rng};

/// Patch grid side; the image pathway sees `GRID*GRID` RGB cell means.
pub const PATCH_GRID: usize = 8;
/// Image feature dimension: 8x8 cells times 3 channels.
pub const IMAGE_FEATURES: usize = PATCH_GRID * PATCH_GRID * 3;
/// Byte-level vocabulary size.
pub const VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model is not trained")]
    NotTrained,
    #[error("empty training split")]
    EmptyTrainSet,
    #[error("non-finite loss at epoch {epoch} (loss {loss})")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("cache does not match this model (cache dims {cache:?}, model dims {model:?})")]
    CacheMismatch {
        cache: (usize, usize),
        model: (usize, usize),
    },
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint at {path}: {reason}")]
    BadCheckpoint {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error("zero input dimension")]
    ZeroDim,
}

/// Dropout behaviour switch: dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which modality embeddings reach the fusion head.
///
/// Single-channel modes zero the other pathway's embedding before fusion,
/// so the suppressed input cannot influence the prediction at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Multimodal,
    TextOnly,
    ImageOnly,
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x, A: rows x cols, x: cols.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x, A: rows x cols, x: rows.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xr;
            }
        }
        y
    }

    /// A += outer(u, v), u: rows, v: cols.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let ur = u[r];
            let row = self.row_mut(r);
            for (c, val) in row.iter_mut().enumerate() {
                *val += ur * v[c];
            }
        }
    }
}

/// Smooth Gaussian-error nonlinearity (tanh form) and its derivative.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trainable parameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// Shared embedding width after the projections.
    pub d: usize,
    /// Byte embedding width.
    pub d_t: usize,
    pub char_embedding: Mat, // VOCAB x d_t
    pub text_w: Mat,         // d x d_t
    pub text_b: Vec<f64>,    // d
    pub image_w: Mat,        // d x IMAGE_FEATURES
    pub image_b: Vec<f64>,   // d
    pub fuse_w1: Mat,        // d x 2d
    pub fuse_b1: Vec<f64>,   // d
    pub fuse_w2: Mat,        // 2 x d
    pub fuse_b2: Vec<f64>,   // 2
    pub tda: Option<TdaParams>,
    pub trained: bool,
}

impl ToyModel {
    /// Seeded initialization. TDA (when requested) starts exactly
    /// transparent: its output scale `s` is zero.
    pub fn init(d: usize, d_t: usize, with_tda: bool, gate: GateKind, dropout_p: f64, seed: u64) -> ToyModel {
        let mut rng = seeded_rng(derive_seed(seed, &[0x1217]));
        ToyModel::init_with_rng(d, d_t, with_tda, gate, dropout_p, &mut rng)
    }

    fn init_with_rng(
        d: usize,
        d_t: usize,
        with_tda: bool,
        gate: GateKind,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> ToyModel {
        let normal = |scale: f64, rng: &mut dyn rand::RngCore| -> f64 {
            // Box-Muller keeps us independent of distribution crates here.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let emb_scale = 0.5;
        let char_embedding = Mat::from_fn(VOCAB, d_t, |_, _| normal(emb_scale, rng));
        let text_w = Mat::from_fn(d, d_t, |_, _| normal(1.0 / (d_t as f64).sqrt(), rng));
        let image_w = Mat::from_fn(d, IMAGE_FEATURES, |_, _| {
            normal(1.0 / (IMAGE_FEATURES as f64).sqrt(), rng)
        });
        let fuse_w1 = Mat::from_fn(d, 2 * d, |_, _| normal(1.0 / (2.0 * d as f64).sqrt(), rng));
        let fuse_w2 = Mat::from_fn(2, d, |_, _| normal(1.0 / (d as f64).sqrt(), rng));
        let tda = with_tda.then(|| TdaParams::init(d, gate, dropout_p, rng));
        ToyModel {
            d,
            d_t,
            char_embedding,
            text_w,
            text_b: vec![0.0; d],
            image_w,
            image_b: vec![0.0; d],
            fuse_w1,
            fuse_b1: vec![0.0; d],
            fuse_w2,
            fuse_b2: vec![0.0; 2],
            tda,
            trained: false,
        }
    }
}

/// 8x8 grid cell bounds along one axis (start, end), end exclusive.
/// Degenerate axes (< 8 pixels) collapse cells onto the nearest pixel.
fn cell_bounds(extent: u32, idx: usize) -> (u32, u32) {
    let lo = (idx as u64 * extent as u64 / PATCH_GRID as u64) as u32;
    let hi = ((idx + 1) as u64 * extent as u64 / PATCH_GRID as u64) as u32;
    if hi > lo {
        (lo, hi)
    } else {
        let lo = lo.min(extent.saturating_sub(1));
        (lo, lo + 1)
    }
}

/// Mean RGB per 8x8 grid cell, scaled to [0, 1]. Feature order is
/// `(cell_row * 8 + cell_col) * 3 + channel`.
pub fn patch_means(image: &RgbImage) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut feats = vec![0.0; IMAGE_FEATURES];
    for gy in 0..PATCH_GRID {
        let (y0, y1) = cell_bounds(h, gy);
        for gx in 0..PATCH_GRID {
            let (x0, x1) = cell_bounds(w, gx);
            let mut acc = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = image.get_pixel(x, y);
                    acc[0] += px[0] as f64;
                    acc[1] += px[1] as f64;
                    acc[2] += px[2] as f64;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let base = (gy * PATCH_GRID + gx) * 3;
            for c in 0..3 {
                feats[base + c] = acc[c] / (count * 255.0);
            }
        }
    }
    feats
}

/// Intermediates retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub channel: ChannelMode,
    pub caption_bytes: Vec<u8>,
    pub image_dims: (u32, u32),
    pub patch: Vec<f64>,
    pub pooled: Vec<f64>,
    pub t_raw: Vec<f64>,
    pub tda: Option<TdaCache>,
    pub t_final: Vec<f64>,
    pub i_raw: Vec<f64>,
    pub i_final: Vec<f64>,
    pub z: Vec<f64>,
    pub a1: Vec<f64>,
    pub h1: Vec<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    dims: (usize, usize),
}

/// Gradient of the loss with respect to the caption's byte one-hots.
#[derive(Debug, Clone)]
pub struct CaptionGradient {
    /// `rows[p][b]`: first-order loss change from placing byte `b` at
    /// position `p` (relative to a zero embedding there).
    pub rows: Vec<Vec<f64>>,
    /// Score row for bytes inserted at any boundary.
    pub insert_row: Vec<f64>,
}

/// Gradient of the loss with respect to pixels, in [0, 1] pixel scale.
#[derive(Debug, Clone)]
pub struct PixelGradient {
    pub width: u32,
    pub height: u32,
    /// Row-major `(y, x, channel)` layout, length `3 * width * height`.
    pub data: Vec<f64>,
}

/// Exact loss gradients for every parameter and for both inputs.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub char_embedding: Mat,
    pub text_w: Mat,
    pub text_b: Vec<f64>,
    pub image_w: Mat,
    pub image_b: Vec<f64>,
    pub fuse_w1: Mat,
    pub fuse_b1: Vec<f64>,
    pub fuse_w2: Mat,
    pub fuse_b2: Vec<f64>,
    pub tda: Option<TdaGradients>,
    pub caption: CaptionGradient,
    pub pixels: PixelGradient,
}

/// Run the model on one sample.
pub fn forward(model: &ToyModel, sample: &MemeSample, mode: Mode) -> ForwardCache {
    forward_opts(model, sample, mode, ChannelMode::Multimodal, 0)
}

/// Full-control forward: channel ablation plus the dropout seed used when
/// `mode` is `Train`.
pub fn forward_opts(
    model: &ToyModel,
    sample: &MemeSample,
    mode: Mode,
    channel: ChannelMode,
    dropout_seed: u64,
) -> ForwardCache {
    let caption_bytes = sample.caption.as_bytes().to_vec();
    let patch = patch_means(&sample.image);
    forward_parts(
        model,
        caption_bytes,
        patch,
        (sample.image.width(), sample.image.height()),
        mode,
        channel,
        dropout_seed,
    )
}

fn forward_parts(
    model: &ToyModel,
    caption_bytes: Vec<u8>,
    patch: Vec<f64>,
    image_dims: (u32, u32),
    mode: Mode,
    channel: ChannelMode,
    dropout_seed: u64,
) -> ForwardCache {
    let d = model.d;

    // Text pathway: mean-pooled byte embeddings -> projection -> adapter.
    let mut pooled = vec![0.0; model.d_t];
    if !caption_bytes.is_empty() {
        for &b in &caption_bytes {
            let row = model.char_embedding.row(b as usize);
            for (dst, src) in pooled.iter_mut().zip(row.iter()) {
                *dst += src;
            }
        }
        let inv = 1.0 / caption_bytes.len() as f64;
        for v in pooled.iter_mut() {
            *v *= inv;
        }
    }
    let mut t_raw = model.text_w.matvec(&pooled);
    for (t, b) in t_raw.iter_mut().zip(model.text_b.iter()) {
        *t += b;
    }

    let (tda_cache, t_adj) = match &model.tda {
        Some(params) => {
            let cache = tda::tda_forward_cached(&t_raw, params, mode, dropout_seed);
            let y = cache.output.clone();
            (Some(cache), y)
        }
        None => (None, t_raw.clone()),
    };

    // Image pathway.
    let mut i_raw = model.image_w.matvec(&patch);
    for (v, b) in i_raw.iter_mut().zip(model.image_b.iter()) {
        *v += b;
    }

    let t_final = match channel {
        ChannelMode::ImageOnly => vec![0.0; d],
        _ => t_adj,
    };
    let i_final = match channel {
        ChannelMode::TextOnly => vec![0.0; d],
        _ => i_raw.clone(),
    };

    // Fusion head.
    let mut z = Vec::with_capacity(2 * d);
    z.extend_from_slice(&t_final);
    z.extend_from_slice(&i_final);
    let mut a1 = model.fuse_w1.matvec(&z);
    for (v, b) in a1.iter_mut().zip(model.fuse_b1.iter()) {
        *v += b;
    }
    let h1: Vec<f64> = a1.iter().map(|&x| gelu(x)).collect();
    let mut logit_v = model.fuse_w2.matvec(&h1);
    for (v, b) in logit_v.iter_mut().zip(model.fuse_b2.iter()) {
        *v += b;
    }
    let logits = [logit_v[0], logit_v[1]];
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let probs = [e0 / (e0 + e1), e1 / (e0 + e1)];

    ForwardCache {
        mode,
        channel,
        caption_bytes,
        image_dims,
        patch,
        pooled,
        t_raw,
        tda: tda_cache,
        t_final,
        i_raw,
        i_final,
        z,
        a1,
        h1,
        logits,
        probs,
        dims: (model.d, model.d_t),
    }
}

/// Cross-entropy of the cached prediction against `label`.
pub fn cross_entropy(cache: &ForwardCache, label: Label) -> f64 {
    -(cache.probs[label.index()].max(1e-300)).ln()
}

/// Exact gradients of the cross-entropy loss for every parameter and for
/// the inputs.
pub fn backward(
    model: &ToyModel,
    cache: &ForwardCache,
    label: Label,
) -> Result<GradientBundle, ModelError> {
    backward_weighted(model, cache, label, 1.0)
}

/// [`backward`] with a per-sample loss weight; a zero weight yields an
/// all-zero bundle.
pub fn backward_weighted(
    model: &ToyModel,
    cache: &ForwardCache,
    label: Label,
    weight: f64,
) -> Result<GradientBundle, ModelError> {
    if cache.dims != (model.d, model.d_t) {
        return Err(ModelError::CacheMismatch {
            cache: cache.dims,
            model: (model.d, model.d_t),
        });
    }
    let d = model.d;

    // Softmax + cross-entropy.
    let mut d_logits = [cache.probs[0] * weight, cache.probs[1] * weight];
    d_logits[label.index()] -= weight;

    let mut fuse_w2 = Mat::zeros(2, d);
    fuse_w2.add_outer(&d_logits, &cache.h1);
    let fuse_b2 = d_logits.to_vec();

    let dh1 = model.fuse_w2.matvec_t(&d_logits);
    let da1: Vec<f64> = dh1
        .iter()
        .zip(cache.a1.iter())
        .map(|(g, &a)| g * gelu_prime(a))
        .collect();

    let mut fuse_w1 = Mat::zeros(d, 2 * d);
    fuse_w1.add_outer(&da1, &cache.z);
    let fuse_b1 = da1.clone();

    let dz = model.fuse_w1.matvec_t(&da1);
    let (dt_final, di_final) = dz.split_at(d);

    // Channel zeroing is a hard gate: the suppressed pathway gets no signal.
    let dt_adj: Vec<f64> = match cache.channel {
        ChannelMode::ImageOnly => vec![0.0; d],
        _ => dt_final.to_vec(),
    };
    let di_raw: Vec<f64> = match cache.channel {
        ChannelMode::TextOnly => vec![0.0; d],
        _ => di_final.to_vec(),
    };

    // Adapter backward (if present), yielding the gradient at t_raw.
    let (tda_grads, dt_raw) = match (&model.tda, &cache.tda) {
        (Some(params), Some(tcache)) => {
            let (grads, dx) = tda::tda_backward(params, tcache, &dt_adj);
            (Some(grads), dx)
        }
        _ => (None, dt_adj),
    };

    // Text projection.
    let mut text_w = Mat::zeros(d, model.d_t);
    text_w.add_outer(&dt_raw, &cache.pooled);
    let text_b = dt_raw.clone();
    let dpooled = model.text_w.matvec_t(&dt_raw);

    // Byte embeddings and caption one-hot gradient. Under mean pooling the
    // per-position gradient row is shared: row[b] = <dpooled, E[b]> / n.
    let mut char_embedding = Mat::zeros(VOCAB, model.d_t);
    let n = cache.caption_bytes.len();
    let mut insert_row = vec![0.0; VOCAB];
    if n > 0 {
        let inv = 1.0 / n as f64;
        for &b in &cache.caption_bytes {
            let row = char_embedding.row_mut(b as usize);
            for (dst, g) in row.iter_mut().zip(dpooled.iter()) {
                *dst += g * inv;
            }
        }
        for b in 0..VOCAB {
            let emb = model.char_embedding.row(b);
            let mut acc = 0.0;
            for (e, g) in emb.iter().zip(dpooled.iter()) {
                acc += e * g;
            }
            insert_row[b] = acc * inv;
        }
    } else {
        // No positions: score additions as if one slot existed.
        for b in 0..VOCAB {
            let emb = model.char_embedding.row(b);
            let mut acc = 0.0;
            for (e, g) in emb.iter().zip(dpooled.iter()) {
                acc += e * g;
            }
            insert_row[b] = acc;
        }
    }
    let rows = vec![insert_row.clone(); n];
    let caption = CaptionGradient { rows, insert_row };

    // Image projection and pixel gradient.
    let mut image_w = Mat::zeros(d, IMAGE_FEATURES);
    image_w.add_outer(&di_raw, &cache.patch);
    let image_b = di_raw.clone();
    let dp = model.image_w.matvec_t(&di_raw);

    let (w, h) = cache.image_dims;
    let mut pixels = vec![0.0; (w * h * 3) as usize];
    for gy in 0..PATCH_GRID {
        let (y0, y1) = cell_bounds(h, gy);
        for gx in 0..PATCH_GRID {
            let (x0, x1) = cell_bounds(w, gx);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let base = (gy * PATCH_GRID + gx) * 3;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = ((y * w + x) * 3) as usize;
                    for c in 0..3 {
                        // patch feature = mean(pixel01); d(feature)/d(px01) = 1/count.
                        pixels[p + c] += dp[base + c] / count;
                    }
                }
            }
        }
    }

    Ok(GradientBundle {
        char_embedding,
        text_w,
        text_b,
        image_w,
        image_b,
        fuse_w1,
        fuse_b1,
        fuse_w2,
        fuse_b2,
        tda: tda_grads,
        caption,
        pixels: PixelGradient {
            width: w,
            height: h,
            data: pixels,
        },
    })
}

/// Argmax prediction. Exact probability ties resolve to benign.
pub fn predict(model: &ToyModel, sample: &MemeSample) -> Result<(Label, [f64; 2]), ModelError> {
    predict_with_mode(model, sample, ChannelMode::Multimodal)
}

pub fn predict_with_mode(
    model: &ToyModel,
    sample: &MemeSample,
    channel: ChannelMode,
) -> Result<(Label, [f64; 2]), ModelError> {
    if !model.trained {
        return Err(ModelError::NotTrained);
    }
    let cache = forward_opts(model, sample, Mode::Eval, channel, 0);
    let label = if cache.probs[1] > cache.probs[0] {
        Label::Hateful
    } else {
        Label::Benign
    };
    Ok((label, cache.probs))
}

// ---------------------------------------------------------------------------
// Parameter flattening: one canonical order shared by the optimizer, the
// finite-difference checks, and the checkpoint format.
// ---------------------------------------------------------------------------

impl ToyModel {
    pub fn num_params(&self) -> usize {
        let mut n = self.char_embedding.data.len()
            + self.text_w.data.len()
            + self.text_b.len()
            + self.image_w.data.len()
            + self.image_b.len()
            + self.fuse_w1.data.len()
            + self.fuse_b1.len()
            + self.fuse_w2.data.len()
            + self.fuse_b2.len();
        if let Some(tda) = &self.tda {
            n += tda.num_params();
        }
        n
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.char_embedding.data);
        out.extend_from_slice(&self.text_w.data);
        out.extend_from_slice(&self.text_b);
        out.extend_from_slice(&self.image_w.data);
        out.extend_from_slice(&self.image_b);
        out.extend_from_slice(&self.fuse_w1.data);
        out.extend_from_slice(&self.fuse_b1);
        out.extend_from_slice(&self.fuse_w2.data);
        out.extend_from_slice(&self.fuse_b2);
        if let Some(tda) = &self.tda {
            tda.flatten_into(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count mismatch");
        let mut off = 0;
        let take = |dst: &mut [f64], off: &mut usize| {
            dst.copy_from_slice(&flat[*off..*off + dst.len()]);
            *off += dst.len();
        };
        take(&mut self.char_embedding.data, &mut off);
        take(&mut self.text_w.data, &mut off);
        take(&mut self.text_b, &mut off);
        take(&mut self.image_w.data, &mut off);
        take(&mut self.image_b, &mut off);
        take(&mut self.fuse_w1.data, &mut off);
        take(&mut self.fuse_b1, &mut off);
        take(&mut self.fuse_w2.data, &mut off);
        take(&mut self.fuse_b2, &mut off);
        if let Some(tda) = &mut self.tda {
            off = tda.set_from(flat, off);
        }
        debug_assert_eq!(off, flat.len());
    }

    /// True when every parameter is finite.
    pub fn params_finite(&self) -> bool {
        self.flatten_params().iter().all(|v| v.is_finite())
    }
}

impl GradientBundle {
    /// Parameter gradients in the same order as
    /// [`ToyModel::flatten_params`]; input gradients are excluded.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.char_embedding.data);
        out.extend_from_slice(&self.text_w.data);
        out.extend_from_slice(&self.text_b);
        out.extend_from_slice(&self.image_w.data);
        out.extend_from_slice(&self.image_b);
        out.extend_from_slice(&self.fuse_w1.data);
        out.extend_from_slice(&self.fuse_b1);
        out.extend_from_slice(&self.fuse_w2.data);
        out.extend_from_slice(&self.fuse_b2);
        if let Some(tda) = &self.tda {
            tda.flatten_into(&mut out);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Hyperparameters for [`train_classifier`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub d: usize,
    pub d_t: usize,
    pub dropout_p: f64,
    pub gate: GateKind,
    /// When set, the per-epoch training curve is written here as CSV
    /// (`epoch,loss,accuracy`).
    pub curve_path: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            d: 16,
            d_t: 12,
            dropout_p: 0.1,
            gate: GateKind::Scalar,
            curve_path: None,
        }
    }
}

/// One row of the persisted training curve.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Minibatch gradient descent with momentum on cross-entropy, clean data
/// only. Returns the model with its trained flag set; `epochs = 0` returns
/// the seeded initialization untouched.
pub fn train_classifier(
    dataset: &Dataset,
    config: &TrainConfig,
    with_tda: bool,
    seed: u64,
) -> Result<ToyModel, ModelError> {
    let (model, _curve) = train_classifier_with_curve(dataset, config, with_tda, seed)?;
    Ok(model)
}

pub fn train_classifier_with_curve(
    dataset: &Dataset,
    config: &TrainConfig,
    with_tda: bool,
    seed: u64,
) -> Result<(ToyModel, Vec<EpochStats>), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let mut model = ToyModel::init(config.d, config.d_t, with_tda, config.gate, config.dropout_p, seed);

    // Patch features never change during training; compute them once.
    let inputs: Vec<(Vec<u8>, Vec<f64>, (u32, u32), Label)> = dataset
        .samples
        .iter()
        .map(|s| {
            (
                s.caption.as_bytes().to_vec(),
                patch_means(&s.image),
                (s.image.width(), s.image.height()),
                s.label,
            )
        })
        .collect();

    let n_params = model.num_params();
    let mut velocity = vec![0.0; n_params];
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut shuffle_rng = seeded_rng(derive_seed(seed, &[0xe9_0c4, epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad_acc = vec![0.0; n_params];
            for (k, &sample_idx) in batch.iter().enumerate() {
                let (bytes, patch, dims, label) = &inputs[sample_idx];
                let dropout_seed =
                    derive_seed(seed, &[0xd20_u64, epoch as u64, batch_idx as u64, k as u64]);
                let cache = forward_parts(
                    &model,
                    bytes.clone(),
                    patch.clone(),
                    *dims,
                    Mode::Train,
                    ChannelMode::Multimodal,
                    dropout_seed,
                );
                let loss = cross_entropy(&cache, *label);
                if !loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, loss });
                }
                epoch_loss += loss;
                let predicted = if cache.probs[1] > cache.probs[0] {
                    Label::Hateful
                } else {
                    Label::Benign
                };
                if predicted == *label {
                    correct += 1;
                }
                let bundle = backward(&model, &cache, *label)?;
                let flat = bundle.flatten_params();
                for (acc, g) in grad_acc.iter_mut().zip(flat.iter()) {
                    *acc += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut params = model.flatten_params();
            for i in 0..n_params {
                velocity[i] = config.momentum * velocity[i] - config.learning_rate * grad_acc[i] * inv;
                params[i] += velocity[i];
            }
            model.set_params(&params);
        }
        curve.push(EpochStats {
            epoch,
            loss: epoch_loss / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
        });
    }

    model.trained = true;
    if let Some(path) = &config.curve_path {
        write_curve(path, &curve).map_err(|source| ModelError::CheckpointIo {
            path: path.clone(),
            source,
        })?;
    }
    Ok((model, curve))
}

fn write_curve(path: &Path, curve: &[EpochStats]) -> std::io::Result<()> {
    let mut out = String::from("epoch,loss,accuracy\n");
    for row in curve {
        out.push_str(&format!("{},{:.6},{:.6}\n", row.epoch, row.loss, row.accuracy));
    }
    fs::write(path, out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MBMODEL\x01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    d: usize,
    d_t: usize,
    with_tda: bool,
    gate: Option<GateKind>,
    dropout_p: f64,
    trained: bool,
    seed: u64,
    config_hash: String,
}

/// Write the model as a versioned binary: magic, JSON header, then all
/// parameter rasters as little-endian f64 in flatten order.
pub fn save_checkpoint(
    model: &ToyModel,
    path: &Path,
    seed: u64,
    config_hash: &str,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        format_version: 1,
        d: model.d,
        d_t: model.d_t,
        with_tda: model.tda.is_some(),
        gate: model.tda.as_ref().map(|t| t.gate),
        dropout_p: model.tda.as_ref().map(|t| t.dropout_p).unwrap_or(0.0),
        trained: model.trained,
        seed,
        config_hash: config_hash.to_string(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let params = model.flatten_params();

    let io_err = |source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    file.write_all(&(params.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    let mut raw = Vec::with_capacity(params.len() * 8);
    for v in &params {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&raw).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| ModelError::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 8 {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != 1 {
        return Err(bad("unsupported format version"));
    }
    let count = u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap()) as usize;
    let data_start = header_end + 8;
    if bytes.len() != data_start + count * 8 {
        return Err(bad("parameter payload length mismatch"));
    }
    let mut params = Vec::with_capacity(count);
    for chunk in bytes[data_start..].chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let mut model = ToyModel::init(
        header.d,
        header.d_t,
        header.with_tda,
        header.gate.unwrap_or(GateKind::Scalar),
        header.dropout_p,
        header.seed,
    );
    if params.len() != model.num_params() {
        return Err(bad("parameter count does not match header dims"));
    }
    model.set_params(&params);
    model.trained = header.trained;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Attack surfaces
// ---------------------------------------------------------------------------

/// Loss surface over captions for one sample: the image and a fixed label
/// are held constant while the caption varies. Character-level attacks
/// maximize it (toward the true label) or minimize it (toward an attack
/// target).
pub struct CaptionSurface<'a> {
    model: &'a ToyModel,
    patch: Vec<f64>,
    image_dims: (u32, u32),
    label: Label,
    channel: ChannelMode,
}

impl ToyModel {
    pub fn caption_surface<'a>(
        &'a self,
        sample: &MemeSample,
        label: Label,
        channel: ChannelMode,
    ) -> Result<CaptionSurface<'a>, ModelError> {
        if !self.trained {
            return Err(ModelError::NotTrained);
        }
        Ok(CaptionSurface {
            model: self,
            patch: patch_means(&sample.image),
            image_dims: (sample.image.width(), sample.image.height()),
            label,
            channel,
        })
    }
}

impl crate::textnoise::CaptionLossSurface for CaptionSurface<'_> {
    fn loss(&self, caption: &str) -> f64 {
        let cache = forward_parts(
            self.model,
            caption.as_bytes().to_vec(),
            self.patch.clone(),
            self.image_dims,
            Mode::Eval,
            self.channel,
            0,
        );
        cross_entropy(&cache, self.label)
    }

    fn gradient(&self, caption: &str) -> CaptionGradient {
        let cache = forward_parts(
            self.model,
            caption.as_bytes().to_vec(),
            self.patch.clone(),
            self.image_dims,
            Mode::Eval,
            self.channel,
            0,
        );
        backward(self.model, &cache, self.label)
            .expect("cache built from this model")
            .caption
    }
}

impl crate::imagenoise::PixelLossModel for ToyModel {
    fn pixel_loss_gradient(
        &self,
        sample: &MemeSample,
    ) -> Result<(f64, PixelGradient), ModelError> {
        if !self.trained {
            return Err(ModelError::NotTrained);
        }
        let cache = forward(self, sample, Mode::Eval);
        let loss = cross_entropy(&cache, sample.label);
        let bundle = backward(self, &cache, sample.label)?;
        Ok((loss, bundle.pixels))
    }

    fn predict_label(&self, sample: &MemeSample) -> Result<Label, ModelError> {
        Ok(predict(self, sample)?.0)
    }
}

/// SHA-256 of a checkpoint file, hex-encoded. Used to tie perturbation
/// artifacts to the exact model that produced them.
pub fn checkpoint_hash(path: &Path) -> Result<String, ModelError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
