//! Text denoising adapter: a gated residual bottleneck on the text
//! embedding.
//!
//! For input `x` the adapter computes
//!
//! ```text
//! g      = sigmoid(W_g x + b_g)
//! update = s * g * MLP(LayerNorm(x))
//! y      = x + Dropout(update)
//! ```
//!
//! The gate modulates how much correction is applied per input, the
//! learnable scalar `s` bounds the correction globally (it starts at 0, so
//! a fresh adapter is exactly the identity), and the residual form means
//! the original embedding is never destroyed. Dropout is active only in
//! train mode, with inverted scaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gelu, gelu_prime, sigmoid, Mat, Mode};
use crate::rng::seeded_rng;

const LAYERNORM_EPS: f64 = 1e-5;

/// Gate dimensionality: one shared scalar gate, or one gate per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Scalar,
    PerDimension,
}

/// Adapter parameters. The MLP bottleneck is `d -> d/4 -> d` with a smooth
/// Gaussian-error nonlinearity; LayerNorm scale/shift are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct TdaParams {
    pub d: usize,
    pub hidden: usize,
    pub gate: GateKind,
    /// Gate weights: 1 x d for the scalar gate, d x d per-dimension.
    pub gate_w: Mat,
    pub gate_b: Vec<f64>,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
    pub mlp_w1: Mat, // hidden x d
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Mat, // d x hidden
    pub mlp_b2: Vec<f64>,
    pub s: f64,
    pub dropout_p: f64,
}

impl TdaParams {
    pub fn init(d: usize, gate: GateKind, dropout_p: f64, rng: &mut impl Rng) -> TdaParams {
        assert!((0.0..1.0).contains(&dropout_p), "dropout_p must be in [0,1)");
        let hidden = (d / 4).max(1);
        let gate_rows = match gate {
            GateKind::Scalar => 1,
            GateKind::PerDimension => d,
        };
        let normal = |scale: f64, rng: &mut dyn rand::RngCore| -> f64 {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        TdaParams {
            d,
            hidden,
            gate,
            gate_w: Mat::zeros(gate_rows, d),
            gate_b: vec![0.0; gate_rows],
            ln_scale: vec![1.0; d],
            ln_shift: vec![0.0; d],
            mlp_w1: Mat::from_fn(hidden, d, |_, _| normal(1.0 / (d as f64).sqrt(), rng)),
            mlp_b1: vec![0.0; hidden],
            mlp_w2: Mat::from_fn(d, hidden, |_, _| normal(1.0 / (hidden as f64).sqrt(), rng)),
            mlp_b2: vec![0.0; d],
            s: 0.0,
            dropout_p,
        }
    }

    pub fn num_params(&self) -> usize {
        self.gate_w.data.len()
            + self.gate_b.len()
            + self.ln_scale.len()
            + self.ln_shift.len()
            + self.mlp_w1.data.len()
            + self.mlp_b1.len()
            + self.mlp_w2.data.len()
            + self.mlp_b2.len()
            + 1
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.gate_w.data);
        out.extend_from_slice(&self.gate_b);
        out.extend_from_slice(&self.ln_scale);
        out.extend_from_slice(&self.ln_shift);
        out.extend_from_slice(&self.mlp_w1.data);
        out.extend_from_slice(&self.mlp_b1);
        out.extend_from_slice(&self.mlp_w2.data);
        out.extend_from_slice(&self.mlp_b2);
        out.push(self.s);
    }

    pub fn set_from(&mut self, flat: &[f64], mut off: usize) -> usize {
        let take = |dst: &mut [f64], off: &mut usize| {
            dst.copy_from_slice(&flat[*off..*off + dst.len()]);
            *off += dst.len();
        };
        take(&mut self.gate_w.data, &mut off);
        take(&mut self.gate_b, &mut off);
        take(&mut self.ln_scale, &mut off);
        take(&mut self.ln_shift, &mut off);
        take(&mut self.mlp_w1.data, &mut off);
        take(&mut self.mlp_b1, &mut off);
        take(&mut self.mlp_w2.data, &mut off);
        take(&mut self.mlp_b2, &mut off);
        self.s = flat[off];
        off + 1
    }
}

/// Adapter gradients, shaped like [`TdaParams`].
#[derive(Debug, Clone)]
pub struct TdaGradients {
    pub gate_w: Mat,
    pub gate_b: Vec<f64>,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
    pub mlp_w1: Mat,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Mat,
    pub mlp_b2: Vec<f64>,
    pub s: f64,
}

impl TdaGradients {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.gate_w.data);
        out.extend_from_slice(&self.gate_b);
        out.extend_from_slice(&self.ln_scale);
        out.extend_from_slice(&self.ln_shift);
        out.extend_from_slice(&self.mlp_w1.data);
        out.extend_from_slice(&self.mlp_b1);
        out.extend_from_slice(&self.mlp_w2.data);
        out.extend_from_slice(&self.mlp_b2);
        out.push(self.s);
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TdaCache {
    pub input: Vec<f64>,
    pub gate_pre: Vec<f64>,
    pub gate: Vec<f64>,
    pub mean: f64,
    pub inv_std: f64,
    pub xhat: Vec<f64>,
    pub ln_out: Vec<f64>,
    pub mlp_pre: Vec<f64>,
    pub mlp_hidden: Vec<f64>,
    pub mlp_out: Vec<f64>,
    pub update: Vec<f64>,
    pub dropout_mask: Vec<f64>,
    pub output: Vec<f64>,
    /// Mean gate value, the scalar reported to callers.
    pub gate_mean: f64,
}

/// Apply the adapter to one embedding. Returns `(y, g)` where `g` is the
/// gate value (mean over dimensions for the per-dimension variant).
pub fn tda_forward(x: &[f64], params: &TdaParams, mode: Mode, seed: u64) -> (Vec<f64>, f64) {
    let cache = tda_forward_cached(x, params, mode, seed);
    let g = cache.gate_mean;
    (cache.output, g)
}

pub fn tda_forward_cached(x: &[f64], params: &TdaParams, mode: Mode, seed: u64) -> TdaCache {
    let d = params.d;
    debug_assert_eq!(x.len(), d);

    let gate_pre = {
        let mut v = params.gate_w.matvec(x);
        for (a, b) in v.iter_mut().zip(params.gate_b.iter()) {
            *a += b;
        }
        v
    };
    let gate: Vec<f64> = gate_pre.iter().map(|&p| sigmoid(p)).collect();
    let gate_mean = gate.iter().sum::<f64>() / gate.len() as f64;

    // LayerNorm with trainable affine.
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let ln_out: Vec<f64> = xhat
        .iter()
        .zip(params.ln_scale.iter().zip(params.ln_shift.iter()))
        .map(|(h, (sc, sh))| h * sc + sh)
        .collect();

    // Bottleneck MLP.
    let mut mlp_pre = params.mlp_w1.matvec(&ln_out);
    for (a, b) in mlp_pre.iter_mut().zip(params.mlp_b1.iter()) {
        *a += b;
    }
    let mlp_hidden: Vec<f64> = mlp_pre.iter().map(|&v| gelu(v)).collect();
    let mut mlp_out = params.mlp_w2.matvec(&mlp_hidden);
    for (a, b) in mlp_out.iter_mut().zip(params.mlp_b2.iter()) {
        *a += b;
    }

    let update: Vec<f64> = match params.gate {
        GateKind::Scalar => mlp_out.iter().map(|&u| params.s * gate[0] * u).collect(),
        GateKind::PerDimension => mlp_out
            .iter()
            .zip(gate.iter())
            .map(|(&u, &g)| params.s * g * u)
            .collect(),
    };

    let dropout_mask: Vec<f64> = match mode {
        Mode::Eval => vec![1.0; d],
        Mode::Train => {
            if params.dropout_p == 0.0 {
                vec![1.0; d]
            } else {
                let keep = 1.0 - params.dropout_p;
                let mut rng = seeded_rng(seed);
                (0..d)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    };

    let output: Vec<f64> = x
        .iter()
        .zip(update.iter().zip(dropout_mask.iter()))
        .map(|(xv, (u, m))| xv + u * m)
        .collect();

    TdaCache {
        input: x.to_vec(),
        gate_pre,
        gate,
        mean,
        inv_std,
        xhat,
        ln_out,
        mlp_pre,
        mlp_hidden,
        mlp_out,
        update,
        dropout_mask,
        output,
        gate_mean,
    }
}

/// Backward pass: given dL/dy, produce parameter gradients and dL/dx.
pub fn tda_backward(params: &TdaParams, cache: &TdaCache, dy: &[f64]) -> (TdaGradients, Vec<f64>) {
    let d = params.d;
    debug_assert_eq!(dy.len(), d);

    let mut dx: Vec<f64> = dy.to_vec(); // residual branch

    // Through dropout.
    let d_update: Vec<f64> = dy
        .iter()
        .zip(cache.dropout_mask.iter())
        .map(|(g, m)| g * m)
        .collect();

    // update = s * g * mlp_out (g scalar or per-dim).
    let mut ds = 0.0;
    let mut d_gate = vec![0.0; cache.gate.len()];
    let mut d_mlp_out = vec![0.0; d];
    match params.gate {
        GateKind::Scalar => {
            let g = cache.gate[0];
            for i in 0..d {
                ds += d_update[i] * g * cache.mlp_out[i];
                d_gate[0] += d_update[i] * params.s * cache.mlp_out[i];
                d_mlp_out[i] = d_update[i] * params.s * g;
            }
        }
        GateKind::PerDimension => {
            for i in 0..d {
                let g = cache.gate[i];
                ds += d_update[i] * g * cache.mlp_out[i];
                d_gate[i] = d_update[i] * params.s * cache.mlp_out[i];
                d_mlp_out[i] = d_update[i] * params.s * g;
            }
        }
    }

    // Gate backward: sigmoid.
    let d_gate_pre: Vec<f64> = d_gate
        .iter()
        .zip(cache.gate.iter())
        .map(|(dg, &g)| dg * g * (1.0 - g))
        .collect();
    let mut gate_w = Mat::zeros(params.gate_w.rows, params.gate_w.cols);
    gate_w.add_outer(&d_gate_pre, &cache.input);
    let gate_b = d_gate_pre.clone();
    let dx_gate = params.gate_w.matvec_t(&d_gate_pre);
    for (a, b) in dx.iter_mut().zip(dx_gate.iter()) {
        *a += b;
    }

    // MLP backward.
    let mut mlp_w2 = Mat::zeros(d, params.hidden);
    mlp_w2.add_outer(&d_mlp_out, &cache.mlp_hidden);
    let mlp_b2 = d_mlp_out.clone();
    let d_hidden = params.mlp_w2.matvec_t(&d_mlp_out);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(cache.mlp_pre.iter())
        .map(|(g, &a)| g * gelu_prime(a))
        .collect();
    let mut mlp_w1 = Mat::zeros(params.hidden, d);
    mlp_w1.add_outer(&d_pre, &cache.ln_out);
    let mlp_b1 = d_pre.clone();
    let d_ln_out = params.mlp_w1.matvec_t(&d_pre);

    // LayerNorm backward (affine then normalization).
    let ln_scale: Vec<f64> = d_ln_out
        .iter()
        .zip(cache.xhat.iter())
        .map(|(g, h)| g * h)
        .collect();
    let ln_shift = d_ln_out.clone();
    let d_xhat: Vec<f64> = d_ln_out
        .iter()
        .zip(params.ln_scale.iter())
        .map(|(g, sc)| g * sc)
        .collect();
    let mean_dxhat = d_xhat.iter().sum::<f64>() / d as f64;
    let mean_dxhat_xhat = d_xhat
        .iter()
        .zip(cache.xhat.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / d as f64;
    for i in 0..d {
        dx[i] += cache.inv_std * (d_xhat[i] - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
    }

    (
        TdaGradients {
            gate_w,
            gate_b,
            ln_scale,
            ln_shift,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            s: ds,
        },
        dx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_params(d: usize, gate: GateKind, seed: u64) -> TdaParams {
        let mut rng = seeded_rng(seed);
        let mut p = TdaParams::init(d, gate, 0.0, &mut rng);
        // Randomize everything the initializer leaves at identity/zero so
        // the gradient check exercises the full computation.
        for v in p.gate_w.data.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        for v in p.gate_b.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in p.ln_scale.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in p.ln_shift.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        p.s = rng.random_range(-1.0..1.0);
        p
    }

    #[test]
    fn zero_scale_is_exact_identity() {
        let mut rng = seeded_rng(3);
        for d in [4, 8, 16] {
            let mut params = random_params(d, GateKind::Scalar, d as u64);
            params.s = 0.0;
            for _ in 0..20 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (y, _) = tda_forward(&x, &params, Mode::Eval, 0);
                assert_eq!(y, x, "s = 0 must be a bit-exact identity");
            }
        }
    }

    #[test]
    fn saturated_closed_gate_passes_input_through() {
        let d = 8;
        let mut params = random_params(d, GateKind::Scalar, 7);
        params.s = 1.0;
        for v in params.gate_w.data.iter_mut() {
            *v = 0.0;
        }
        params.gate_b[0] = -20.0;
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (y, g) = tda_forward(&x, &params, Mode::Eval, 0);
            assert!(g < 1e-8);
            let max_dev = y
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dev < 1e-6, "gate saturated closed, got dev {max_dev}");
        }
    }

    #[test]
    fn gate_stays_strictly_inside_unit_interval() {
        let d = 6;
        let params = random_params(d, GateKind::PerDimension, 13);
        let mut rng = seeded_rng(17);
        for _ in 0..200 {
            // Embedding-scale inputs; sigmoid saturates to exactly 0/1 in
            // f64 beyond |pre| ~ 37, which no trained embedding reaches.
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0..6.0)).collect();
            let cache = tda_forward_cached(&x, &params, Mode::Eval, 0);
            for &g in &cache.gate {
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn dropout_trains_stochastically_and_evals_deterministically() {
        let d = 16;
        let mut rng = seeded_rng(23);
        let mut params = TdaParams::init(d, GateKind::Scalar, 0.5, &mut rng);
        params.s = 1.0;
        params.gate_b[0] = 2.0;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();

        let (train_a, _) = tda_forward(&x, &params, Mode::Train, 1);
        let (train_a2, _) = tda_forward(&x, &params, Mode::Train, 1);
        let (train_b, _) = tda_forward(&x, &params, Mode::Train, 2);
        assert_eq!(train_a, train_a2, "same dropout seed, same output");
        assert_ne!(train_a, train_b, "different dropout seed should differ");

        let (eval_a, _) = tda_forward(&x, &params, Mode::Eval, 1);
        let (eval_b, _) = tda_forward(&x, &params, Mode::Eval, 99);
        assert_eq!(eval_a, eval_b, "eval ignores the dropout seed");
    }

    /// Finite-difference oracle: analytic gradient of w . y through the
    /// adapter vs central differences, for both gate kinds.
    #[test]
    fn gradients_match_central_finite_differences() {
        let d = 8;
        let h = 1e-5;
        for (case, gate) in [(0u64, GateKind::Scalar), (1u64, GateKind::PerDimension)] {
            let params = random_params(d, gate, 31 + case);
            let mut rng = seeded_rng(37 + case);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

            let loss = |p: &TdaParams, xv: &[f64]| -> f64 {
                let (y, _) = tda_forward(xv, p, Mode::Eval, 0);
                y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
            };

            let cache = tda_forward_cached(&x, &params, Mode::Eval, 0);
            let (grads, dx) = tda_backward(&params, &cache, &w);

            // Input gradient.
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let num = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
                let err = (dx[i] - num).abs() / dx[i].abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4, "dx[{i}]: analytic {} vs fd {num}", dx[i]);
            }

            // Parameter gradients via the flat vector.
            let mut flat = Vec::new();
            params.flatten_into(&mut flat);
            let mut grad_flat = Vec::new();
            grads.flatten_into(&mut grad_flat);
            for i in (0..flat.len()).step_by(3) {
                let mut pp = params.clone();
                let mut pm = params.clone();
                let mut fp = flat.clone();
                let mut fm = flat.clone();
                fp[i] += h;
                fm[i] -= h;
                pp.set_from(&fp, 0);
                pm.set_from(&fm, 0);
                let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let err =
                    (grad_flat[i] - num).abs() / grad_flat[i].abs().max(num.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "param {i}: analytic {} vs fd {num}",
                    grad_flat[i]
                );
            }
        }
    }
}
