//! Jacobian sensitivity probe.
//!
//! Measures how far an encoder's output moves under a small input
//! perturbation, estimates the largest singular value of the local
//! finite-difference Jacobian, and counts its numerically nonzero singular
//! values. A query-bottlenecked encoder is provided whose Jacobian rank is
//! structurally capped at `queries * output_width`, no matter how wide the
//! input is.

use nalgebra::DMatrix;
use rand::Rng;

use super::{Mat, ModelError};
use crate::rng::{derive_seed, seeded_rng};

/// Probe output for one `(input, delta)` pair.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// `||f(x + delta) - f(x)||_2`.
    pub displacement: f64,
    /// Largest singular value of the finite-difference Jacobian, from
    /// power iteration.
    pub jacobian_norm_estimate: f64,
    /// Singular values above `1e-8 * sigma_max`.
    pub rank_estimate: usize,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    pub delta_norm: f64,
    /// `jacobian_norm_estimate * delta_norm`; the displacement should not
    /// exceed this by more than a second-order term.
    pub first_order_bound: f64,
}

/// Probe an arbitrary encoder `f` at `input` with perturbation `delta`.
///
/// `samples` bounds the power-iteration count for the norm estimate.
/// The finite-difference Jacobian uses central differences with step 1e-5.
pub fn sensitivity_probe(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    input: &[f64],
    delta: &[f64],
    samples: usize,
) -> Result<ProbeReport, ModelError> {
    if input.is_empty() {
        return Err(ModelError::ZeroDim);
    }
    assert_eq!(input.len(), delta.len(), "delta must match input length");

    let base = f(input);
    let moved = {
        let x: Vec<f64> = input.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        f(&x)
    };
    let displacement = base
        .iter()
        .zip(moved.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let delta_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();

    let jac = fd_jacobian(f, input, 1e-5);
    let sigma_max = power_iteration_sigma(&jac, samples.max(10));

    let rows = jac.rows;
    let cols = jac.cols;
    let m = DMatrix::from_row_slice(rows, cols, &jac.data);
    let mut singular_values: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = singular_values.first().copied().unwrap_or(0.0);
    let rank_estimate = singular_values.iter().filter(|&&s| s > 1e-8 * top).count();

    Ok(ProbeReport {
        displacement,
        jacobian_norm_estimate: sigma_max,
        rank_estimate,
        singular_values,
        delta_norm,
        first_order_bound: sigma_max * delta_norm,
    })
}

/// Central-difference Jacobian, `out_dim x in_dim`.
pub fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, input: &[f64], h: f64) -> Mat {
    let out_dim = f(input).len();
    let mut jac = Mat::zeros(out_dim, input.len());
    let mut xp = input.to_vec();
    let mut xm = input.to_vec();
    for c in 0..input.len() {
        xp[c] += h;
        xm[c] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for r in 0..out_dim {
            jac.row_mut(r)[c] = (fp[r] - fm[r]) / (2.0 * h);
        }
        xp[c] = input[c];
        xm[c] = input[c];
    }
    jac
}

/// Largest singular value via power iteration on J^T J.
fn power_iteration_sigma(jac: &Mat, iterations: usize) -> f64 {
    let n = jac.cols;
    if n == 0 || jac.rows == 0 {
        return 0.0;
    }
    let mut rng = seeded_rng(derive_seed(0x7031, &[jac.rows as u64, n as u64]));
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let jv = jac.matvec(&v);
        let mut jtjv = jac.matvec_t(&jv);
        let norm = normalize(&mut jtjv);
        if norm == 0.0 {
            return 0.0;
        }
        v = jtjv;
        sigma = jac.matvec(&v).iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    sigma
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Encoder with a frozen random feature map and a learned query bottleneck.
///
/// The input passes through a fixed (never trained) tanh feature map into
/// `token_count` tokens of width `token_dim`; `queries` attention rows then
/// pool tokens into a `queries x output_width` output. Every path from
/// input to output is funneled through the `queries * output_width`
/// numbers, so the end-to-end Jacobian has rank at most that product.
#[derive(Debug, Clone)]
pub struct BottleneckEncoder {
    pub input_dim: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub queries: usize,
    pub output_width: usize,
    frozen: Mat,    // (token_count * token_dim) x input_dim
    query_w: Mat,   // queries x token_dim
    value_w: Mat,   // output_width x token_dim
}

impl BottleneckEncoder {
    pub fn new(
        input_dim: usize,
        token_count: usize,
        token_dim: usize,
        queries: usize,
        output_width: usize,
        seed: u64,
    ) -> BottleneckEncoder {
        let mut rng = seeded_rng(derive_seed(seed, &[0xb0771e]));
        let feat = token_count * token_dim;
        // Scales chosen so sigma_max lands at order 1: the rank threshold
        // 1e-8 * sigma_max must sit well above finite-difference noise.
        let frozen = Mat::from_fn(feat, input_dim, |_, _| {
            rng.random_range(-1.5..1.5) / (input_dim as f64).sqrt()
        });
        let query_w = Mat::from_fn(queries, token_dim, |_, _| rng.random_range(-1.0..1.0));
        let value_w = Mat::from_fn(output_width, token_dim, |_, _| {
            rng.random_range(-1.5..1.5) / (token_dim as f64).sqrt() * 3.0
        });
        BottleneckEncoder {
            input_dim,
            token_count,
            token_dim,
            queries,
            output_width,
            frozen,
            query_w,
            value_w,
        }
    }

    /// Output dimension: `queries * output_width`.
    pub fn output_dim(&self) -> usize {
        self.queries * self.output_width
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim);
        let hidden: Vec<f64> = self.frozen.matvec(x).iter().map(|v| v.tanh()).collect();
        let scale = 1.0 / (self.token_dim as f64).sqrt();
        let mut out = Vec::with_capacity(self.output_dim());
        for q in 0..self.queries {
            let qrow = self.query_w.row(q);
            // Attention over tokens.
            let mut scores = Vec::with_capacity(self.token_count);
            for t in 0..self.token_count {
                let token = &hidden[t * self.token_dim..(t + 1) * self.token_dim];
                let s: f64 = qrow.iter().zip(token.iter()).map(|(a, b)| a * b).sum();
                scores.push(s * scale);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            // Weighted value projection of tokens.
            let mut pooled = vec![0.0; self.token_dim];
            for t in 0..self.token_count {
                let w = exps[t] / z;
                let token = &hidden[t * self.token_dim..(t + 1) * self.token_dim];
                for (p, v) in pooled.iter_mut().zip(token.iter()) {
                    *p += w * v;
                }
            }
            out.extend(self.value_w.matvec(&pooled));
        }
        out
    }
}
