//! Reference implementations written as plain loops in 64-bit.
//!
//! They share no code with the tape ops and serve as oracles for them.

use crate::attention::{AttentionParams, ScaleMode};
use crate::tensor::{Scalar, Tensor};

/// `[m, k] x [k, n]` by the triple loop.
pub fn matmul_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct Dense {
    dim: usize,
    heads: usize,
    w: [Vec<f64>; 4],
    b: [Vec<f64>; 4],
}

impl Dense {
    fn new<T: Scalar>(p: &AttentionParams<T>) -> Self {
        Self {
            dim: p.dim,
            heads: p.heads,
            w: [&p.q_w, &p.k_w, &p.v_w, &p.o_w].map(|t| t.to_f64_vec()),
            b: [&p.q_b, &p.k_b, &p.v_b, &p.o_b].map(|t| t.to_f64_vec()),
        }
    }

    /// `x · W_i + b_i` for `[P, C]` tokens.
    fn project(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let c = self.dim;
        let p = x.len() / c;
        let mut y = matmul_loop(x, &self.w[i], p, c, c);
        for row in y.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&self.b[i]) {
                *v += b;
            }
        }
        y
    }
}

/// Multi-head self-attention of one `[P, C]` token sequence.
pub fn mhsa_loop<T: Scalar>(x: &[f64], params: &AttentionParams<T>) -> Vec<f64> {
    let d = Dense::new(params);
    let c = d.dim;
    let p = x.len() / c;
    let ch = c / d.heads;
    let (q, k, v) = (d.project(0, x), d.project(1, x), d.project(2, x));
    let scale = 1.0 / (ch as f64).sqrt();
    let mut concat = vec![0.0; p * c];
    for h in 0..d.heads {
        let off = h * ch;
        for i in 0..p {
            let mut row: Vec<f64> = (0..p)
                .map(|j| {
                    (0..ch)
                        .map(|t| q[i * c + off + t] * k[j * c + off + t])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax_in_place(&mut row);
            for t in 0..ch {
                concat[i * c + off + t] = (0..p).map(|j| row[j] * v[j * c + off + t]).sum();
            }
        }
    }
    d.project(3, &concat)
}

/// Window attention of one `[h, w, C]` grid: gather each window's tokens,
/// attend among them, scatter back.
pub fn window_attention_loop<T: Scalar>(
    x: &[f64],
    h: usize,
    w: usize,
    side: usize,
    params: &AttentionParams<T>,
) -> Vec<f64> {
    let c = params.dim;
    let mut out = vec![0.0; x.len()];
    for wr in 0..h / side {
        for wc in 0..w / side {
            let mut coords = Vec::new();
            for r in wr * side..(wr + 1) * side {
                for col in wc * side..(wc + 1) * side {
                    coords.push(r * w + col);
                }
            }
            let tokens: Vec<f64> = coords
                .iter()
                .flat_map(|&t| x[t * c..(t + 1) * c].to_vec())
                .collect();
            let y = mhsa_loop(&tokens, params);
            for (slot, &t) in coords.iter().enumerate() {
                out[t * c..(t + 1) * c].copy_from_slice(&y[slot * c..(slot + 1) * c]);
            }
        }
    }
    out
}

/// Channel group attention of one `[P, C]` sequence, evaluated on the
/// explicitly transposed projections: channel token `a` of group `g` is the
/// column `Q[:, g·C_g + a]`.
pub fn channel_attention_loop<T: Scalar>(
    x: &[f64],
    params: &AttentionParams<T>,
    mode: ScaleMode,
) -> Vec<f64> {
    let d = Dense::new(params);
    let c = d.dim;
    let p = x.len() / c;
    let cg = c / d.heads;
    let transpose = |m: &[f64]| -> Vec<f64> {
        let mut t = vec![0.0; m.len()];
        for i in 0..p {
            for j in 0..c {
                t[j * p + i] = m[i * c + j];
            }
        }
        t
    };
    let (qt, kt, vt) = (
        transpose(&d.project(0, x)),
        transpose(&d.project(1, x)),
        transpose(&d.project(2, x)),
    );
    let scale = match mode {
        ScaleMode::InvSqrtCg => 1.0 / (cg as f64).sqrt(),
        ScaleMode::InvSqrtP => 1.0 / (p as f64).sqrt(),
    };
    // rows of the transposed output are channel tokens
    let mut yt = vec![0.0; c * p];
    for g in 0..d.heads {
        for a in 0..cg {
            let ca = g * cg + a;
            let mut row: Vec<f64> = (0..cg)
                .map(|b| {
                    let cb = g * cg + b;
                    (0..p).map(|t| qt[ca * p + t] * kt[cb * p + t]).sum::<f64>() * scale
                })
                .collect();
            softmax_in_place(&mut row);
            for t in 0..p {
                yt[ca * p + t] = (0..cg).map(|b| row[b] * vt[(g * cg + b) * p + t]).sum();
            }
        }
    }
    let mut y = vec![0.0; p * c];
    for i in 0..p {
        for j in 0..c {
            y[i * c + j] = yt[j * p + i];
        }
    }
    d.project(3, &y)
}

/// Error function by the series `erf(x) = 2/sqrt(pi) · exp(-x²) · Σ (2x²)^n x / (2n+1)!!`,
/// whose terms are all positive, so no cancellation occurs.
pub fn erf_series(x: f64) -> f64 {
    let a = x.abs();
    if a > 6.0 {
        return 1f64.copysign(x);
    }
    let mut term = a;
    let mut sum = a;
    let mut n = 0.0;
    while term > 1e-17 * sum {
        n += 1.0;
        term *= 2.0 * a * a / (2.0 * n + 1.0);
        sum += term;
    }
    (2.0 / std::f64::consts::PI.sqrt() * (-a * a).exp() * sum).copysign(x)
}

pub fn gelu_series(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Evaluates a per-sample oracle over each leading index of a `[B, ...]` tensor.
pub fn per_sample(x: &Tensor<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let b = x.shape()[0];
    let per = x.len() / b;
    x.data().chunks(per).flat_map(f).collect()
}
