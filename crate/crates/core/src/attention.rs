//! Global multi-head, spatial window, and channel group attention.
//!
//! Feature maps are channels-last: `[N, h, w, C]` for spatial grids and
//! `[B, P, C]` for token sequences. Windows are numbered row-major starting at
//! the top-left window; patches inside a window are numbered row-major too.
//! Linear weights are stored `[in, out]` so a projection is `x · W + b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, geometry_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{sc, Scalar, Tensor};

/// Scaling applied to channel-attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1/sqrt(C_g)`, the per-group channel width.
    #[default]
    InvSqrtCg,
    /// `1/sqrt(P)`, the number of spatial tokens, used for the scaled-up presets.
    InvSqrtP,
}

/// Non-overlapping window tiling of an `h x w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub side: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, side: usize) -> Result<Self> {
        if side == 0 || !h.is_multiple_of(side) || !w.is_multiple_of(side) {
            return Err(geometry_err!(
                "grid {h}x{w} cannot be tiled by non-overlapping {side}x{side} windows"
            ));
        }
        Ok(Self { h, w, side })
    }

    /// `N_w`
    pub fn num_windows(&self) -> usize {
        (self.h / self.side) * (self.w / self.side)
    }

    /// `P_w`
    pub fn window_area(&self) -> usize {
        self.side * self.side
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// `(window index, slot inside the window)` of patch `(row, col)`.
    pub fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        let window = (row / self.side) * (self.w / self.side) + col / self.side;
        let slot = (row % self.side) * self.side + col % self.side;
        (window, slot)
    }
}

fn nhwc(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(shape_err!(
            "expected an [N, h, w, C] feature map, got {shape:?}"
        )),
    }
}

/// `[N, h, w, C] -> [N*N_w, P_w, C]`.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, side: usize) -> Result<Var> {
    let [n, h, w, c] = nhwc(tape.shape(x))?;
    let g = WindowGrid::new(h, w, side)?;
    let s = g.side;
    let v = tape.reshape(x, &[n, h / s, s, w / s, s, c])?;
    let v = tape.permute(v, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(v, &[n * g.num_windows(), g.window_area(), c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: &WindowGrid) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [bw, pw, c] = match shape[..] {
        [a, b, c] => [a, b, c],
        _ => {
            return Err(shape_err!(
                "expected [N*N_w, P_w, C] windows, got {shape:?}"
            ))
        }
    };
    if pw != grid.window_area() || bw % grid.num_windows() != 0 {
        return Err(geometry_err!(
            "windows {shape:?} are inconsistent with a {}x{} grid of {}x{} windows",
            grid.h,
            grid.w,
            grid.side,
            grid.side
        ));
    }
    let n = bw / grid.num_windows();
    let s = grid.side;
    let v = tape.reshape(x, &[n, grid.h / s, grid.w / s, s, s, c])?;
    let v = tape.permute(v, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(v, &[n, grid.h, grid.w, c])
}

/// Tape-free [`window_partition`].
pub fn partition_tensor<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(x.shape())?;
    let g = WindowGrid::new(h, w, side)?;
    x.reshape(&[n, h / side, side, w / side, side, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n * g.num_windows(), g.window_area(), c])
}

/// Tape-free [`window_reverse`].
pub fn reverse_tensor<T: Scalar>(x: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = window_reverse(&mut tape, v, grid)?;
    Ok(tape.value(out).clone())
}

/// Projection weights for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar> {
    pub dim: usize,
    /// `N_h` for spatial attention, `N_g` for channel attention.
    pub heads: usize,
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub o_w: Tensor<T>,
    pub o_b: Tensor<T>,
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(config_err!(
            "{dim} channels cannot be split into {heads} heads/groups"
        ));
    }
    Ok(dim / heads)
}

impl<T: Scalar> AttentionParams<T> {
    /// Truncated-normal weights with the given std, zero biases.
    pub fn init(dim: usize, heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut w = || {
            let data = (0..dim * dim)
                .map(|_| sc::<T>(rng.truncated_normal(std)))
                .collect();
            Tensor::from_parts(vec![dim, dim], data)
        };
        let (q_w, k_w, v_w, o_w) = (w(), w(), w(), w());
        let z = || Tensor::zeros(&[dim]);
        Ok(Self {
            dim,
            heads,
            q_w,
            q_b: z(),
            k_w,
            k_b: z(),
            v_w,
            v_b: z(),
            o_w,
            o_b: z(),
        })
    }

    /// Identity projections and zero biases.
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        let e = || Tensor::eye(dim);
        let z = || Tensor::zeros(&[dim]);
        Ok(Self {
            dim,
            heads,
            q_w: e(),
            q_b: z(),
            k_w: e(),
            k_b: z(),
            v_w: e(),
            v_b: z(),
            o_w: e(),
            o_b: z(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> AttentionVars {
        let mut l = |w: &Tensor<T>, b: &Tensor<T>| Linear {
            w: tape.leaf(w.clone(), requires_grad),
            b: tape.leaf(b.clone(), requires_grad),
        };
        AttentionVars {
            dim: self.dim,
            heads: self.heads,
            q: l(&self.q_w, &self.q_b),
            k: l(&self.k_w, &self.k_b),
            v: l(&self.v_w, &self.v_b),
            o: l(&self.o_w, &self.o_b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

/// Attention projections recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionVars {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionVars {
    fn split(&self) -> Result<usize> {
        check_heads(self.dim, self.heads)
    }
}

fn tokens_shape<T: Scalar>(tape: &Tape<T>, x: Var, dim: usize) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, p, c] if c == dim => Ok([b, p, c]),
        ref s => Err(shape_err!("expected [B, P, {dim}] tokens, got {s:?}")),
    }
}

/// Multi-head self-attention over the `P` tokens of `[B, P, C]`.
pub fn global_mhsa<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &AttentionVars) -> Result<Var> {
    let ch = p.split()?;
    let [b, n, c] = tokens_shape(tape, x, p.dim)?;
    let heads = p.heads;
    let mut project = |lin: &Linear, perm: &[usize]| -> Result<Var> {
        let y = lin.apply(tape, x)?;
        let y = tape.reshape(y, &[b, n, heads, ch])?;
        tape.permute(y, perm)
    };
    let q = project(&p.q, &[0, 2, 1, 3])?; // [B, H, P, Ch]
    let kt = project(&p.k, &[0, 2, 3, 1])?; // [B, H, Ch, P]
    let v = project(&p.v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, sc::<T>(1.0 / (ch as f64).sqrt()))?;
    let attn = tape.softmax_lastaxis(scores)?;
    let y = tape.matmul(attn, v)?; // [B, H, P, Ch]
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    let y = tape.reshape(y, &[b, n, c])?;
    p.o.apply(tape, y)
}

/// Self-attention restricted to non-overlapping `side x side` windows of `[N, h, w, C]`.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    side: usize,
) -> Result<Var> {
    let [_, h, w, _] = nhwc(tape.shape(x))?;
    let grid = WindowGrid::new(h, w, side)?;
    let windows = window_partition(tape, x, side)?;
    let y = global_mhsa(tape, windows, p)?;
    window_reverse(tape, y, &grid)
}

/// Output and softmax weights `[B, N_g, C_g, C_g]` of a channel attention call.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttention {
    pub output: Var,
    pub weights: Var,
}

/// Single-head attention among the channel tokens of each channel group.
///
/// Per group `i`, with `Q_i, K_i, V_i` of shape `[P, C_g]`, the scores are
/// `Q_iᵀ K_i · scale` (`C_g x C_g`) and the group output is
/// `(softmax(scores) · V_iᵀ)ᵀ`, which is `[P, C_g]` again.
pub fn channel_group_attention_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    scale_mode: ScaleMode,
) -> Result<ChannelAttention> {
    let cg = p.split()?;
    let [b, n, c] = tokens_shape(tape, x, p.dim)?;
    let groups = p.heads;
    let mut project = |lin: &Linear, perm: &[usize]| -> Result<Var> {
        let y = lin.apply(tape, x)?;
        let y = tape.reshape(y, &[b, n, groups, cg])?;
        tape.permute(y, perm)
    };
    let qt = project(&p.q, &[0, 2, 3, 1])?; // [B, G, Cg, P]
    let k = project(&p.k, &[0, 2, 1, 3])?; // [B, G, P, Cg]
    let vt = project(&p.v, &[0, 2, 3, 1])?; // [B, G, Cg, P]
    let scale = match scale_mode {
        ScaleMode::InvSqrtCg => 1.0 / (cg as f64).sqrt(),
        ScaleMode::InvSqrtP => 1.0 / (n as f64).sqrt(),
    };
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, sc::<T>(scale))?;
    let weights = tape.softmax_lastaxis(scores)?;
    let y = tape.matmul(weights, vt)?; // [B, G, Cg, P]
    let y = tape.permute(y, &[0, 3, 1, 2])?; // [B, P, G, Cg]
    let y = tape.reshape(y, &[b, n, c])?;
    let output = p.o.apply(tape, y)?;
    Ok(ChannelAttention { output, weights })
}

pub fn channel_group_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    scale_mode: ScaleMode,
) -> Result<Var> {
    Ok(channel_group_attention_traced(tape, x, p, scale_mode)?.output)
}
