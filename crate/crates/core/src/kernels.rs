//! Raw numeric kernels on flat row-major buffers.
//!
//! Every kernel partitions its output into disjoint chunks (see [`crate::par`])
//! and reduces within a chunk in index order, which keeps results independent
//! of the thread count.

use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::{numel, sc, strides, Scalar};

pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); data.len()];
    if rank == 0 || data.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    par::for_each_chunk(&mut out, inner, |row, chunk| {
        // decode the outer index of this row
        let mut rem = row;
        let mut base = 0;
        for ax in (0..rank - 1).rev() {
            let i = rem % out_shape[ax];
            rem /= out_shape[ax];
            base += i * src_strides[ax];
        }
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = data[base + j * inner_stride];
        }
    });
    out
}

/// Batch-dimension bookkeeping for a broadcasting matrix product.
#[derive(Debug, Clone)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// For every output batch, the batch index into `a` and into `b`.
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    pub a_batches: usize,
    pub b_batches: usize,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            ));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: {a:?} x {b:?}"));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(shape_err!(
                    "matmul batch dimensions do not broadcast: {a:?} x {b:?}"
                ));
            }
        }
        let total = numel(&batch);
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut a_batch = Vec::with_capacity(total);
        let mut b_batch = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let (mut ia, mut ib) = (0, 0);
            for ax in (0..rank).rev() {
                let i = rem % batch[ax];
                rem /= batch[ax];
                if pa[ax] != 1 {
                    ia += i * sa[ax];
                }
                if pb[ax] != 1 {
                    ib += i * sb[ax];
                }
            }
            a_batch.push(ia);
            b_batch.push(ib);
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            a_batch,
            b_batch,
            a_batches: numel(&pa),
            b_batches: numel(&pb),
        })
    }

    fn batches(&self) -> usize {
        self.a_batch.len()
    }
}

pub fn matmul<T: Scalar>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.batches() * m * n];
    par::for_each_chunk(&mut out, n, |row, c| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a[plan.a_batch[bi] * m * k + i * k..][..k];
        let b_mat = &b[plan.b_batch[bi] * k * n..][..k * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in c.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Gradient of `a` for `c = a b`: `dA = dC · Bᵀ`, summed over broadcast batches.
pub fn matmul_grad_a<T: Scalar>(plan: &MatmulPlan, dc: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let sources = group_batches(&plan.a_batch, plan.a_batches);
    let mut da = vec![T::zero(); plan.a_batches * m * k];
    par::for_each_chunk(&mut da, k, |row, c| {
        let (ab, i) = (row / m, row % m);
        for &ob in &sources[ab] {
            let dc_row = &dc[ob * m * n + i * n..][..n];
            let b_mat = &b[plan.b_batch[ob] * k * n..][..k * n];
            for (p, o) in c.iter_mut().enumerate() {
                let b_row = &b_mat[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (&x, &y) in dc_row.iter().zip(b_row) {
                    acc = acc + x * y;
                }
                *o = *o + acc;
            }
        }
    });
    da
}

/// Gradient of `b` for `c = a b`: `dB = Aᵀ · dC`, summed over broadcast batches.
pub fn matmul_grad_b<T: Scalar>(plan: &MatmulPlan, a: &[T], dc: &[T]) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let sources = group_batches(&plan.b_batch, plan.b_batches);
    let mut db = vec![T::zero(); plan.b_batches * k * n];
    par::for_each_chunk(&mut db, n, |row, c| {
        let (bb, p) = (row / k, row % k);
        for &ob in &sources[bb] {
            let a_mat = &a[plan.a_batch[ob] * m * k..][..m * k];
            let dc_mat = &dc[ob * m * n..][..m * n];
            for i in 0..m {
                let av = a_mat[i * k + p];
                if av == T::zero() {
                    continue;
                }
                for (o, &g) in c.iter_mut().zip(&dc_mat[i * n..(i + 1) * n]) {
                    *o = *o + av * g;
                }
            }
        }
    });
    db
}

fn group_batches(map: &[usize], count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); count];
    for (ob, &src) in map.iter().enumerate() {
        groups[src].push(ob);
    }
    groups
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut out, cols, |r, o| {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            let e = (v - max).exp();
            *dst = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for dst in o.iter_mut() {
            *dst = *dst * inv;
        }
    });
    out
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    par::for_each_chunk(&mut dx, cols, |r, o| {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let dot = yr
            .iter()
            .zip(gr)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((dst, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *dst = yv * (gv - dot);
        }
    });
    dx
}

/// Returns the normalized-and-affine output plus per-row `(mean, 1/std)`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> (Vec<T>, Vec<[T; 2]>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let stats: Vec<[T; 2]> = par::map_collect(rows, |r| {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / sc::<T>(c as f64);
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / sc::<T>(c as f64);
        [mean, T::one() / (var + sc::<T>(eps)).sqrt()]
    });
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut out, c, |r, o| {
        let [mean, rstd] = stats[r];
        for (j, dst) in o.iter_mut().enumerate() {
            *dst = (x[r * c + j] - mean) * rstd * gamma[j] + beta[j];
        }
    });
    (out, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    stats: &[[T; 2]],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let cf = sc::<T>(c as f64);
    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut dx, c, |r, o| {
        let [mean, rstd] = stats[r];
        let xr = &x[r * c..(r + 1) * c];
        let gr = &dy[r * c..(r + 1) * c];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..c {
            let g = gr[j] * gamma[j];
            let xh = (xr[j] - mean) * rstd;
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xh;
        }
        let (mg, mgx) = (sum_g / cf, sum_gx / cf);
        for j in 0..c {
            let g = gr[j] * gamma[j];
            let xh = (xr[j] - mean) * rstd;
            o[j] = rstd * (g - mg - xh * mgx);
        }
    });
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (r, [mean, rstd]) in stats.iter().enumerate() {
        for j in 0..c {
            let g = dy[r * c + j];
            dgamma[j] = dgamma[j] + g * (x[r * c + j] - *mean) * *rstd;
            dbeta[j] = dbeta[j] + g;
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut out, 1024, |ci, o| {
        for (j, dst) in o.iter_mut().enumerate() {
            let v = x[ci * 1024 + j].as_f64();
            *dst = T::from_f64_lossy(v * std_normal_cdf(v));
        }
    });
    out
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut out, 1024, |ci, o| {
        for (j, dst) in o.iter_mut().enumerate() {
            let idx = ci * 1024 + j;
            let v = x[idx].as_f64();
            let d = std_normal_cdf(v) + v * std_normal_pdf(v);
            *dst = dy[idx] * T::from_f64_lossy(d);
        }
    });
    out
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err!(
                "conv2d expects NCHW input and OIHW weight, got {x:?} and {w:?}"
            ));
        }
        if stride == 0 || groups == 0 {
            return Err(shape_err!("conv2d stride and groups must be positive"));
        }
        let g = ConvGeom {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            groups,
        };
        if !g.c_in.is_multiple_of(groups)
            || !g.c_out.is_multiple_of(groups)
            || w[1] != g.c_in / groups
        {
            return Err(shape_err!(
                "conv2d weight {w:?} incompatible with {} input channels in {groups} groups",
                g.c_in
            ));
        }
        if g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw {
            return Err(shape_err!(
                "conv2d output size is non-positive: input {}x{}, kernel {}x{}, pad {pad}",
                g.h,
                g.w,
                g.kh,
                g.kw
            ));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.out_h(), self.out_w()]
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Input row/column hit by output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let mut out = vec![T::zero(); g.n * g.c_out * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |plane, o| {
        let (n, co) = (plane / g.c_out, plane % g.c_out);
        let group = co / cog;
        o.iter_mut().for_each(|v| *v = b[co]);
        for cl in 0..cig {
            let ci = group * cig + cl;
            let xp = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            let wk = &w[(co * cig + cl) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        for (ox, dst) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                *dst = *dst + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let kk = g.kh * g.kw;

    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut dx, g.h * g.w, |plane, d| {
        let (n, ci) = (plane / g.c_in, plane % g.c_in);
        let (group, cl) = (ci / cig, ci % cig);
        for co in group * cog..(group + 1) * cog {
            let gp = &dy[(n * g.c_out + co) * oh * ow..][..oh * ow];
            let wk = &w[(co * cig + cl) * kk..][..kk];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                d[iy * g.w + ix] = d[iy * g.w + ix] + wv * gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![T::zero(); w.len()];
    par::for_each_chunk(&mut dw, kk, |filt, d| {
        let (co, cl) = (filt / cig, filt % cig);
        let ci = (co / cog) * cig + cl;
        for n in 0..g.n {
            let gp = &dy[(n * g.c_out + co) * oh * ow..][..oh * ow];
            let xp = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc = acc + gp[oy * ow + ox] * xp[iy * g.w + ix];
                            }
                        }
                    }
                    d[ky * g.kw + kx] = d[ky * g.kw + kx] + acc;
                }
            }
        }
    });

    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let gp = &dy[(n * g.c_out + co) * oh * ow..][..oh * ow];
            *d = *d + gp.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Mean over one axis of a tensor viewed as `[outer, axis, inner]`.
pub fn mean_axis<T: Scalar>(x: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let inv = sc::<T>(1.0 / axis as f64);
    let mut out = vec![T::zero(); outer * inner];
    par::for_each_chunk(&mut out, inner, |o, dst| {
        for a in 0..axis {
            let src = &x[(o * axis + a) * inner..][..inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d * inv);
    });
    out
}

pub fn mean_axis_backward<T: Scalar>(dy: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let inv = sc::<T>(1.0 / axis as f64);
    let mut dx = vec![T::zero(); outer * axis * inner];
    par::for_each_chunk(&mut dx, inner, |row, dst| {
        let o = row / axis;
        for (d, &g) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
            *d = g * inv;
        }
    });
    dx
}

/// Mean cross-entropy over rows with log-sum-exp stabilization.
/// Returns `(loss, softmax probabilities)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, classes);
    let mut loss = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - row[label].as_f64();
    }
    (T::from_f64_lossy(loss / labels.len() as f64), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_plan() {
        let p = MatmulPlan::new(&[2, 3, 4, 5], &[5, 6]).unwrap();
        assert_eq!(p.out_shape, vec![2, 3, 4, 6]);
        assert_eq!(p.b_batch, vec![0; 6]);
        let p = MatmulPlan::new(&[2, 1, 4, 5], &[1, 3, 5, 6]).unwrap();
        assert_eq!(p.out_shape, vec![2, 3, 4, 6]);
        assert_eq!(p.a_batch, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(p.b_batch, vec![0, 1, 2, 0, 1, 2]);
        assert!(MatmulPlan::new(&[2, 4, 5], &[3, 5, 6]).is_err());
        assert!(MatmulPlan::new(&[4, 5], &[4, 6]).is_err());
    }

    #[test]
    fn conv_output_size_rule() {
        let g = ConvGeom::new(&[1, 3, 224, 224], &[96, 3, 7, 7], 4, 3, 1).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (56, 56));
        let g = ConvGeom::new(&[1, 96, 56, 56], &[192, 96, 2, 2], 2, 0, 1).unwrap();
        assert_eq!(g.out_h(), 28);
        assert!(ConvGeom::new(&[1, 4, 1, 1], &[4, 4, 2, 2], 2, 0, 1).is_err());
        assert!(ConvGeom::new(&[1, 4, 5, 5], &[4, 2, 3, 3], 1, 1, 4).is_err());
    }

    #[test]
    fn layer_norm_zero_variance_row() {
        let (out, _) = layer_norm(&[5.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
