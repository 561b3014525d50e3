//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and the data its
//! backward rule needs. [`Tape::backward`] walks the nodes in exact reverse
//! recording order and accumulates gradients in that fixed order, so the
//! result is deterministic. A tape can be differentiated once; record a fresh
//! tape for the next step.

use crate::error::{shape_err, DavitError, Result};
use crate::kernels::{self, ConvGeom, MatmulPlan};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    ScaleLeading {
        x: Var,
        factors: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<[T; 2]>,
    },
    Gelu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    differentiated: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last differentiated output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        let value = Tensor::from_parts(shape, data);
        value.ensure_finite(name)?;
        let needs = self.needs(inputs);
        Ok(self.push(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let data = kernels::matmul(&plan, self.value(a).data(), self.value(b).data());
        let shape = plan.out_shape.clone();
        self.record("matmul", shape, data, Op::MatMul { a, b, plan }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.record("add", shape, data, Op::Add { a, b }, &[a, b])
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(shape_err!(
                "add_bias: bias {:?} vs last axis {c}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        self.record("add_bias", shape, data, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mul: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.record("mul", shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record("scale", shape, data, Op::Scale { x, factor }, &[x])
    }

    /// Multiplies each slice along the first axis by its own factor.
    pub fn scale_leading(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let lead = self.shape(x)[0];
        if factors.len() != lead {
            return Err(shape_err!(
                "scale_leading: {} factors for leading dim {lead}",
                factors.len()
            ));
        }
        let inner = self.value(x).len() / lead;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / inner])
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(
            "scale_leading",
            shape,
            data,
            Op::ScaleLeading { x, factors },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(DavitError::Numeric("softmax input contains NaN".into()));
        }
        let cols = *xv.shape().last().unwrap();
        let data = kernels::softmax_rows(xv.data(), cols);
        let shape = xv.shape().to_vec();
        self.record("softmax", shape, data, Op::Softmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "layer_norm: affine params {:?}/{:?} vs channels {c}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(DavitError::Contract(
                "layer_norm eps must be positive".into(),
            ));
        }
        let (data, stats) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        self.record(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = kernels::gelu(self.value(x).data());
        let shape = self.shape(x).to_vec();
        self.record("gelu", shape, data, Op::Gelu { x }, &[x])
    }

    /// Direct convolution with zero padding; `groups == C_in` gives depthwise mode.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if self.shape(b) != [geom.c_out] {
            return Err(shape_err!(
                "conv2d bias {:?} vs {} output channels",
                self.shape(b),
                geom.c_out
            ));
        }
        let data = kernels::conv2d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        self.record(
            "conv2d",
            geom.out_shape(),
            data,
            Op::Conv2d { x, w, b, geom },
            &[x, w, b],
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!(
                "mean_axis: axis {axis} out of range for {shape:?}"
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let data = kernels::mean_axis(self.value(x).data(), outer, shape[axis], inner);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.record(
            "mean_axis",
            out_shape,
            data,
            Op::MeanAxis {
                x,
                outer,
                axis: shape[axis],
                inner,
            },
            &[x],
        )
    }

    /// `[N, P, C] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(shape_err!(
                "global_avg_pool expects [N, P, C], got {:?}",
                self.shape(x)
            ));
        }
        self.mean_axis(x, 1)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.record("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
            return Err(shape_err!(
                "cross_entropy: label {bad} out of range for {} classes",
                shape[1]
            ));
        }
        let (loss, probs) = kernels::cross_entropy(self.value(logits).data(), shape[1], labels);
        self.record(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.differentiated {
            return Err(DavitError::Contract(
                "backward already ran on this tape; record a new one".into(),
            ));
        }
        if self.value(output).len() != 1 {
            return Err(DavitError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // only report gradients for nodes that participate in differentiation
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, d: Vec<T>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                if self.nodes[a.0].needs_grad {
                    send(*a, kernels::matmul_grad_a(plan, g, self.value(*b).data()));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, kernels::matmul_grad_b(plan, self.value(*a).data(), g));
                }
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddBias { x, bias } => {
                send(*x, g.to_vec());
                let c = self.value(*bias).len();
                let mut db = vec![T::zero(); c];
                for (i, &v) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + v;
                }
                send(*bias, db);
            }
            Op::Mul { a, b } => {
                send(*a, zip_map(g, self.value(*b).data(), |x, y| x * y));
                send(*b, zip_map(g, self.value(*a).data(), |x, y| x * y));
            }
            Op::Scale { x, factor } => send(*x, g.iter().map(|&v| v * *factor).collect()),
            Op::ScaleLeading { x, factors } => {
                let inner = g.len() / factors.len();
                send(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &v)| v * factors[i / inner])
                        .collect(),
                );
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(*x, kernels::permute(g, node.value.shape(), &inverse));
            }
            Op::Softmax { x } => {
                let cols = *node.value.shape().last().unwrap();
                send(
                    *x,
                    kernels::softmax_rows_backward(node.value.data(), g, cols),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    g,
                );
                send(*x, dx);
                send(*gamma, dg);
                send(*beta, db);
            }
            Op::Gelu { x } => send(*x, kernels::gelu_backward(self.value(*x).data(), g)),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g);
                send(*x, dx);
                send(*w, dw);
                send(*b, db);
            }
            Op::MeanAxis {
                x,
                outer,
                axis,
                inner,
            } => {
                send(*x, kernels::mean_axis_backward(g, *outer, *axis, *inner));
            }
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_f64_lossy(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - scale;
                }
                send(*logits, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, d: Vec<T>) {
    match slot {
        None => *slot = Some(d),
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b),
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Worst relative error between `analytic` and central differences of `eval`
/// at the coordinates `coords` of `x`, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn compare_with_central_differences(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = x[i] + h;
        let plus = eval(&probe)?;
        probe[i] = x[i] - h;
        let minus = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar-valued `f` at `x` against central
/// differences with step `h` over every coordinate; returns the worst
/// relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(DavitError::Contract(format!(
            "grad_check needs a scalar function, got output shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let coords: Vec<usize> = (0..x.len()).collect();
    compare_with_central_differences(x.data(), &analytic, &coords, h, |probe| {
        let mut t = Tape::new();
        let pv = t.leaf(
            Tensor::from_parts(x.shape().to_vec(), probe.to_vec()),
            false,
        );
        let out = f(&mut t, pv)?;
        Ok(t.value(out).data()[0])
    })
}
