//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DavitError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay rank-1 tensors (biases and norm affines).
    pub decay_vectors: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            decay_vectors: false,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamWState {
    pub fn new<T: Scalar>(params: &[Tensor<T>], config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One update at learning rate `lr`. Shapes and finiteness are checked
    /// before anything is modified, so a rejected step leaves params and
    /// moments untouched.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(shape_err!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i].as_slice() || g.shape() != p.shape() {
                return Err(shape_err!(
                    "tensor {i}: state {:?}, param {:?}, grad {:?}",
                    self.shapes[i],
                    p.shape(),
                    g.shape()
                ));
            }
            if !g.is_finite() {
                return Err(DavitError::Numeric(format!(
                    "non-finite gradient in tensor {i}"
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_vectors,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() > 1 || decay_vectors {
                weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * m_hat / (v_hat.sqrt() + eps);
                *w = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all tensors, accumulated in order in 64-bit.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(DavitError::Contract(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::from_f64_lossy(v.as_f64() * scale);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len(), 1], v).unwrap()
    }

    #[test]
    fn zero_grads_no_decay_leave_params() {
        let mut p = vec![t(&[1.0, -2.0])];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamWState::new(&p, cfg);
        s.step(&mut p, &[t(&[0.0, 0.0])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut p = vec![t(&[1.0, 1.0, 1.0])];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamWState::new(&p, cfg);
        s.step(&mut p, &[t(&[3.0, -0.5, 1e-3])], 0.01).unwrap();
        for (w, sign) in p[0].data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((w - (1.0 - 0.01 * sign)).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        let mut p = vec![t(&[2.0]), Tensor::from_f64(&[1], &[2.0]).unwrap()];
        let mut s = AdamWState::new(&p, AdamWConfig::default());
        let g = vec![t(&[0.0]), Tensor::from_f64(&[1], &[0.0]).unwrap()];
        s.step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);
        assert_eq!(p[1].data()[0], 2.0);
    }

    #[test]
    fn quadratic_converges() {
        let mut rng = Rng::new(4);
        let mut p = vec![rng.normal_tensor::<f64>(&[8, 4], 1.0)];
        let start = global_norm(&p);
        let mut s = AdamWState::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..100 {
            let g: Vec<Tensor<f64>> = p.iter().map(|w| w.map_f64(|v| 2.0 * v)).collect();
            s.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(
            global_norm(&p) < 0.1 * start,
            "{} vs {start}",
            global_norm(&p)
        );
        assert_eq!(s.step_count(), 100);
    }

    #[test]
    fn nan_grad_aborts_without_touching_state() {
        let mut p = vec![t(&[1.0])];
        let mut s = AdamWState::new(&p, AdamWConfig::default());
        let before = s.clone();
        assert!(matches!(
            s.step(&mut p, &[t(&[f64::NAN])], 0.1),
            Err(DavitError::Numeric(_))
        ));
        assert_eq!(s, before);
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![t(&[1.2, 1.6])];
        assert_eq!(clip_grad_global_norm(&mut g, 1.0).unwrap(), 2.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut g = vec![t(&[0.3, 0.4])];
        clip_grad_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        assert!(clip_grad_global_norm(&mut g, 0.0).is_err());
    }
}
