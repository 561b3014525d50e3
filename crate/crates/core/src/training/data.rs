//! Procedural four-class image dataset.
//!
//! Every class is a fixed pattern; samples vary by a random contrast and
//! additive Gaussian noise, clamped to `[0, 1]`:
//!
//! | label | pattern |
//! |-------|---------|
//! | 0 | horizontal stripes (constant rows, bands of `stripe_width`) |
//! | 1 | vertical stripes |
//! | 2 | checkerboard with `stripe_width` squares |
//! | 3 | centered Gaussian blob |

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const NUM_TOY_CLASSES: usize = 4;
pub const TOY_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub side: usize,
    pub stripe_width: usize,
    /// Std of the additive noise.
    pub noise: f64,
    /// Per-sample contrast is drawn uniformly from `[min_contrast, 1]`.
    pub min_contrast: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            side: 32,
            stripe_width: 2,
            noise: 0.15,
            min_contrast: 0.5,
            train_per_class: 64,
            test_per_class: 32,
            seed: 0,
        }
    }
}

/// Images `[N, 3, side, side]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the samples at `indices` into a new split.
    pub fn gather(&self, indices: &[usize]) -> Split<T> {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        Split {
            images: Tensor::from_parts(out_shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset<T: Scalar> {
    pub spec: ToySpec,
    pub train: Split<T>,
    pub test: Split<T>,
}

/// The noiseless pattern of `class`, in `[0, 1]`.
pub fn class_pattern(class: usize, side: usize, stripe_width: usize) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let sigma = side as f64 / 6.0;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            let v = match class {
                0 => ((r / stripe_width) % 2) as f64,
                1 => ((col / stripe_width) % 2) as f64,
                2 => ((r / stripe_width + col / stripe_width) % 2) as f64,
                _ => {
                    let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                }
            };
            out.push(v);
        }
    }
    out
}

fn render<T: Scalar>(spec: &ToySpec, labels: &[usize], rng: &mut Rng) -> Tensor<T> {
    let plane = spec.side * spec.side;
    let patterns: Vec<Vec<f64>> = (0..NUM_TOY_CLASSES)
        .map(|k| class_pattern(k, spec.side, spec.stripe_width))
        .collect();
    let mut data = Vec::with_capacity(labels.len() * TOY_CHANNELS * plane);
    for &label in labels {
        let contrast = spec.min_contrast + (1.0 - spec.min_contrast) * rng.uniform();
        for _ in 0..TOY_CHANNELS {
            for &p in &patterns[label] {
                let noise = if spec.noise > 0.0 {
                    spec.noise * rng.normal()
                } else {
                    0.0
                };
                let v = 0.5 + contrast * (p - 0.5) + noise;
                data.push(T::from_f64_lossy(v.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::from_parts(vec![labels.len(), TOY_CHANNELS, spec.side, spec.side], data)
}

fn balanced_labels(per_class: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..NUM_TOY_CLASSES)
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .collect();
    rng.shuffle(&mut labels);
    labels
}

pub fn generate_toy_dataset<T: Scalar>(spec: &ToySpec) -> Result<ToyDataset<T>> {
    if spec.side < 2 || spec.stripe_width == 0 || spec.stripe_width >= spec.side {
        return Err(config_err!(
            "toy images need side >= 2 and 0 < stripe_width < side"
        ));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(config_err!("toy splits need at least one sample per class"));
    }
    if !(spec.noise >= 0.0) || !(0.0..=1.0).contains(&spec.min_contrast) {
        return Err(config_err!(
            "noise must be >= 0 and min_contrast within [0, 1]"
        ));
    }
    let mut root = Rng::new(spec.seed);
    let mut train_rng = root.fork();
    let mut test_rng = root.fork();
    let train_labels = balanced_labels(spec.train_per_class, &mut train_rng);
    let test_labels = balanced_labels(spec.test_per_class, &mut test_rng);
    Ok(ToyDataset {
        spec: spec.clone(),
        train: Split {
            images: render(spec, &train_labels, &mut train_rng),
            labels: train_labels,
        },
        test: Split {
            images: render(spec, &test_labels, &mut test_rng),
            labels: test_labels,
        },
    })
}
