//! Optimizer, schedule, toy data and the training loop.

mod data;
mod optim;
mod schedule;

pub use data::{
    class_pattern, generate_toy_dataset, Split, ToyDataset, ToySpec, NUM_TOY_CLASSES, TOY_CHANNELS,
};
pub use optim::{clip_grad_global_norm, global_norm, AdamWConfig, AdamWState};
pub use schedule::TriangularSchedule;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, DavitError, Result};
use crate::model::{Mode, Model};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub peak_fraction: f64,
    pub floor_lr: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    /// Seeds shuffling and stochastic depth.
    pub seed: u64,
    /// Stop after the first epoch whose held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_lr: 2e-3,
            peak_fraction: 0.5,
            floor_lr: 0.0,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            target_accuracy: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err!("epochs and batch sizes must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err!("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the training batch.
    pub accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs().last().map(|e| e.test_accuracy)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `[N, K]` logits.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.to_f64_vec().chunks(k).map(argmax).collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Loss, batch accuracy and per-parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &Split<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let trace = model.forward_on_tape(&mut tape, &vars, x, mode, rng)?;
    let loss = tape.cross_entropy(trace.logits, &batch.labels)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(DavitError::Numeric("loss is not finite".into()));
    }
    let acc = accuracy(&predictions(tape.value(trace.logits)), &batch.labels);
    let param_vars: Vec<Var> = vars.vars().to_vec();
    tape.backward(loss)?;
    let grads = param_vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss_value, acc, grads))
}

/// Mean loss and accuracy over a split, in eval mode.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    split: &Split<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = split.gather(chunk);
        let logits = model.forward(&batch.images, Mode::Eval, &mut Rng::new(0))?;
        let (l, _) = crate::kernels::cross_entropy(logits.data(), logits.shape()[1], &batch.labels);
        loss += l.as_f64() * chunk.len() as f64;
        correct += predictions(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((
        loss / split.len() as f64,
        correct as f64 / split.len() as f64,
    ))
}

fn diverged(step: usize, e: DavitError) -> DavitError {
    match e {
        DavitError::Numeric(msg) => {
            DavitError::Numeric(format!("training diverged at step {step}: {msg}"))
        }
        other => other,
    }
}

/// Mini-batch AdamW training with clipping, a triangular schedule and
/// stochastic depth. Fully determined by the model, the data and `cfg`.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    data: &ToyDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = TriangularSchedule {
        peak_lr: cfg.peak_lr,
        total_steps: cfg.epochs * steps_per_epoch,
        peak_fraction: cfg.peak_fraction,
        floor_lr: cfg.floor_lr,
    };
    schedule.validate()?;
    let mut root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork();
    let mut drop_rng = root.fork();
    let mut opt = AdamWState::new(model.params().tensors(), cfg.optimizer);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.gather(chunk);
            lr = schedule.lr(step)?;
            let (loss, acc, mut grads) = loss_and_grads(model, &batch, Mode::Train, &mut drop_rng)
                .map_err(|e| diverged(step, e))?;
            let grad_norm = clip_grad_global_norm(&mut grads, cfg.clip_norm)?;
            opt.step(model.params_mut().tensors_mut(), &grads, lr)
                .map_err(|e| diverged(step, e))?;
            loss_sum += loss * chunk.len() as f64;
            acc_sum += acc * chunk.len() as f64;
            log.records.push(LogRecord::Step(StepRecord {
                epoch,
                step,
                lr,
                loss,
                accuracy: acc,
                grad_norm,
            }));
            step += 1;
        }
        let (test_loss, test_accuracy) = evaluate(model, &data.test, cfg.eval_batch_size)?;
        log.records.push(LogRecord::Epoch(EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / n as f64,
            accuracy: acc_sum / n as f64,
            test_loss,
            test_accuracy,
        }));
        if cfg.target_accuracy.is_some_and(|t| test_accuracy >= t) {
            break;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverfitConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    /// Stop once the loss falls below this value.
    pub target_loss: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            lr: 1e-3,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            target_loss: 0.01,
        }
    }
}

/// Repeatedly fits one fixed batch at a constant learning rate, without
/// stochastic depth. Returns the loss before each step, plus the final loss.
pub fn overfit_batch<T: Scalar>(
    model: &mut Model<T>,
    batch: &Split<T>,
    cfg: &OverfitConfig,
) -> Result<Vec<f64>> {
    let mut opt = AdamWState::new(model.params().tensors(), cfg.optimizer);
    let mut losses = Vec::new();
    let mut rng = Rng::new(0);
    for step in 0..=cfg.max_steps {
        let (loss, _, mut grads) =
            loss_and_grads(model, batch, Mode::Eval, &mut rng).map_err(|e| diverged(step, e))?;
        losses.push(loss);
        if loss < cfg.target_loss || step == cfg.max_steps {
            break;
        }
        clip_grad_global_norm(&mut grads, cfg.clip_norm)?;
        opt.step(model.params_mut().tensors_mut(), &grads, cfg.lr)
            .map_err(|e| diverged(step, e))?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> ToyDataset<f32> {
        generate_toy_dataset(&ToySpec {
            train_per_class: 4,
            test_per_class: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut m = Model::<f32>::preset("micro", 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            peak_lr: 0.0,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let log = train_loop(&mut m, &tiny_data(), &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(log.steps().count(), 2);
        assert_eq!(log.epochs().count(), 1);
    }

    #[test]
    fn log_lines_are_json() {
        let mut m = Model::<f32>::preset("micro", 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        let log = train_loop(&mut m, &tiny_data(), &cfg).unwrap();
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["kind"], "step");
        for key in ["step", "lr", "loss", "accuracy"] {
            assert!(v.get(key).is_some());
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
