//! Class-weighted cross-entropy training with Adam and early stopping.
//!
//! The run is fully seeded: the train/validation split, per-epoch
//! shuffling, subsampling and dropout all draw from substreams of the
//! config seed, so identical configs give bitwise-identical weights.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelGraph};
use crate::report::unweighted_accuracy;
use crate::rng::PrngState;
use crate::tensor::{Element, Reduction, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Substream indices under the training seed.
const STREAM_SPLIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Validation share of the training pool (seeded 80/20 split).
const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam epsilon, added to sqrt(v_hat). Unusually large by design.
    pub adam_epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training split seen per epoch.
    pub epoch_subsample_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            adam_epsilon: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 300,
            patience: 40,
            min_delta: 0.001,
            batch_size: 32,
            seed: 0,
            epoch_subsample_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::invalid("train", "patience must be at least 1"));
        }
        if !(self.epoch_subsample_fraction > 0.0 && self.epoch_subsample_fraction <= 1.0) {
            return Err(Error::invalid(
                "train",
                "subsample fraction must lie in (0, 1]",
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid(
                "train",
                "batch size and epochs must be positive",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("train", "learning rate must be positive"));
        }
        Ok(())
    }
}

/// Inverse-frequency class weights, normalized so the mean weight is 1.
pub fn compute_class_weights<E: Element>(
    labels: &[usize],
    class_count: usize,
) -> Result<Tensor<E>> {
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(Error::LabelOutOfRange {
                label: l,
                class_count,
            });
        }
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / class_count as f64;
    Tensor::from_vec(
        &[class_count],
        inv.iter().map(|&v| E::from_f64(v / mean)).collect(),
    )
}

/// Per-parameter first/second moment buffers and the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new_for(params: &[&Tensor<E>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![E::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![E::ZERO; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[Vec<E>],
    state: &mut AdamState<E>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            axis: "parameters",
            expected: state.m.len(),
            got: params.len(),
        });
    }
    state.t += 1;
    let beta1 = E::from_f64(cfg.beta1);
    let beta2 = E::from_f64(cfg.beta2);
    let one = E::ONE;
    let lr = E::from_f64(cfg.learning_rate);
    let eps = E::from_f64(cfg.adam_epsilon);
    let bc1 = one - E::from_f64(cfg.beta1).powi(state.t as i32);
    let bc2 = one - E::from_f64(cfg.beta2).powi(state.t as i32);

    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                axis: "elements",
                expected: param.len(),
                got: grad.len(),
            });
        }
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (one - beta1) * g;
            v[i] = beta2 * v[i] + (one - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// Metric improved by more than min_delta; counter reset.
    Improved,
    Continue,
    Stop,
}

/// Patience/min-delta early stopping. Improvement means strictly more
/// than `best + min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    min_delta: f64,
    best: f64,
    since: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStop {
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            since: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since
    }

    pub fn update(&mut self, metric: f64) -> Result<StopDecision> {
        if !metric.is_finite() {
            return Err(Error::NonFiniteMetric);
        }
        if metric > self.best + self.min_delta {
            self.best = metric;
            self.since = 0;
            return Ok(StopDecision::Improved);
        }
        self.since += 1;
        if self.since >= self.patience {
            Ok(StopDecision::Stop)
        } else {
            Ok(StopDecision::Continue)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// `epoch,train_loss,train_acc,val_acc` rows.
pub fn history_csv_string(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_acc\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            h.epoch, h.train_loss, h.train_acc, h.val_acc
        ));
    }
    out
}

pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, history_csv_string(history))
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

fn gather_batch<E: Element>(
    data: &Dataset<E>,
    indices: &[usize],
) -> Result<(Tensor<E>, Vec<usize>)> {
    let images = Tensor::stack(&indices.iter().map(|&i| data.image(i)).collect::<Vec<_>>())?;
    let labels = indices.iter().map(|&i| data.labels[i]).collect();
    Ok((images, labels))
}

/// Trains in place. Monitors validation unweighted accuracy, restores the
/// best snapshot on exit, and aborts on non-finite loss.
pub fn train<E: Element>(
    model: &mut ModelGraph<E>,
    data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput { op: "train" });
    }
    let class_count = model.config().class_count;

    // seeded 80/20 split of the training pool
    let mut indices: Vec<usize> = (0..n).collect();
    PrngState::substream(cfg.seed, STREAM_SPLIT).shuffle(&mut indices);
    let val_n = ((n as f64) * VALIDATION_FRACTION).floor() as usize;
    if val_n == 0 || val_n == n {
        return Err(Error::invalid(
            "train",
            format!("dataset of {n} images cannot be split 80/20"),
        ));
    }
    let (train_idx, val_idx) = indices.split_at(n - val_n);
    let mut train_idx = train_idx.to_vec();
    let (val_images, val_labels) = gather_batch(data, val_idx)?;

    let train_labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let class_weights: Tensor<E> = compute_class_weights(&train_labels, class_count)?;

    let mut shuffle_rng = PrngState::substream(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = PrngState::substream(cfg.seed, STREAM_DROPOUT);

    let mut adam =
        AdamState::new_for(&model.params().iter().map(|p| &p.tensor).collect::<Vec<_>>());
    let mut stopper = EarlyStop::new(cfg.patience, cfg.min_delta);
    let mut best_weights: Option<Vec<Tensor<E>>> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;

    let per_epoch = ((train_idx.len() as f64) * cfg.epoch_subsample_fraction).floor() as usize;
    let per_epoch = per_epoch.max(1);

    for epoch in 1..=cfg.max_epochs {
        shuffle_rng.shuffle(&mut train_idx);
        let epoch_idx = &train_idx[..per_epoch];

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (step, chunk) in epoch_idx.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = gather_batch(data, chunk)?;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true);
            let input = tape.leaf(images);
            let trace = model.forward_traced(&mut tape, &binding, input, true, &mut dropout_rng)?;
            let (loss, _) = tape.softmax_cross_entropy(
                trace.logits,
                &labels,
                Some(class_weights.data()),
                Reduction::Mean,
            )?;
            let loss_val = tape.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let preds = argmax_rows(tape.value(trace.logits));
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += loss_val * labels.len() as f64;

            tape.backward(loss)?;
            let grads: Vec<Vec<E>> = (0..model.params().len())
                .map(|i| {
                    model
                        .bound_grad(&tape, &binding, i)
                        .expect("parameter gradient")
                        .to_vec()
                })
                .collect();
            let mut params: Vec<&mut Tensor<E>> = model
                .params_mut()
                .iter_mut()
                .map(|p| &mut p.tensor)
                .collect();
            adam_step(&mut params, &grads, &mut adam, cfg)?;
        }

        let train_loss = loss_sum / per_epoch as f64;
        let train_acc = correct as f64 / per_epoch as f64;

        // validation accuracy, eval mode, batched
        let val_preds = model.predict_batched(&val_images, cfg.batch_size)?;
        let val_acc = unweighted_accuracy(&val_preds, &val_labels)?;

        history.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_acc,
        });

        match stopper.update(val_acc)? {
            StopDecision::Improved => {
                best_weights = Some(model.params().iter().map(|p| p.tensor.clone()).collect());
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(weights) = best_weights {
        for (param, tensor) in model.params_mut().iter_mut().zip(weights) {
            param.tensor = tensor;
        }
    }

    Ok(TrainReport {
        best_val_accuracy: stopper.best(),
        epochs_run: history.len(),
        stopped_early,
        history,
    })
}
