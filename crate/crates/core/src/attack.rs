//! l-inf gradient attacks: FGSM, PGD with best-of-trajectory selection,
//! and the warm-started epsilon sweep behind the robustness curves.
//!
//! The attack objective is untargeted cross-entropy on the true label,
//! summed over the batch so per-image gradients are independent of batch
//! composition; best-of-trajectory then makes the reported robust accuracy
//! conservative. Per-image PRNG streams derive from `(seed, image index)`,
//! so chunked or parallel runs reproduce the single-worker output.

use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelGraph};
use crate::rng::PrngState;
use crate::tensor::{Element, Reduction, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-inf radius on the [0, 1] pixel scale.
    pub epsilon: f64,
    /// PGD iteration count.
    pub steps: usize,
    /// Step size; `None` means the 2.5 * eps / steps default.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub bounds: (f64, f64),
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            steps: 40,
            step_size: None,
            random_start: true,
            bounds: (0.0, 1.0),
            seed: 0,
        }
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::invalid("attack", "epsilon must be non-negative"));
        }
        if self.epsilon > 1.0 {
            return Err(Error::invalid("attack", "epsilon above the pixel scale"));
        }
        if self.bounds.0 >= self.bounds.1 {
            return Err(Error::invalid("attack", "bounds must be ordered"));
        }
        if self.epsilon > 0.0 && self.steps > 0 && self.effective_step_size() <= 0.0 {
            return Err(Error::invalid("attack", "step size must be positive"));
        }
        Ok(())
    }
}

/// Adversarial batch with per-image outcomes.
#[derive(Debug, Clone)]
pub struct AttackResult<E: Element> {
    pub adversarial: Tensor<E>,
    /// Misclassified under eval-mode predict.
    pub success: Vec<bool>,
    /// Cross-entropy achieved at the returned point.
    pub loss: Vec<f64>,
    /// l-inf distance from the clean image.
    pub linf: Vec<f64>,
    pub epsilon: f64,
}

/// Strictly increasing perturbation radii; a leading 0 denotes clean
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule(Vec<f64>);

impl EpsilonSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput { op: "schedule" });
        }
        for pair in values.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::invalid(
                    "schedule",
                    format!(
                        "radii must be strictly increasing ({} then {})",
                        pair[0], pair[1]
                    ),
                ));
            }
        }
        if values[0] < 0.0 {
            return Err(Error::invalid("schedule", "radii must be non-negative"));
        }
        Ok(EpsilonSchedule(values))
    }

    pub fn default_schedule() -> Self {
        EpsilonSchedule(vec![
            0.0, 0.00125, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32,
        ])
    }

    /// `"default"` or a comma-separated radius list.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "default" {
            return Ok(Self::default_schedule());
        }
        let values = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("schedule", format!("bad radius {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Loss/prediction/gradient bundle an attack step needs.
#[derive(Debug, Clone)]
pub struct Evaluation<E: Element> {
    /// Per-image cross-entropy at the probe point.
    pub loss: Vec<f64>,
    /// Eval-mode predicted class per image.
    pub predictions: Vec<usize>,
    /// d(sum of losses)/d(input), when requested.
    pub input_grad: Option<Tensor<E>>,
}

/// Anything attackable: produces per-image losses, predictions, and the
/// input gradient of the summed loss.
pub trait AttackTarget<E: Element>: Sync {
    fn evaluate(&self, x: &Tensor<E>, y: &[usize], want_grad: bool) -> Result<Evaluation<E>>;
}

impl<E: Element> AttackTarget<E> for ModelGraph<E> {
    fn evaluate(&self, x: &Tensor<E>, y: &[usize], want_grad: bool) -> Result<Evaluation<E>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let mut input = x.clone();
        input.set_requires_grad(want_grad);
        let input_id = tape.leaf(input);
        let mut rng = PrngState::new(0);
        let trace = self.forward_traced(&mut tape, &binding, input_id, false, &mut rng)?;
        let logits = tape.value(trace.logits);
        let losses = crate::tensor::per_example_cross_entropy(logits, y)?;
        let predictions = argmax_rows(logits);
        let input_grad = if want_grad {
            let (loss, _) = tape.softmax_cross_entropy(trace.logits, y, None, Reduction::Sum)?;
            tape.backward(loss)?;
            let g = tape.grad(input_id).expect("input gradient requested");
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { op: "attack" });
            }
            Some(Tensor::from_vec(x.shape(), g.to_vec())?)
        } else {
            None
        };
        Ok(Evaluation {
            loss: losses.iter().map(|l| l.to_f64()).collect(),
            predictions,
            input_grad,
        })
    }
}

/// Elementwise clamp to the eps-ball around `origin`, then to `bounds`.
/// Idempotent.
pub fn project_linf<E: Element>(
    candidate: &Tensor<E>,
    origin: &Tensor<E>,
    epsilon: f64,
    bounds: (f64, f64),
) -> Result<Tensor<E>> {
    if candidate.shape() != origin.shape() {
        return Err(Error::ShapeMismatch {
            op: "project_linf",
            axis: "elements",
            expected: origin.len(),
            got: candidate.len(),
        });
    }
    let eps = E::from_f64(epsilon);
    let lo = E::from_f64(bounds.0);
    let hi = E::from_f64(bounds.1);
    let data = candidate
        .data()
        .iter()
        .zip(origin.data())
        .map(|(&v, &o)| v.maximum(o - eps).minimum(o + eps).maximum(lo).minimum(hi))
        .collect();
    Tensor::from_vec(candidate.shape(), data)
}

fn sign<E: Element>(v: E) -> E {
    if v > E::ZERO {
        E::ONE
    } else if v < E::ZERO {
        -E::ONE
    } else {
        E::ZERO
    }
}

enum InitMode<'a, E: Element> {
    Origin,
    Random,
    Warm(&'a Tensor<E>),
}

struct Best<E: Element> {
    data: Tensor<E>,
    loss: Vec<f64>,
    pred: Vec<usize>,
    seen: bool,
}

impl<E: Element> Best<E> {
    fn update(&mut self, candidate: &Tensor<E>, losses: &[f64], preds: &[usize]) {
        let stride: usize = candidate.shape()[1..].iter().product();
        for i in 0..losses.len() {
            if !self.seen || losses[i] > self.loss[i] {
                self.loss[i] = losses[i];
                self.pred[i] = preds[i];
                self.data.data_mut()[i * stride..(i + 1) * stride]
                    .copy_from_slice(&candidate.data()[i * stride..(i + 1) * stride]);
            }
        }
        self.seen = true;
    }
}

fn pgd_engine<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
    init: InitMode<'_, E>,
    index_offset: u64,
) -> Result<AttackResult<E>> {
    cfg.validate()?;
    let (n, _, _, _) = x.dims4("attack")?;
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "attack",
            axis: "labels",
            expected: n,
            got: y.len(),
        });
    }

    let mut cur = match init {
        InitMode::Origin => x.clone(),
        InitMode::Warm(start) => project_linf(start, x, cfg.epsilon, cfg.bounds)?,
        InitMode::Random => {
            let mut noisy = x.clone();
            let stride: usize = x.shape()[1..].iter().product();
            for i in 0..n {
                let mut rng = PrngState::substream(cfg.seed, index_offset + i as u64);
                for v in &mut noisy.data_mut()[i * stride..(i + 1) * stride] {
                    *v += E::from_f64(rng.uniform(-cfg.epsilon, cfg.epsilon));
                }
            }
            project_linf(&noisy, x, cfg.epsilon, cfg.bounds)?
        }
    };

    let alpha = E::from_f64(cfg.effective_step_size());
    let mut best = Best {
        data: cur.clone(),
        loss: vec![f64::NEG_INFINITY; n],
        pred: vec![0; n],
        seen: false,
    };

    // the trajectory is the T post-step iterates; the start point is only
    // a launch pad (T = 1 without random start is then exactly FGSM)
    for t in 0..cfg.steps {
        let eval = model.evaluate(&cur, y, true)?;
        if t > 0 {
            best.update(&cur, &eval.loss, &eval.predictions);
        }
        let g = eval.input_grad.expect("gradient requested");
        for (v, &gv) in cur.data_mut().iter_mut().zip(g.data()) {
            *v += alpha * sign(gv);
        }
        cur = project_linf(&cur, x, cfg.epsilon, cfg.bounds)?;
    }
    let eval = model.evaluate(&cur, y, false)?;
    best.update(&cur, &eval.loss, &eval.predictions);

    let stride: usize = x.shape()[1..].iter().product();
    let linf: Vec<f64> = (0..n)
        .map(|i| {
            best.data.data()[i * stride..(i + 1) * stride]
                .iter()
                .zip(&x.data()[i * stride..(i + 1) * stride])
                .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
                .fold(0.0f64, f64::max)
        })
        .collect();
    let success = best.pred.iter().zip(y).map(|(&p, &t)| p != t).collect();
    Ok(AttackResult {
        adversarial: best.data,
        success,
        loss: best.loss,
        linf,
        epsilon: cfg.epsilon,
    })
}

/// Single sign-gradient step: `clamp(x + eps * sign(grad), bounds)`.
pub fn fgsm<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    epsilon: f64,
) -> Result<AttackResult<E>> {
    let cfg = AttackConfig {
        epsilon,
        steps: 1,
        step_size: Some(epsilon),
        random_start: false,
        ..AttackConfig::new(epsilon)
    };
    pgd_engine(model, x, y, &cfg, InitMode::Origin, 0)
}

/// Projected gradient descent, returning the highest-loss trajectory point
/// per image.
pub fn pgd_linf<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult<E>> {
    pgd_linf_offset(model, x, y, cfg, 0)
}

/// `pgd_linf` with a dataset-global index offset for the per-image PRNG
/// streams, so chunked runs match whole-set runs bitwise.
pub fn pgd_linf_offset<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    cfg: &AttackConfig,
    index_offset: u64,
) -> Result<AttackResult<E>> {
    let init = if cfg.random_start {
        InitMode::Random
    } else {
        InitMode::Origin
    };
    pgd_engine(model, x, y, cfg, init, index_offset)
}

/// Clean evaluation dressed as an epsilon = 0 attack result.
pub fn clean_result<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
) -> Result<AttackResult<E>> {
    let eval = model.evaluate(x, y, false)?;
    Ok(AttackResult {
        adversarial: x.clone(),
        success: eval
            .predictions
            .iter()
            .zip(y)
            .map(|(&p, &t)| p != t)
            .collect(),
        loss: eval.loss,
        linf: vec![0.0; y.len()],
        epsilon: 0.0,
    })
}

/// Keeps, per image, the strongest of the previous point and the fresh and
/// warm PGD outcomes. Success outranks loss so an established witness is
/// never traded away; among equally successful candidates the higher loss
/// wins, earlier candidates on ties.
fn merge_results<E: Element>(
    x: &Tensor<E>,
    epsilon: f64,
    candidates: &[&AttackResult<E>],
) -> AttackResult<E> {
    let n = candidates[0].success.len();
    let stride: usize = x.shape()[1..].iter().product();
    let mut out = candidates[0].clone();
    out.epsilon = epsilon;
    for i in 0..n {
        let mut winner = 0usize;
        for (c, cand) in candidates.iter().enumerate().skip(1) {
            let better = (cand.success[i], cand.loss[i])
                > (candidates[winner].success[i], candidates[winner].loss[i]);
            if better {
                winner = c;
            }
        }
        if winner != 0 {
            let cand = candidates[winner];
            out.success[i] = cand.success[i];
            out.loss[i] = cand.loss[i];
            out.linf[i] = cand.linf[i];
            out.adversarial.data_mut()[i * stride..(i + 1) * stride]
                .copy_from_slice(&cand.adversarial.data()[i * stride..(i + 1) * stride]);
        }
    }
    out
}

/// Attacks the batch at every radius of the schedule. Radii beyond the
/// first run PGD twice per image — a fresh start and a warm start from the
/// previous radius' adversarial point — so per-image success is monotone
/// non-decreasing and the accuracy curve monotone non-increasing.
pub fn attack_sweep<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    schedule: &EpsilonSchedule,
    base: &AttackConfig,
) -> Result<Vec<AttackResult<E>>> {
    attack_sweep_offset(model, x, y, schedule, base, 0)
}

pub fn attack_sweep_offset<E: Element>(
    model: &dyn AttackTarget<E>,
    x: &Tensor<E>,
    y: &[usize],
    schedule: &EpsilonSchedule,
    base: &AttackConfig,
    index_offset: u64,
) -> Result<Vec<AttackResult<E>>> {
    let mut out: Vec<AttackResult<E>> = Vec::with_capacity(schedule.values().len());
    for (k, &eps) in schedule.values().iter().enumerate() {
        let result = if eps == 0.0 {
            clean_result(model, x, y)?
        } else {
            let cfg = AttackConfig {
                epsilon: eps,
                // one independent stream family per radius
                seed: PrngState::substream(base.seed, k as u64).next_u64(),
                ..base.clone()
            };
            let fresh = pgd_linf_offset(model, x, y, &cfg, index_offset)?;
            match out.last() {
                Some(prev) => {
                    let warm = pgd_engine(
                        model,
                        x,
                        y,
                        &cfg,
                        InitMode::Warm(&prev.adversarial),
                        index_offset,
                    )?;
                    merge_results(x, eps, &[prev, &warm, &fresh])
                }
                None => fresh,
            }
        };
        out.push(result);
    }
    Ok(out)
}
