//! Attack contracts: closed-form linear-model oracles, FGSM/PGD
//! equivalences, ball/bounds invariants and warm-start monotonicity.

mod common;

use atwb_core::attack::{
    attack_sweep, fgsm, pgd_linf, project_linf, AttackConfig, AttackTarget, EpsilonSchedule,
    Evaluation,
};
use atwb_core::model::{build_model, HeadKind, ModelConfig};
use atwb_core::{PrngState, Result, Tensor};
use common::random_vec;
use proptest::prelude::*;

/// Binary linear classifier with logits `[0, w . x]`; everything about its
/// gradient is known in closed form.
struct LinearModel {
    w: Vec<f64>,
}

impl LinearModel {
    fn margin(&self, x: &[f32]) -> f64 {
        self.w
            .iter()
            .zip(x)
            .map(|(&w, &v)| w * v as f64)
            .sum::<f64>()
    }
}

impl AttackTarget<f32> for LinearModel {
    fn evaluate(&self, x: &Tensor<f32>, y: &[usize], want_grad: bool) -> Result<Evaluation<f32>> {
        let n = x.shape()[0];
        let stride = x.len() / n;
        let mut loss = Vec::with_capacity(n);
        let mut predictions = Vec::with_capacity(n);
        let mut grad = vec![0.0f32; x.len()];
        for i in 0..n {
            let xi = &x.data()[i * stride..(i + 1) * stride];
            let m = self.margin(xi);
            // stable ln(1 + e^m) and sigmoid
            let softplus = if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            let p1 = 1.0 / (1.0 + (-m).exp());
            loss.push(if y[i] == 0 { softplus } else { softplus - m });
            predictions.push(usize::from(m > 0.0));
            if want_grad {
                let coeff = p1 - if y[i] == 1 { 1.0 } else { 0.0 };
                for (g, &w) in grad[i * stride..(i + 1) * stride].iter_mut().zip(&self.w) {
                    *g = (coeff * w) as f32;
                }
            }
        }
        Ok(Evaluation {
            loss,
            predictions,
            input_grad: want_grad.then(|| Tensor::from_vec(x.shape(), grad).unwrap()),
        })
    }
}

fn micro_model(head: HeadKind, seed: u64) -> atwb_core::model::ModelGraph<f32> {
    let cfg = ModelConfig {
        input_shape: (1, 16, 16),
        class_count: 2,
        head_kind: head,
        stage_channels: [4, 6, 8],
        blocks_per_stage: 1,
        attention_heads: 4,
        dropout_p: 0.5,
    };
    build_model(&cfg, seed).unwrap()
}

fn interior_batch(n: usize, pixels: usize, seed: u64) -> Tensor<f32> {
    let mut rng = PrngState::new(seed);
    Tensor::from_fn(&[n, 1, pixels, 1], |_| rng.uniform(0.3, 0.7) as f32)
}

#[test]
fn fgsm_perturbation_is_eps_sign_w_on_linear_model() {
    let w = vec![0.8, -1.3, 0.0, 2.1];
    let model = LinearModel { w: w.clone() };
    let x = interior_batch(3, 4, 40);
    let eps = 0.05;
    let result = fgsm(&model, &x, &[0, 0, 0], eps).unwrap();
    for i in 0..3 {
        for (j, &wj) in w.iter().enumerate() {
            let idx = i * 4 + j;
            let delta = result.adversarial.data()[idx] - x.data()[idx];
            let expect = if wj > 0.0 {
                eps
            } else if wj < 0.0 {
                -eps
            } else {
                0.0
            };
            assert!(
                (delta as f64 - expect).abs() < 1e-7,
                "pixel {j}: {delta} vs {expect}"
            );
        }
    }
    // label 1 flips the direction
    let result = fgsm(&model, &x, &[1, 1, 1], eps).unwrap();
    for (j, &wj) in w.iter().enumerate() {
        let delta = result.adversarial.data()[j] - x.data()[j];
        let expect = if wj > 0.0 {
            -eps
        } else if wj < 0.0 {
            eps
        } else {
            0.0
        };
        assert!((delta as f64 - expect).abs() < 1e-7);
    }
}

#[test]
fn fgsm_linf_distance_is_eps_at_unsaturated_pixels() {
    let model = LinearModel {
        w: vec![1.0, -2.0, 0.5, 3.0],
    };
    let x = interior_batch(4, 4, 41);
    let eps = 0.03;
    let result = fgsm(&model, &x, &[0; 4], eps).unwrap();
    for &d in &result.linf {
        assert!((d - eps).abs() < 1e-7, "linf {d}");
    }
}

#[test]
fn fgsm_eps_zero_returns_clean_misclassification() {
    let model = micro_model(HeadKind::Baseline, 50);
    let mut rng = PrngState::new(51);
    let x = Tensor::from_fn(&[6, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels = [0, 1, 0, 1, 0, 1];
    let result = fgsm(&model, &x, &labels, 0.0).unwrap();
    assert_eq!(result.adversarial.data(), x.data());
    let clean_preds = model.predict(&x).unwrap();
    for i in 0..6 {
        assert_eq!(result.success[i], clean_preds[i] != labels[i]);
    }
}

#[test]
fn pgd_reaches_ball_corner_on_two_pixel_linear_model() {
    let w = vec![1.5, -0.7];
    let model = LinearModel { w: w.clone() };
    let x = interior_batch(1, 2, 42);
    let eps = 0.08;
    let cfg = AttackConfig {
        random_start: false,
        ..AttackConfig::new(eps)
    };
    let result = pgd_linf(&model, &x, &[0], &cfg).unwrap();
    let margin_at_corner = model.margin(x.data()) + eps * w.iter().map(|v| v.abs()).sum::<f64>();
    let closed_form_max = margin_at_corner + (-margin_at_corner).exp().ln_1p();
    assert!(
        (result.loss[0] - closed_form_max).abs() < 1e-6,
        "{} vs {}",
        result.loss[0],
        closed_form_max
    );
    // and the point itself sits at the vertex eps * sign(w)
    for (j, &wj) in w.iter().enumerate() {
        let delta = (result.adversarial.data()[j] - x.data()[j]) as f64;
        assert!((delta - eps * wj.signum()).abs() < 1e-6);
    }
}

#[test]
fn single_step_pgd_without_random_start_is_fgsm_bitwise() {
    let model = micro_model(HeadKind::Attention, 52);
    let mut rng = PrngState::new(53);
    let x = Tensor::from_fn(&[5, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels = [0, 1, 1, 0, 1];
    let eps = 0.02;
    let cfg = AttackConfig {
        steps: 1,
        step_size: Some(eps),
        random_start: false,
        ..AttackConfig::new(eps)
    };
    let a = pgd_linf(&model, &x, &labels, &cfg).unwrap();
    let b = fgsm(&model, &x, &labels, eps).unwrap();
    assert_eq!(a.adversarial.data(), b.adversarial.data());
    assert_eq!(a.success, b.success);
    assert_eq!(a.loss, b.loss);
}

#[test]
fn pgd_eps_zero_is_identity_for_any_step_count() {
    let model = micro_model(HeadKind::Baseline, 54);
    let mut rng = PrngState::new(55);
    let x = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let cfg = AttackConfig {
        steps: 7,
        step_size: Some(0.01),
        ..AttackConfig::new(0.0)
    };
    let result = pgd_linf(&model, &x, &[0, 1, 0], &cfg).unwrap();
    assert_eq!(result.adversarial.data(), x.data());
}

#[test]
fn pgd_with_fgsm_point_in_trajectory_dominates_fgsm_loss() {
    let model = micro_model(HeadKind::Baseline, 56);
    let mut rng = PrngState::new(57);
    let x = Tensor::from_fn(&[8, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let eps = 0.05;
    let cfg = AttackConfig {
        steps: 5,
        step_size: Some(eps), // first step lands exactly on the FGSM point
        random_start: false,
        ..AttackConfig::new(eps)
    };
    let pgd = pgd_linf(&model, &x, &labels, &cfg).unwrap();
    let fg = fgsm(&model, &x, &labels, eps).unwrap();
    for i in 0..8 {
        assert!(
            pgd.loss[i] >= fg.loss[i] - 1e-9,
            "image {i}: pgd {} < fgsm {}",
            pgd.loss[i],
            fg.loss[i]
        );
    }
}

#[test]
fn sweep_success_is_monotone_and_ball_respected() {
    let model = micro_model(HeadKind::Attention, 58);
    let mut rng = PrngState::new(59);
    let n = 12;
    let x = Tensor::from_fn(&[n, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
    let schedule = EpsilonSchedule::default_schedule();
    let base = AttackConfig {
        steps: 4,
        ..AttackConfig::new(0.0)
    };
    let results = attack_sweep(&model, &x, &labels, &schedule, &base).unwrap();
    assert_eq!(results.len(), schedule.values().len());

    for (r, &eps) in results.iter().zip(schedule.values()) {
        assert_eq!(r.epsilon, eps);
        for (i, &d) in r.linf.iter().enumerate() {
            assert!(d <= eps + 1e-7, "eps {eps} image {i}: linf {d}");
        }
        assert!(r
            .adversarial
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    // per-image success never reverts as the radius grows
    for i in 0..n {
        let mut prev = false;
        for r in &results {
            assert!(
                r.success[i] || !prev,
                "image {i} lost its witness at eps {}",
                r.epsilon
            );
            prev = r.success[i];
        }
    }

    // accuracy sequence sorted descending equals itself
    let acc: Vec<f64> = results
        .iter()
        .map(|r| 1.0 - r.success.iter().filter(|&&s| s).count() as f64 / n as f64)
        .collect();
    let mut sorted = acc.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert_eq!(acc, sorted);
}

#[test]
fn sweep_of_zero_schedule_is_clean_accuracy_only() {
    let model = micro_model(HeadKind::Baseline, 60);
    let mut rng = PrngState::new(61);
    let x = Tensor::from_fn(&[4, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels = [0, 1, 0, 1];
    let schedule = EpsilonSchedule::new(vec![0.0]).unwrap();
    let results = attack_sweep(&model, &x, &labels, &schedule, &AttackConfig::new(0.0)).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].adversarial.data(), x.data());
    let preds = model.predict(&x).unwrap();
    for i in 0..4 {
        assert_eq!(results[0].success[i], preds[i] != labels[i]);
    }
}

#[test]
fn attack_result_success_flags_match_predict() {
    let model = micro_model(HeadKind::Baseline, 62);
    let mut rng = PrngState::new(63);
    let x = Tensor::from_fn(&[6, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels = [1, 0, 1, 0, 1, 0];
    let cfg = AttackConfig {
        steps: 3,
        ..AttackConfig::new(0.03)
    };
    let result = pgd_linf(&model, &x, &labels, &cfg).unwrap();
    let preds = model.predict(&result.adversarial).unwrap();
    for i in 0..6 {
        assert_eq!(result.success[i], preds[i] != labels[i], "image {i}");
    }
}

#[test]
fn pgd_is_deterministic_under_fixed_seed() {
    let model = micro_model(HeadKind::Baseline, 64);
    let mut rng = PrngState::new(65);
    let x = Tensor::from_fn(&[4, 1, 16, 16], |_| rng.uniform(0.0, 1.0) as f32);
    let labels = [0, 1, 0, 1];
    let cfg = AttackConfig {
        steps: 3,
        seed: 99,
        ..AttackConfig::new(0.05)
    };
    let a = pgd_linf(&model, &x, &labels, &cfg).unwrap();
    let b = pgd_linf(&model, &x, &labels, &cfg).unwrap();
    assert_eq!(a.adversarial.data(), b.adversarial.data());
}

proptest! {
    #[test]
    fn project_linf_is_idempotent_and_bounded(
        seed in 0u64..1000,
        eps in 0.0f64..0.3,
    ) {
        let mut rng = PrngState::new(seed);
        let origin = Tensor::from_vec(&[8], random_vec(&mut rng, 8, 0.0, 1.0)
            .into_iter().map(|v| v as f32).collect()).unwrap();
        let candidate = Tensor::from_vec(&[8], random_vec(&mut rng, 8, -0.5, 1.5)
            .into_iter().map(|v| v as f32).collect()).unwrap();
        let once = project_linf(&candidate, &origin, eps, (0.0, 1.0)).unwrap();
        let twice = project_linf(&once, &origin, eps, (0.0, 1.0)).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        for (o, p) in origin.data().iter().zip(once.data()) {
            prop_assert!(((p - o) as f64).abs() <= eps + 1e-7);
            prop_assert!((0.0..=1.0).contains(&(*p as f64)));
        }
    }
}
