//! Finite-difference harnesses for every differentiable op, shared by the
//! per-op tests and the acceptance suite. Each check returns its max
//! relative error; points are sampled away from ReLU/maxpool kinks and
//! all arithmetic runs in f64 with h = 1e-4.

use super::{finite_difference, max_rel_error, random_vec, random_vec_off_kink};
use atwb_core::{PrngState, Reduction, Tape, Tensor, ValueId};

pub const H: f64 = 1e-4;

/// Analytic-vs-numeric comparison for a scalar function of a flat
/// parameter vector. `build` must push its leaves with gradients enabled
/// and return `(loss, leaves)` in the order the flat vector packs them.
pub fn gradient_error<F>(x0: &[f64], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[f64]) -> (ValueId, Vec<ValueId>),
{
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, x0);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for id in &leaves {
        analytic.extend_from_slice(tape.grad(*id).expect("leaf gradient"));
    }
    assert_eq!(
        analytic.len(),
        x0.len(),
        "build must cover the whole vector"
    );

    let mut f = |x: &[f64]| {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, x);
        tape.value(loss).data()[0]
    };
    let numeric = finite_difference(&mut f, x0, H);
    max_rel_error(&analytic, &numeric)
}

/// Fixed weights turning multi-element outputs into a non-degenerate
/// scalar: loss = sum(out * w).
fn weighted_sum(tape: &mut Tape<f64>, out: ValueId, seed: u64) -> ValueId {
    let len = tape.value(out).len();
    let shape = tape.value(out).shape().to_vec();
    let mut rng = PrngState::new(seed);
    let w = Tensor::from_vec(&shape, random_vec(&mut rng, len, 0.1, 1.0)).unwrap();
    let w = tape.leaf(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

pub fn conv2d_gradient() -> f64 {
    let mut rng = PrngState::new(10);
    let x = random_vec(&mut rng, 2 * 2 * 4 * 4, -1.0, 1.0);
    let k = random_vec(&mut rng, 3 * 2 * 3 * 3, -1.0, 1.0);
    let b = random_vec(&mut rng, 3, -0.5, 0.5);
    let mut flat = x.clone();
    flat.extend_from_slice(&k);
    flat.extend_from_slice(&b);

    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[2, 2, 4, 4], v[..64].to_vec())
                .unwrap()
                .with_grad(),
        );
        let k = tape.leaf(
            Tensor::from_vec(&[3, 2, 3, 3], v[64..64 + 54].to_vec())
                .unwrap()
                .with_grad(),
        );
        let b = tape.leaf(
            Tensor::from_vec(&[3], v[64 + 54..].to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
        (weighted_sum(tape, out, 99), vec![x, k, b])
    })
}

pub fn maxpool2d_gradient() -> f64 {
    // distinct levels with gaps of 0.01 keep every window far from ties
    let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
    let mut rng = PrngState::new(11);
    rng.shuffle(&mut vals);

    gradient_error(&vals, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[1, 2, 4, 4], v.to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.maxpool2d(x, 2, 2).unwrap();
        (weighted_sum(tape, out, 98), vec![x])
    })
}

pub fn dense_gradient() -> f64 {
    let mut rng = PrngState::new(12);
    let mut flat = random_vec(&mut rng, 3 * 4 + 4 * 2 + 2, -1.0, 1.0);
    let snapshot = flat.clone();
    flat.copy_from_slice(&snapshot);

    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[3, 4], v[..12].to_vec())
                .unwrap()
                .with_grad(),
        );
        let w = tape.leaf(
            Tensor::from_vec(&[4, 2], v[12..20].to_vec())
                .unwrap()
                .with_grad(),
        );
        let b = tape.leaf(
            Tensor::from_vec(&[2], v[20..].to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.dense(x, w, b).unwrap();
        (weighted_sum(tape, out, 97), vec![x, w, b])
    })
}

pub fn relu_gradient_off_kink() -> f64 {
    let mut rng = PrngState::new(13);
    let x = random_vec_off_kink(&mut rng, 24, 1e-3);
    gradient_error(&x, |tape, v| {
        let x = tape.leaf(Tensor::from_vec(&[24], v.to_vec()).unwrap().with_grad());
        let out = tape.relu(x);
        (weighted_sum(tape, out, 96), vec![x])
    })
}

pub fn concat_gradient() -> f64 {
    let mut rng = PrngState::new(14);
    let flat = random_vec(&mut rng, (2 + 3) * 4, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let a = tape.leaf(
            Tensor::from_vec(&[1, 2, 2, 2], v[..8].to_vec())
                .unwrap()
                .with_grad(),
        );
        let b = tape.leaf(
            Tensor::from_vec(&[1, 3, 2, 2], v[8..].to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.concat_channels(a, b).unwrap();
        (weighted_sum(tape, out, 95), vec![a, b])
    })
}

pub fn global_avg_pool_gradient() -> f64 {
    let mut rng = PrngState::new(15);
    let flat = random_vec(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[2, 3, 4, 4], v.to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.global_avg_pool(x).unwrap();
        (weighted_sum(tape, out, 94), vec![x])
    })
}

pub fn dropout_gradient_with_fixed_mask() -> f64 {
    let mut rng = PrngState::new(16);
    let flat = random_vec(&mut rng, 32, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(Tensor::from_vec(&[32], v.to_vec()).unwrap().with_grad());
        // same seed every rebuild: identical mask across FD probes
        let mut rng = PrngState::new(1234);
        let out = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        (weighted_sum(tape, out, 93), vec![x])
    })
}

pub fn softmax_cross_entropy_gradient_vs_finite_difference() -> f64 {
    let mut rng = PrngState::new(17);
    let flat = random_vec(&mut rng, 4 * 3, -2.0, 2.0);
    let labels = [0usize, 2, 1, 0];
    let weights = [1.25f64, 0.75, 1.0];
    gradient_error(&flat, |tape, v| {
        let l = tape.leaf(Tensor::from_vec(&[4, 3], v.to_vec()).unwrap().with_grad());
        let (loss, _) = tape
            .softmax_cross_entropy(l, &labels, Some(&weights), Reduction::Mean)
            .unwrap();
        (loss, vec![l])
    })
}

pub fn spatial_softmax_gradient() -> f64 {
    let mut rng = PrngState::new(18);
    let flat = random_vec(&mut rng, 2 * 3 * 3, -2.0, 2.0);
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[1, 2, 3, 3], v.to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.spatial_softmax(x).unwrap();
        (weighted_sum(tape, out, 92), vec![x])
    })
}

pub fn sum_channels_gradient() -> f64 {
    let mut rng = PrngState::new(19);
    let flat = random_vec(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[2, 3, 2, 2], v.to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.sum_channels(x).unwrap();
        (weighted_sum(tape, out, 91), vec![x])
    })
}

pub fn mul_channel_broadcast_gradient() -> f64 {
    let mut rng = PrngState::new(20);
    let flat = random_vec(&mut rng, 2 * 3 * 2 * 2 + 2 * 2 * 2, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let f = tape.leaf(
            Tensor::from_vec(&[2, 3, 2, 2], v[..24].to_vec())
                .unwrap()
                .with_grad(),
        );
        let a = tape.leaf(
            Tensor::from_vec(&[2, 1, 2, 2], v[24..].to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.mul_channel_broadcast(f, a).unwrap();
        (weighted_sum(tape, out, 90), vec![f, a])
    })
}

pub fn scale_by_scalar_gradient() -> f64 {
    let mut rng = PrngState::new(21);
    let mut flat = random_vec(&mut rng, 9, -1.0, 1.0);
    flat.push(0.7); // the scalar
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(Tensor::from_vec(&[9], v[..9].to_vec()).unwrap().with_grad());
        let s = tape.leaf(Tensor::scalar(v[9]).with_grad());
        let out = tape.scale_by_scalar(x, s).unwrap();
        (weighted_sum(tape, out, 89), vec![x, s])
    })
}

pub fn add_mul_pick_gradients() -> f64 {
    let mut rng = PrngState::new(22);
    let flat = random_vec(&mut rng, 12, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let a = tape.leaf(Tensor::from_vec(&[6], v[..6].to_vec()).unwrap().with_grad());
        let b = tape.leaf(Tensor::from_vec(&[6], v[6..].to_vec()).unwrap().with_grad());
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, s).unwrap();
        let picked = tape.pick(p, 3).unwrap();
        let total = tape.sum(p);
        let loss = tape.add(picked, total).unwrap();
        (loss, vec![a, b])
    })
}

pub fn pad_replicate_gradient() -> f64 {
    let mut rng = PrngState::new(23);
    let flat = random_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
    gradient_error(&flat, |tape, v| {
        let x = tape.leaf(
            Tensor::from_vec(&[1, 2, 3, 3], v.to_vec())
                .unwrap()
                .with_grad(),
        );
        let out = tape.pad_replicate(x, 1).unwrap();
        (weighted_sum(tape, out, 88), vec![x])
    })
}

pub fn composite_conv_relu_gap_dense_ce_gradient() -> f64 {
    // conv -> relu -> GAP -> dense -> cross-entropy, checked end to end.
    // Seeds are scanned until every ReLU input clears the 1e-3 kink margin.
    let labels = [1usize, 0];
    let mut chosen = None;
    for seed in 0..50u64 {
        let mut rng = PrngState::new(seed);
        let flat = build_composite_point(&mut rng);
        let margin = composite_relu_margin(&flat, &labels);
        if margin > 1e-3 {
            chosen = Some(flat);
            break;
        }
    }
    let flat = chosen.expect("no kink-safe seed found in 50 tries");

    gradient_error(&flat, |tape, v| {
        let (loss, leaves, _) = build_composite(tape, v, &labels);
        (loss, leaves)
    })
}

fn build_composite_point(rng: &mut PrngState) -> Vec<f64> {
    let mut flat = random_vec(rng, 2 * 4 * 4, -1.0, 1.0); // input
    flat.extend(random_vec(rng, 2 * 3 * 3, -1.0, 1.0)); // conv kernel
    flat.extend(random_vec(rng, 2, -0.2, 0.2)); // conv bias
    flat.extend(random_vec(rng, 2 * 2, -1.0, 1.0)); // dense weight
    flat.extend(random_vec(rng, 2, -0.2, 0.2)); // dense bias
    flat
}

fn build_composite(
    tape: &mut Tape<f64>,
    v: &[f64],
    labels: &[usize],
) -> (ValueId, Vec<ValueId>, ValueId) {
    let x = tape.leaf(
        Tensor::from_vec(&[2, 1, 4, 4], v[..32].to_vec())
            .unwrap()
            .with_grad(),
    );
    let k = tape.leaf(
        Tensor::from_vec(&[2, 1, 3, 3], v[32..50].to_vec())
            .unwrap()
            .with_grad(),
    );
    let kb = tape.leaf(
        Tensor::from_vec(&[2], v[50..52].to_vec())
            .unwrap()
            .with_grad(),
    );
    let w = tape.leaf(
        Tensor::from_vec(&[2, 2], v[52..56].to_vec())
            .unwrap()
            .with_grad(),
    );
    let b = tape.leaf(
        Tensor::from_vec(&[2], v[56..58].to_vec())
            .unwrap()
            .with_grad(),
    );
    let conv = tape.conv2d(x, k, Some(kb), 1, 1).unwrap();
    let act = tape.relu(conv);
    let pooled = tape.global_avg_pool(act).unwrap();
    let logits = tape.dense(pooled, w, b).unwrap();
    let (loss, _) = tape
        .softmax_cross_entropy(logits, labels, None, Reduction::Mean)
        .unwrap();
    (loss, vec![x, k, kb, w, b], conv)
}

fn composite_relu_margin(flat: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let (_, _, conv) = build_composite(&mut tape, flat, labels);
    tape.value(conv)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v.abs()))
}

/// Named op-level check returning its max relative error.
pub type Check = fn() -> f64;

/// Every op-level check, for suites that sweep the lot.
pub const ALL: &[(&str, Check)] = &[
    ("conv2d", conv2d_gradient),
    ("maxpool2d", maxpool2d_gradient),
    ("dense", dense_gradient),
    ("relu", relu_gradient_off_kink),
    ("concat_channels", concat_gradient),
    ("global_avg_pool", global_avg_pool_gradient),
    ("dropout", dropout_gradient_with_fixed_mask),
    (
        "softmax_cross_entropy",
        softmax_cross_entropy_gradient_vs_finite_difference,
    ),
    ("spatial_softmax", spatial_softmax_gradient),
    ("sum_channels", sum_channels_gradient),
    ("mul_channel_broadcast", mul_channel_broadcast_gradient),
    ("scale_by_scalar", scale_by_scalar_gradient),
    ("add_mul_pick", add_mul_pick_gradients),
    ("pad_replicate", pad_replicate_gradient),
    (
        "composite_conv_relu_gap_dense_ce",
        composite_conv_relu_gap_dense_ce_gradient,
    ),
];
