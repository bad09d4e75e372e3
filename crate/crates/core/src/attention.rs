//! Soft-attention block: a full-depth convolution produces K attention
//! head maps, each softmax-normalized over spatial positions; the heads
//! are summed into one aggregate map which reweights the input features,
//! scaled by a learnable scalar gamma initialized at zero. With gamma = 0
//! the whole branch contributes exactly nothing, which makes the
//! attentive and baseline heads comparable from a shared backbone.

use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::{Element, Tape, Tensor, ValueId};

pub const ATTENTION_KERNEL_SIZE: usize = 3;

/// Learnable state of the block: one map-generating kernel spanning the
/// full channel depth, and the scalar branch gain.
#[derive(Debug, Clone)]
pub struct SoftAttentionBlock<E: Element> {
    pub kernel: Tensor<E>,
    pub gamma: Tensor<E>,
    heads: usize,
    in_channels: usize,
}

impl<E: Element> SoftAttentionBlock<E> {
    /// Kaiming-uniform kernel, gamma = 0.
    pub fn new(in_channels: usize, heads: usize, rng: &mut PrngState) -> Result<Self> {
        if heads == 0 || in_channels == 0 {
            return Err(Error::invalid(
                "soft_attention",
                "heads and channels must be positive",
            ));
        }
        let k = ATTENTION_KERNEL_SIZE;
        let fan_in = in_channels * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernel = Tensor::from_fn(&[heads, in_channels, k, k], |_| {
            E::from_f64(rng.uniform(-bound, bound))
        });
        Ok(SoftAttentionBlock {
            kernel,
            gamma: Tensor::zeros(&[1]),
            heads,
            in_channels,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Pushes the parameters onto a tape as gradient leaves.
    pub fn bind(&self, tape: &mut Tape<E>) -> (ValueId, ValueId) {
        let kernel = tape.leaf(self.kernel.clone().with_grad());
        let gamma = tape.leaf(self.gamma.clone().with_grad());
        (kernel, gamma)
    }
}

/// K spatially-normalized head maps plus their sum.
///
/// Returns `(alpha, heads)`: `heads` is `[N, K, H, W]` with each map
/// summing to 1 over positions, `alpha` is `[N, 1, H, W]` (sums to K).
pub fn compute_attention<E: Element>(
    tape: &mut Tape<E>,
    kernel: ValueId,
    features: ValueId,
) -> Result<(ValueId, ValueId)> {
    let (_, c, _, _) = tape.value(features).dims4("compute_attention")?;
    let (_, kc, _, _) = tape.value(kernel).dims4("compute_attention")?;
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "compute_attention",
            axis: "channels",
            expected: kc,
            got: c,
        });
    }
    // replicate padding keeps the generator edge-neutral: a constant
    // feature map yields exactly uniform heads
    let pad = (ATTENTION_KERNEL_SIZE - 1) / 2;
    let padded = tape.pad_replicate(features, pad)?;
    let raw = tape.conv2d(padded, kernel, None, 1, 0)?;
    let heads = tape.spatial_softmax(raw)?;
    let alpha = tape.sum_channels(heads)?;
    Ok((alpha, heads))
}

/// `gamma * (alpha ⊙ features)`; exactly zero when gamma is zero.
pub fn soft_attention_forward<E: Element>(
    tape: &mut Tape<E>,
    kernel: ValueId,
    gamma: ValueId,
    features: ValueId,
) -> Result<ValueId> {
    let (alpha, _) = compute_attention(tape, kernel, features)?;
    let weighted = tape.mul_channel_broadcast(features, alpha)?;
    tape.scale_by_scalar(weighted, gamma)
}

/// Attention branch and skip branch, each 2x2 max pooled, concatenated
/// (attention first), then ReLU, dropout and global average pooling.
/// Output is `[N, 2C]`. A degenerate 1x1 grid has nothing to pool and
/// skips the pooling stage; odd extents above 1 are an error.
pub fn attentive_head<E: Element>(
    tape: &mut Tape<E>,
    kernel: ValueId,
    gamma: ValueId,
    features: ValueId,
    dropout_p: f64,
    rng: &mut PrngState,
    training: bool,
) -> Result<ValueId> {
    let (_, _, h, w) = tape.value(features).dims4("attentive_head")?;
    let pool = !(h == 1 && w == 1);
    if pool && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::invalid(
            "attentive_head",
            format!("spatial extents {h}x{w} must be even for 2x2 pooling"),
        ));
    }
    let attended = soft_attention_forward(tape, kernel, gamma, features)?;
    let (pooled_attn, pooled_skip) = if pool {
        (
            tape.maxpool2d(attended, 2, 2)?,
            tape.maxpool2d(features, 2, 2)?,
        )
    } else {
        (attended, features)
    };
    let merged = tape.concat_channels(pooled_attn, pooled_skip)?;
    let act = tape.relu(merged);
    let dropped = tape.dropout(act, dropout_p, rng, training)?;
    tape.global_avg_pool(dropped)
}
