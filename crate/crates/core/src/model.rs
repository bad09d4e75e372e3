//! Builds the two comparand classifiers: a shared mini-residual backbone
//! (stem plus three downsampling stages) with either a plain GAP head or
//! the soft-attention head. Both heads end in a fully-connected layer
//! producing class logits.
//!
//! Models built from the same seed draw their backbone parameters from the
//! same stream prefix, so baseline and attentive backbones initialize
//! bitwise identically and only the heads differ.

use crate::attention;
use crate::data::container::{self, Entry};
use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::{Element, Tape, Tensor, ValueId};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Baseline,
    Attention,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(HeadKind::Baseline),
            "attention" => Ok(HeadKind::Attention),
            other => Err(Error::invalid(
                "head",
                format!("unknown head kind {other:?} (expected baseline|attention)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (C, H, W); H and W must be divisible by 8 (three 2x downsamplings).
    pub input_shape: (usize, usize, usize),
    pub class_count: usize,
    pub head_kind: HeadKind,
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: usize,
    pub attention_heads: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: (1, 32, 32),
            class_count: 2,
            head_kind: HeadKind::Baseline,
            stage_channels: [16, 32, 64],
            blocks_per_stage: 2,
            attention_heads: 16,
            dropout_p: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("model", "input extents must be positive"));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(
                "model",
                format!("input {h}x{w} must be divisible by 8"),
            ));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("model", "class_count must be at least 2"));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::invalid("model", "stages must be non-trivial"));
        }
        if self.attention_heads == 0 {
            return Err(Error::invalid("model", "attention_heads must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("model", "dropout_p must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Spatial side of the backbone output grid.
    pub fn feature_grid(&self) -> (usize, usize) {
        (self.input_shape.1 / 8, self.input_shape.2 / 8)
    }
}

#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// Named parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct ModelGraph<E: Element = f32> {
    config: ModelConfig,
    seed: u64,
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

/// Tape handles for one forward pass.
pub struct Binding {
    ids: Vec<ValueId>,
}

/// Output of a traced forward pass: logits plus the named feature maps
/// Grad-CAM may target.
pub struct Trace {
    pub logits: ValueId,
    pub named: Vec<(String, ValueId)>,
}

impl Trace {
    pub fn named_id(&self, name: &str) -> Option<ValueId> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

fn kaiming_conv<E: Element>(
    rng: &mut PrngState,
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> Tensor<E> {
    let bound = (6.0 / (c * kh * kw) as f64).sqrt();
    Tensor::from_fn(&[f, c, kh, kw], |_| E::from_f64(rng.uniform(-bound, bound)))
}

fn kaiming_dense<E: Element>(rng: &mut PrngState, d: usize, k: usize) -> Tensor<E> {
    let bound = (6.0 / d as f64).sqrt();
    Tensor::from_fn(&[d, k], |_| E::from_f64(rng.uniform(-bound, bound)))
}

pub fn build_model<E: Element>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<E>> {
    config.validate()?;
    let mut rng = PrngState::new(seed);
    let mut params: Vec<Param<E>> = Vec::new();
    let push = |params: &mut Vec<Param<E>>, name: String, tensor: Tensor<E>| {
        params.push(Param { name, tensor });
    };

    let (c_in, _, _) = config.input_shape;
    let ch = config.stage_channels;

    // backbone first, in a head-independent order
    push(
        &mut params,
        "stem.kernel".into(),
        kaiming_conv(&mut rng, ch[0], c_in, 3, 3),
    );
    push(&mut params, "stem.bias".into(), Tensor::zeros(&[ch[0]]));

    let mut prev = ch[0];
    for (s, &c) in ch.iter().enumerate() {
        for b in 0..config.blocks_per_stage {
            let stage = s + 1;
            let cin = if b == 0 { prev } else { c };
            push(
                &mut params,
                format!("stage{stage}.block{b}.conv1.kernel"),
                kaiming_conv(&mut rng, c, cin, 3, 3),
            );
            push(
                &mut params,
                format!("stage{stage}.block{b}.conv1.bias"),
                Tensor::zeros(&[c]),
            );
            push(
                &mut params,
                format!("stage{stage}.block{b}.conv2.kernel"),
                kaiming_conv(&mut rng, c, c, 3, 3),
            );
            push(
                &mut params,
                format!("stage{stage}.block{b}.conv2.bias"),
                Tensor::zeros(&[c]),
            );
            if b == 0 {
                // stride-2 1x1 projection shortcut
                push(
                    &mut params,
                    format!("stage{stage}.block{b}.proj.kernel"),
                    kaiming_conv(&mut rng, c, cin, 1, 1),
                );
                push(
                    &mut params,
                    format!("stage{stage}.block{b}.proj.bias"),
                    Tensor::zeros(&[c]),
                );
            }
        }
        prev = c;
    }

    // head parameters afterwards so backbone draws are shared across heads
    let feat = ch[2];
    match config.head_kind {
        HeadKind::Baseline => {
            push(
                &mut params,
                "head.fc.weight".into(),
                kaiming_dense(&mut rng, feat, config.class_count),
            );
            push(
                &mut params,
                "head.fc.bias".into(),
                Tensor::zeros(&[config.class_count]),
            );
        }
        HeadKind::Attention => {
            let k = attention::ATTENTION_KERNEL_SIZE;
            push(
                &mut params,
                "attn.kernel".into(),
                kaiming_conv(&mut rng, config.attention_heads, feat, k, k),
            );
            push(&mut params, "attn.gamma".into(), Tensor::zeros(&[1]));
            push(
                &mut params,
                "head.fc.weight".into(),
                kaiming_dense(&mut rng, 2 * feat, config.class_count),
            );
            push(
                &mut params,
                "head.fc.bias".into(),
                Tensor::zeros(&[config.class_count]),
            );
        }
    }

    let index = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    Ok(ModelGraph {
        config: config.clone(),
        seed,
        params,
        index,
    })
}

impl<E: Element> ModelGraph<E> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head_kind
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Feature-map names a traced forward pass records.
    pub fn layer_names(&self) -> Vec<String> {
        vec![
            "stem.out".into(),
            "stage1.out".into(),
            "stage2.out".into(),
            "stage3.out".into(),
        ]
    }

    /// Pushes every parameter onto the tape, with or without gradients.
    pub fn bind(&self, tape: &mut Tape<E>, with_grads: bool) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(with_grads);
                tape.leaf(t)
            })
            .collect();
        Binding { ids }
    }

    pub fn bound_id(&self, binding: &Binding, name: &str) -> ValueId {
        binding.ids[self.index[name]]
    }

    pub fn bound_grad<'t>(
        &self,
        tape: &'t Tape<E>,
        binding: &Binding,
        i: usize,
    ) -> Option<&'t [E]> {
        tape.grad(binding.ids[i])
    }

    fn p(&self, binding: &Binding, name: &str) -> ValueId {
        self.bound_id(binding, name)
    }

    /// Forward pass on an existing tape. `training` enables dropout in the
    /// attentive head; eval mode is deterministic.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<E>,
        binding: &Binding,
        input: ValueId,
        training: bool,
        rng: &mut PrngState,
    ) -> Result<Trace> {
        let (n, c, h, w) = tape.value(input).dims4("forward")?;
        let (ec, eh, ew) = self.config.input_shape;
        if c != ec {
            return Err(Error::ShapeMismatch {
                op: "forward",
                axis: "channels",
                expected: ec,
                got: c,
            });
        }
        if h != eh || w != ew {
            return Err(Error::ShapeMismatch {
                op: "forward",
                axis: "spatial",
                expected: eh * ew,
                got: h * w,
            });
        }
        let _ = n;

        let mut named = Vec::new();
        let stem_k = self.p(binding, "stem.kernel");
        let stem_b = self.p(binding, "stem.bias");
        let mut x = tape.conv2d(input, stem_k, Some(stem_b), 1, 1)?;
        x = tape.relu(x);
        named.push(("stem.out".to_string(), x));

        for stage in 1..=3usize {
            for b in 0..self.config.blocks_per_stage {
                let prefix = format!("stage{stage}.block{b}");
                let k1 = self.p(binding, &format!("{prefix}.conv1.kernel"));
                let b1 = self.p(binding, &format!("{prefix}.conv1.bias"));
                let k2 = self.p(binding, &format!("{prefix}.conv2.kernel"));
                let b2 = self.p(binding, &format!("{prefix}.conv2.bias"));
                let stride = if b == 0 { 2 } else { 1 };
                let mut y = tape.conv2d(x, k1, Some(b1), stride, 1)?;
                y = tape.relu(y);
                y = tape.conv2d(y, k2, Some(b2), 1, 1)?;
                let shortcut = if b == 0 {
                    let pk = self.p(binding, &format!("{prefix}.proj.kernel"));
                    let pb = self.p(binding, &format!("{prefix}.proj.bias"));
                    tape.conv2d(x, pk, Some(pb), 2, 0)?
                } else {
                    x
                };
                let summed = tape.add(y, shortcut)?;
                x = tape.relu(summed);
            }
            named.push((format!("stage{stage}.out"), x));
        }

        let pooled = match self.config.head_kind {
            HeadKind::Baseline => tape.global_avg_pool(x)?,
            HeadKind::Attention => {
                let kernel = self.p(binding, "attn.kernel");
                let gamma = self.p(binding, "attn.gamma");
                attention::attentive_head(
                    tape,
                    kernel,
                    gamma,
                    x,
                    self.config.dropout_p,
                    rng,
                    training,
                )?
            }
        };
        let fc_w = self.p(binding, "head.fc.weight");
        let fc_b = self.p(binding, "head.fc.bias");
        let logits = tape.dense(pooled, fc_w, fc_b)?;
        Ok(Trace { logits, named })
    }

    /// Deterministic eval-mode forward; returns the logits.
    pub fn forward_eval(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let input = tape.leaf(batch.clone());
        let mut rng = PrngState::new(0);
        let trace = self.forward_traced(&mut tape, &binding, input, false, &mut rng)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Argmax of the logits; ties break toward the lower class index.
    pub fn predict(&self, batch: &Tensor<E>) -> Result<Vec<usize>> {
        let logits = self.forward_eval(batch)?;
        Ok(argmax_rows(&logits))
    }

    /// `predict` over a large image stack in fixed-size chunks.
    pub fn predict_batched(&self, images: &Tensor<E>, batch_size: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let stride: usize = images.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk =
                Tensor::from_vec(&shape, images.data()[start * stride..end * stride].to_vec())?;
            out.extend(self.predict(&chunk)?);
        }
        Ok(out)
    }
}

/// Row-wise argmax with ties toward the lower index.
pub fn argmax_rows<E: Element>(logits: &Tensor<E>) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
}

/// Metadata sidecar sits next to the container with a `.json` extension.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

pub fn save_model<E: Element>(model: &ModelGraph<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let entries: Vec<Entry> = model
        .params
        .iter()
        .map(|p| Entry::from_tensor(p.name.clone(), &p.tensor))
        .collect();
    container::save_container(&entries, path)?;

    let meta = ModelMeta {
        format: "atwb-model".into(),
        version: 1,
        config: model.config.clone(),
        seed: model.seed,
    };
    let json =
        serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid("model", e.to_string()))?;
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side.display().to_string(), e))
}

pub fn load_model<E: Element>(path: impl AsRef<Path>) -> Result<ModelGraph<E>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: side.display().to_string(),
        message: e.to_string(),
    })?;
    if meta.format != "atwb-model" || meta.version != 1 {
        return Err(Error::FileFormat {
            path: side.display().to_string(),
            message: format!(
                "unsupported model metadata {}/{}",
                meta.format, meta.version
            ),
        });
    }

    let mut model = build_model::<E>(&meta.config, meta.seed)?;
    let entries = container::load_container(path)?;
    for param in &mut model.params {
        let entry = container::find_entry(&entries, &param.name)?;
        let tensor: Tensor<E> = entry.to_tensor()?;
        if tensor.shape() != param.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_model",
                axis: "elements",
                expected: param.tensor.len(),
                got: tensor.len(),
            });
        }
        param.tensor = tensor;
    }
    Ok(model)
}
