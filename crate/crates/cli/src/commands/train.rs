use crate::opts::{
    default_out, flag, parse_flags, require_exists, usage_text, CliError, CliResult, FlagSpec,
    Resolved,
};
use atwb_core::data::{load_dataset, Dataset};
use atwb_core::model::{build_model, save_model, HeadKind, ModelConfig};
use atwb_core::train::{train, write_history_csv, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const SPECS: &[FlagSpec] = &[
    flag(
        "data",
        "dataset directory (root with train/ or a direct dataset dir)",
    ),
    flag("out", "model container path (default model.atwb)"),
    flag("head", "baseline | attention (default baseline)"),
    flag("seed", "weight-init and training seed (default 0)"),
    flag("epochs", "max epochs (default 300)"),
    flag("patience", "early-stopping patience (default 40)"),
    flag("min-delta", "early-stopping minimum delta (default 0.001)"),
    flag("lr", "Adam learning rate (default 0.01)"),
    flag("adam-eps", "Adam epsilon (default 0.1)"),
    flag("batch-size", "mini-batch size (default 32)"),
    flag(
        "subsample",
        "fraction of the train split per epoch (default 1.0)",
    ),
    flag("channels", "stage channels, e.g. 16,32,64 (default)"),
    flag("blocks", "residual blocks per stage (default 2)"),
    flag("attn-heads", "attention heads (default 16)"),
    flag("dropout", "attentive-head dropout (default 0.5)"),
];

/// A dataset root holds train/ and test/; accept either the root or a
/// direct dataset directory.
pub fn resolve_dataset_dir(data: &str, split: &str) -> PathBuf {
    let direct = Path::new(data);
    if direct.join("images.atwb").exists() {
        direct.to_path_buf()
    } else {
        direct.join(split)
    }
}

fn parse_channels(text: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--channels: cannot parse {text:?}")))?;
    if parts.len() != 3 {
        return Err(CliError::Usage(
            "--channels needs exactly three values, e.g. 16,32,64".into(),
        ));
    }
    Ok([parts[0], parts[1], parts[2]])
}

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("train", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text("train", "train a classifier on a dataset", SPECS)
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("train", cli, SPECS)?;
    let data_dir = opts.take_required("data")?;
    let out = opts.take_string("out", &default_out("model.atwb"));
    let head = HeadKind::parse(&opts.take_string("head", "baseline"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seed: u64 = opts.take("seed", 0u64)?;
    let train_cfg = TrainConfig {
        learning_rate: opts.take("lr", 0.01f64)?,
        adam_epsilon: opts.take("adam-eps", 0.1f64)?,
        max_epochs: opts.take("epochs", 300usize)?,
        patience: opts.take("patience", 40usize)?,
        min_delta: opts.take("min-delta", 0.001f64)?,
        batch_size: opts.take("batch-size", 32usize)?,
        seed,
        epoch_subsample_fraction: opts.take("subsample", 1.0f64)?,
        ..TrainConfig::default()
    };
    let channels = parse_channels(&opts.take_string("channels", "16,32,64"))?;
    let blocks: usize = opts.take("blocks", 2usize)?;
    let attn_heads: usize = opts.take("attn-heads", 16usize)?;
    let dropout: f64 = opts.take("dropout", 0.5f64)?;

    let split_dir = resolve_dataset_dir(&data_dir, "train");
    require_exists(&split_dir.display().to_string(), "dataset directory")?;
    let dataset: Dataset<f32> = load_dataset(&split_dir)?;
    let shape = dataset.images.shape();
    let model_cfg = ModelConfig {
        input_shape: (shape[1], shape[2], shape[3]),
        class_count: dataset.class_count(),
        head_kind: head,
        stage_channels: channels,
        blocks_per_stage: blocks,
        attention_heads: attn_heads,
        dropout_p: dropout,
    };
    model_cfg
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    train_cfg
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    eprintln!(
        "train: {} head on {} images ({} classes), seed {}",
        head.as_str(),
        dataset.len(),
        dataset.class_count(),
        seed
    );
    let mut model = build_model::<f32>(&model_cfg, seed)?;
    let report = train(&mut model, &dataset, &train_cfg)?;
    for h in &report.history {
        eprintln!(
            "train: epoch {:>3} loss {:.4} train-acc {:.4} val-acc {:.4}",
            h.epoch, h.train_loss, h.train_acc, h.val_acc
        );
    }
    eprintln!(
        "train: stopped after {} epochs, best validation accuracy {:.4}",
        report.epochs_run, report.best_val_accuracy
    );

    let out_path = Path::new(&out);
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
    }
    save_model(&model, out_path)?;
    let history_path = out_path.with_extension("history.csv");
    write_history_csv(&report.history, &history_path)?;

    let annotations = BTreeMap::from([(
        "best_val_accuracy".to_string(),
        format!("{:.6}", report.best_val_accuracy),
    )]);
    opts.write_beside(format!("{out}.config"), &annotations)?;
    eprintln!(
        "train: wrote {} (+ sidecar json, {})",
        out_path.display(),
        history_path.display()
    );
    Ok(())
}
