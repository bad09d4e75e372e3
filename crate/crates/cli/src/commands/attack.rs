use crate::commands::train::resolve_dataset_dir;
use crate::opts::{
    default_out, flag, parse_flags, require_exists, switch, usage_text, CliError, CliResult,
    FlagSpec, Resolved,
};
use atwb_core::attack::{pgd_linf_offset, AttackConfig, AttackResult};
use atwb_core::data::container::{save_container, Entry};
use atwb_core::data::{load_dataset, Dataset};
use atwb_core::model::{load_model, ModelGraph};
use atwb_core::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const SPECS: &[FlagSpec] = &[
    flag("model", "trained model container"),
    flag("data", "dataset directory (root or direct)"),
    flag("eps", "l-inf radius on the [0,1] pixel scale"),
    flag("steps", "PGD iterations (default 40)"),
    flag("alpha", "step size (default 2.5*eps/steps)"),
    switch(
        "no-random-start",
        "start from the clean image instead of a random point",
    ),
    flag("seed", "attack seed (default 0)"),
    flag("split", "train | test (default test)"),
    flag("limit", "attack only the first N images"),
    flag("workers", "parallel image chunks (default 1)"),
    flag("out", "adversarial container (default adv.atwb)"),
];

/// Runs PGD over contiguous chunks; per-image substreams keep any chunking
/// bitwise identical.
pub fn attack_in_chunks(
    model: &ModelGraph<f32>,
    data: &Dataset<f32>,
    cfg: &AttackConfig,
    workers: usize,
) -> CliResult<AttackResult<f32>> {
    let n = data.len();
    let workers = workers.max(1).min(n);
    let chunk = n.div_ceil(workers);
    let ranges: Vec<(usize, usize)> = (0..workers)
        .map(|w| (w * chunk, ((w + 1) * chunk).min(n)))
        .filter(|(a, b)| a < b)
        .collect();

    let results: Vec<atwb_core::Result<AttackResult<f32>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(lo, hi)| {
                scope.spawn(move || {
                    let indices: Vec<usize> = (lo..hi).collect();
                    let subset = data.subset(&indices)?;
                    pgd_linf_offset(model, &subset.images, &subset.labels, cfg, lo as u64)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut merged: Option<AttackResult<f32>> = None;
    let mut images: Vec<Tensor<f32>> = Vec::new();
    for r in results {
        let r = r?;
        for i in 0..r.success.len() {
            images.push(r.adversarial.index_axis0(i));
        }
        match &mut merged {
            None => merged = Some(r),
            Some(m) => {
                m.success.extend_from_slice(&r.success);
                m.loss.extend_from_slice(&r.loss);
                m.linf.extend_from_slice(&r.linf);
            }
        }
    }
    let mut merged = merged.expect("at least one chunk");
    merged.adversarial = Tensor::stack(&images)?;
    Ok(merged)
}

pub fn attack_csv_string(result: &AttackResult<f32>) -> String {
    let mut csv = String::from("index,epsilon,success,loss,linf\n");
    for i in 0..result.success.len() {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.8}\n",
            i,
            result.epsilon,
            u8::from(result.success[i]),
            result.loss[i],
            result.linf[i]
        ));
    }
    csv
}

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("attack", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text("attack", "generate adversarial images at one radius", SPECS)
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("attack", cli, SPECS)?;
    let model_path = opts.take_required("model")?;
    let data_dir = opts.take_required("data")?;
    let eps: f64 = opts
        .take_required("eps")?
        .parse()
        .map_err(|_| CliError::Usage("--eps: expected a number".into()))?;
    let cfg = AttackConfig {
        epsilon: eps,
        steps: opts.take("steps", 40usize)?,
        step_size: opts
            .get("alpha")
            .map(|v| v.parse())
            .transpose()
            .map_err(|_| CliError::Usage("--alpha: expected a number".into()))?,
        random_start: !opts.take_switch("no-random-start"),
        bounds: (0.0, 1.0),
        seed: opts.take("seed", 0u64)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let split = opts.take_string("split", "test");
    let workers: usize = opts.take("workers", 1usize)?;
    let out = opts.take_string("out", &default_out("adv.atwb"));

    require_exists(&model_path, "model container")?;
    let split_dir = resolve_dataset_dir(&data_dir, &split);
    require_exists(&split_dir.display().to_string(), "dataset directory")?;

    let model = load_model::<f32>(&model_path)?;
    let mut dataset: Dataset<f32> = load_dataset(&split_dir)?;
    if let Some(limit) = opts.get("limit") {
        let limit: usize = limit
            .parse()
            .map_err(|_| CliError::Usage("--limit: expected a count".into()))?;
        let take: Vec<usize> = (0..limit.min(dataset.len())).collect();
        dataset = dataset.subset(&take)?;
    }

    eprintln!(
        "attack: PGD eps {} steps {} over {} images ({} workers)",
        cfg.epsilon,
        cfg.steps,
        dataset.len(),
        workers
    );
    let result = attack_in_chunks(&model, &dataset, &cfg, workers)?;
    let fooled = result.success.iter().filter(|&&s| s).count();
    eprintln!(
        "attack: {} of {} images misclassified",
        fooled,
        result.success.len()
    );

    let out_path = Path::new(&out);
    save_container(
        &[Entry::from_tensor("adversarial", &result.adversarial)],
        out_path,
    )?;
    let csv_path = out_path.with_extension("csv");
    std::fs::write(&csv_path, attack_csv_string(&result))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    opts.write_beside(format!("{out}.config"), &BTreeMap::new())?;
    eprintln!(
        "attack: wrote {} and {}",
        out_path.display(),
        csv_path.display()
    );
    Ok(())
}
