use crate::commands::train::resolve_dataset_dir;
use crate::opts::{
    default_out, flag, parse_flags, require_exists, switch, usage_text, CliError, CliResult,
    FlagSpec, Resolved,
};
use atwb_core::attack::{AttackConfig, EpsilonSchedule};
use atwb_core::data::{load_dataset, Dataset};
use atwb_core::hash::git_blob_sha1;
use atwb_core::model::load_model;
use atwb_core::report::{robustness_curve_with, write_curve_csv, AccuracyKind};
use std::collections::BTreeMap;

const SPECS: &[FlagSpec] = &[
    flag("model", "trained model container"),
    flag("data", "dataset directory (root or direct)"),
    flag(
        "schedule",
        "'default' or comma-separated radii (default default)",
    ),
    flag("steps", "PGD iterations per radius (default 40)"),
    flag("alpha", "step size (default 2.5*eps/steps)"),
    switch("no-random-start", "deterministic PGD starts"),
    flag("seed", "attack seed (default 0)"),
    flag("split", "train | test (default test)"),
    flag("limit", "evaluate only the first N images"),
    flag("workers", "parallel image chunks (default 1)"),
    switch(
        "macro",
        "report class-balanced accuracy instead of per-sample",
    ),
    flag("out", "curve CSV path (default curve.csv)"),
];

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("evaluate", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text(
                "evaluate",
                "accuracy-vs-epsilon curve over a schedule",
                SPECS
            )
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("evaluate", cli, SPECS)?;
    let model_path = opts.take_required("model")?;
    let data_dir = opts.take_required("data")?;
    let schedule = EpsilonSchedule::parse(&opts.take_string("schedule", "default"))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let attack = AttackConfig {
        epsilon: 0.0,
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
    let split = opts.take_string("split", "test");
    let workers: usize = opts.take("workers", 1usize)?;
    let kind = if opts.take_switch("macro") {
        AccuracyKind::Macro
    } else {
        AccuracyKind::Micro
    };
    let out = opts.take_string("out", &default_out("curve.csv"));

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
        "evaluate: {} head, {} images, {} radii, {} PGD steps",
        model.head_kind().as_str(),
        dataset.len(),
        schedule.values().len(),
        attack.steps
    );
    let curve = robustness_curve_with(&model, &dataset, &schedule, &attack, workers, kind)?;
    for p in &curve.points {
        eprintln!("evaluate: eps {:<8} accuracy {:.4}", p.epsilon, p.accuracy);
    }
    write_curve_csv(&curve, &out)?;

    let model_bytes =
        std::fs::read(&model_path).map_err(|e| CliError::Runtime(format!("{model_path}: {e}")))?;
    let annotations = BTreeMap::from([
        ("model_sha1".to_string(), git_blob_sha1(&model_bytes)),
        ("head".to_string(), model.head_kind().as_str().to_string()),
    ]);
    opts.write_beside(format!("{out}.config"), &annotations)?;
    eprintln!("evaluate: wrote {out}");
    Ok(())
}
