use crate::opts::{
    default_out, flag, parse_flags, switch, usage_text, CliResult, FlagSpec, Resolved,
};
use atwb_core::data::{generate_synthetic, save_dataset, SynthConfig, SynthOutput};
use std::collections::BTreeMap;
use std::path::Path;

const SPECS: &[FlagSpec] = &[
    flag("out", "output dataset root (train/ and test/ inside)"),
    flag("n", "training images (default 2000)"),
    flag("n-test", "test images (default n/4)"),
    flag("size", "square image side, multiple of 8 (default 32)"),
    flag("seed", "generator seed (default 0)"),
    flag("imbalance", "class0:class1 ratio (default 1.0)"),
    flag("noise", "uniform noise half-width (default 0.05)"),
    switch("rgb", "emit 3-channel images instead of grayscale"),
];

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("synth", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text("synth", "generate the blob-vs-ring dataset", SPECS)
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("synth", cli, SPECS)?;
    let out = opts.take_string("out", &default_out("data"));
    let n: usize = opts.take("n", 2000usize)?;
    let n_test: usize = opts.take("n-test", n.div_ceil(4))?;
    let cfg = SynthConfig {
        size: opts.take("size", 32usize)?,
        n_train: n,
        n_test,
        imbalance_ratio: opts.take("imbalance", 1.0f64)?,
        noise_amplitude: opts.take("noise", 0.05f64)?,
        rgb: opts.take_switch("rgb"),
        seed: opts.take("seed", 0u64)?,
        ..SynthConfig::default()
    };
    cfg.validate()
        .map_err(|e| crate::opts::CliError::Usage(e.to_string()))?;

    eprintln!(
        "synth: generating {} train / {} test images of {}x{}",
        n, n_test, cfg.size, cfg.size
    );
    let data: SynthOutput = generate_synthetic(&cfg)?;
    let root = Path::new(&out);
    save_dataset(&data.train, root.join("train"))?;
    save_dataset(&data.test, root.join("test"))?;
    opts.write_beside(root.join("run.config"), &BTreeMap::new())?;
    eprintln!("synth: wrote {}", root.display());
    Ok(())
}
