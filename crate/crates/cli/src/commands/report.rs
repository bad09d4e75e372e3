use crate::opts::{
    default_out, flag, parse_flags, require_exists, switch, usage_text, CliError, CliResult,
    FlagSpec, Resolved,
};
use atwb_core::hash::git_blob_sha1;
use atwb_core::report::{read_curve_csv, write_svg, Report};
use std::collections::BTreeMap;
use std::path::Path;

const SPECS: &[FlagSpec] = &[
    flag("curves", "comma-separated curve CSV paths"),
    flag("labels", "legend labels (default: file stems)"),
    switch("log-x", "log-scale the epsilon axis"),
    flag("out", "SVG path (default report.svg)"),
];

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("report", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text("report", "render curves into one SVG figure", SPECS)
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("report", cli, SPECS)?;
    let curves_arg = opts.take_required("curves")?;
    let paths: Vec<&str> = curves_arg.split(',').map(str::trim).collect();
    let labels_arg = opts.get("labels").map(|s| s.to_string());
    let log_x = opts.take_switch("log-x");
    let out = opts.take_string("out", &default_out("report.svg"));

    let labels: Vec<String> = match labels_arg {
        Some(ref l) => {
            let labels: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if labels.len() != paths.len() {
                return Err(CliError::Usage(format!(
                    "--labels: {} labels for {} curves",
                    labels.len(),
                    paths.len()
                )));
            }
            labels
        }
        None => paths
            .iter()
            .map(|p| {
                Path::new(p)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.to_string())
            })
            .collect(),
    };

    let mut metadata = BTreeMap::new();
    let mut curves = Vec::new();
    for (i, (path, label)) in paths.iter().zip(&labels).enumerate() {
        require_exists(path, "curve CSV")?;
        let points = read_curve_csv(path).map_err(|e| CliError::Usage(e.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
        metadata.insert(format!("curve{i}.path"), path.to_string());
        metadata.insert(format!("curve{i}.sha1"), git_blob_sha1(&bytes));
        // carry the producing run's resolved config into the figure
        let cfg_path = format!("{path}.config");
        if Path::new(&cfg_path).exists() {
            let text = std::fs::read_to_string(&cfg_path)
                .map_err(|e| CliError::Runtime(format!("{cfg_path}: {e}")))?;
            for line in text.lines() {
                let line = line.trim_start_matches("# ");
                if let Some((k, v)) = line.split_once('=') {
                    metadata.insert(format!("curve{i}.{}", k.trim()), v.trim().to_string());
                }
            }
        }
        curves.push((label.clone(), points));
    }

    let report = Report {
        curves,
        metadata,
        log_x,
    };
    write_svg(&report, &out).map_err(|e| match e {
        atwb_core::Error::InvalidArgument { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    opts.write_beside(format!("{out}.config"), &BTreeMap::new())?;
    eprintln!("report: wrote {out}");
    Ok(())
}
