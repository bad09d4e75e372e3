//! Robustness curves (unweighted accuracy per perturbation radius) and
//! their CSV / SVG emission. Both writers are byte-deterministic.

use crate::attack::{attack_sweep_offset, AttackConfig, AttackResult, EpsilonSchedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Per-sample (micro) accuracy: mean of the exact-match indicator.
pub fn unweighted_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput {
            op: "unweighted_accuracy",
        });
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "unweighted_accuracy",
            axis: "labels",
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Class-balanced (macro) accuracy: mean over classes of per-class
/// accuracy. The clearly-labeled alternative reading of "unweighted";
/// micro is the primary metric.
pub fn macro_accuracy(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput {
            op: "macro_accuracy",
        });
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "macro_accuracy",
            axis: "labels",
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    let mut correct = vec![0usize; class_count];
    let mut total = vec![0usize; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= class_count {
            return Err(Error::LabelOutOfRange {
                label: l,
                class_count,
            });
        }
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        if total[c] > 0 {
            acc += correct[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::EmptyInput {
            op: "macro_accuracy",
        });
    }
    Ok(acc / present as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccuracyKind {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Ordered (epsilon, accuracy, sample count) triples for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub model_id: String,
    pub points: Vec<CurvePoint>,
    /// Base attack configuration the sweep ran with (epsilon varies).
    pub attack: AttackConfig,
}

impl RobustnessCurve {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput { op: "curve" });
        }
        for pair in self.points.windows(2) {
            if pair[1].epsilon <= pair[0].epsilon {
                return Err(Error::invalid(
                    "curve",
                    "epsilons must be strictly increasing",
                ));
            }
        }
        if self
            .points
            .iter()
            .any(|p| !(0.0..=1.0).contains(&p.accuracy))
        {
            return Err(Error::invalid("curve", "accuracy outside [0, 1]"));
        }
        Ok(())
    }

    pub fn is_monotone_non_increasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|pair| pair[1].accuracy <= pair[0].accuracy + 1e-12)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.epsilon).collect()
    }
}

fn accuracy_from_results<E: Element>(
    results: &[AttackResult<E>],
    labels: &[usize],
    kind: AccuracyKind,
    class_count: usize,
) -> Result<Vec<CurvePoint>> {
    results
        .iter()
        .map(|r| {
            // success means misclassified, so recover the prediction match
            let correct: Vec<usize> = r
                .success
                .iter()
                .zip(labels)
                .map(|(&s, &l)| if s { usize::MAX } else { l })
                .collect();
            let accuracy = match kind {
                AccuracyKind::Micro => unweighted_accuracy(&correct, labels)?,
                AccuracyKind::Macro => macro_accuracy(&correct, labels, class_count)?,
            };
            Ok(CurvePoint {
                epsilon: r.epsilon,
                accuracy,
                n: labels.len(),
            })
        })
        .collect()
}

/// Runs the warm-started sweep over a dataset and reduces it to a curve.
/// `workers` chunks the images; per-image PRNG substreams keep any worker
/// count bitwise identical to the single-worker run.
pub fn robustness_curve_with<E: Element>(
    model: &ModelGraph<E>,
    data: &Dataset<E>,
    schedule: &EpsilonSchedule,
    attack: &AttackConfig,
    workers: usize,
    kind: AccuracyKind,
) -> Result<RobustnessCurve> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            op: "robustness_curve",
        });
    }
    let n = data.len();
    let workers = workers.max(1).min(n);
    let chunk = n.div_ceil(workers);
    let ranges: Vec<(usize, usize)> = (0..workers)
        .map(|w| (w * chunk, ((w + 1) * chunk).min(n)))
        .filter(|(a, b)| a < b)
        .collect();

    let mut per_chunk: Vec<Vec<AttackResult<E>>> = Vec::with_capacity(ranges.len());
    if ranges.len() == 1 {
        per_chunk.push(attack_sweep_offset(
            model,
            &data.images,
            &data.labels,
            schedule,
            attack,
            0,
        )?);
    } else {
        let results: Vec<Result<Vec<AttackResult<E>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(lo, hi)| {
                    scope.spawn(move || {
                        let indices: Vec<usize> = (lo..hi).collect();
                        let images = Tensor::stack(
                            &indices
                                .iter()
                                .map(|&i| data.images.index_axis0(i))
                                .collect::<Vec<_>>(),
                        )?;
                        let labels = &data.labels[lo..hi];
                        attack_sweep_offset(model, &images, labels, schedule, attack, lo as u64)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            per_chunk.push(r?);
        }
    }

    // concatenate chunk results per epsilon
    let mut merged: Vec<AttackResult<E>> = Vec::with_capacity(schedule.values().len());
    for e_idx in 0..schedule.values().len() {
        let mut success = Vec::with_capacity(n);
        let mut loss = Vec::with_capacity(n);
        let mut linf = Vec::with_capacity(n);
        let mut advs = Vec::with_capacity(n);
        for chunk_results in &per_chunk {
            let r = &chunk_results[e_idx];
            success.extend_from_slice(&r.success);
            loss.extend_from_slice(&r.loss);
            linf.extend_from_slice(&r.linf);
            for i in 0..r.success.len() {
                advs.push(r.adversarial.index_axis0(i));
            }
        }
        merged.push(AttackResult {
            adversarial: Tensor::stack(&advs)?,
            success,
            loss,
            linf,
            epsilon: schedule.values()[e_idx],
        });
    }

    let points = accuracy_from_results(&merged, &data.labels, kind, data.class_count())?;
    let curve = RobustnessCurve {
        model_id: model.head_kind().as_str().to_string(),
        points,
        attack: attack.clone(),
    };
    curve.validate()?;
    Ok(curve)
}

pub fn robustness_curve<E: Element>(
    model: &ModelGraph<E>,
    data: &Dataset<E>,
    schedule: &EpsilonSchedule,
    attack: &AttackConfig,
) -> Result<RobustnessCurve> {
    robustness_curve_with(model, data, schedule, attack, 1, AccuracyKind::Micro)
}

/// Full sweep results plus the reduced curve, for callers that also need
/// the adversarial batches (persistence, difference maps).
pub fn sweep_with_curve<E: Element>(
    model: &ModelGraph<E>,
    data: &Dataset<E>,
    schedule: &EpsilonSchedule,
    attack: &AttackConfig,
) -> Result<(Vec<AttackResult<E>>, RobustnessCurve)> {
    let results = attack_sweep_offset(model, &data.images, &data.labels, schedule, attack, 0)?;
    let points = accuracy_from_results(
        &results,
        &data.labels,
        AccuracyKind::Micro,
        data.class_count(),
    )?;
    let curve = RobustnessCurve {
        model_id: model.head_kind().as_str().to_string(),
        points,
        attack: attack.clone(),
    };
    curve.validate()?;
    Ok((results, curve))
}

/// CSV: header `epsilon,accuracy,n`, accuracy at 6 decimal places,
/// epsilon in shortest round-trip form.
pub fn curve_csv_string(curve: &RobustnessCurve) -> String {
    let mut out = String::from("epsilon,accuracy,n\n");
    for p in &curve.points {
        out.push_str(&format!("{},{:.6},{}\n", p.epsilon, p.accuracy, p.n));
    }
    out
}

pub fn write_curve_csv(curve: &RobustnessCurve, path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, curve_csv_string(curve))
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "epsilon,accuracy,n" {
                return Err(Error::invalid("curve_csv", format!("bad header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let parse_err = || Error::invalid("curve_csv", format!("bad row {}", i + 1));
        let epsilon = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(parse_err)?;
        let accuracy = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(parse_err)?;
        let n = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(parse_err)?;
        points.push(CurvePoint {
            epsilon,
            accuracy,
            n,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyInput { op: "curve_csv" });
    }
    Ok(points)
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    parse_curve_csv(&text)
}

/// One or more same-schedule curves plus everything needed to regenerate
/// the figure.
#[derive(Debug, Clone)]
pub struct Report {
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub metadata: BTreeMap<String, String>,
    pub log_x: bool,
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .curves
            .first()
            .ok_or(Error::EmptyInput { op: "report" })?;
        let schedule: Vec<f64> = first.1.iter().map(|p| p.epsilon).collect();
        for (label, points) in &self.curves {
            let eps: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
            if eps != schedule {
                return Err(Error::invalid(
                    "report",
                    format!("curve {label:?} has a different schedule"),
                ));
            }
        }
        Ok(())
    }
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2",
];

/// Hand-emitted SVG 1.1: fixed 800x500 viewport, one `<polyline>` per
/// curve, axis labels, a legend, metadata in `<desc>`.
pub fn render_svg(report: &Report) -> Result<String> {
    report.validate()?;
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let epsilons: Vec<f64> = report.curves[0].1.iter().map(|p| p.epsilon).collect();
    let eps_max = *epsilons.last().unwrap();

    let min_nonzero = epsilons.iter().copied().find(|&e| e > 0.0);
    let x_of = |eps: f64| -> f64 {
        if report.log_x {
            match min_nonzero {
                Some(lo) if eps_max > 0.0 => {
                    let floor = lo / 2.0;
                    let v = eps.max(floor);
                    let t = (v.log10() - floor.log10()) / (eps_max.log10() - floor.log10());
                    MARGIN_L + t * plot_w
                }
                _ => MARGIN_L,
            }
        } else if eps_max > 0.0 {
            MARGIN_L + eps / eps_max * plot_w
        } else {
            MARGIN_L
        }
    };
    let y_of = |acc: f64| MARGIN_T + (1.0 - acc) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str("<desc>");
    for (k, v) in &report.metadata {
        svg.push_str(&format!("{k} = {v}\n"));
    }
    svg.push_str("</desc>\n");
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    ));

    // y gridlines and labels at 0.0 .. 1.0
    for i in 0..=5 {
        let acc = i as f64 * 0.2;
        let y = y_of(acc);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_L,
            y,
            MARGIN_L + plot_w,
            y
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{:.1}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            acc
        ));
    }

    // x ticks at schedule radii
    for &eps in &epsilons {
        let x = x_of(eps);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999999\" stroke-width=\"1\"/>\n",
            x,
            MARGIN_T + plot_h,
            x,
            MARGIN_T + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"end\" font-family=\"sans-serif\" transform=\"rotate(-45 {:.2} {:.2})\">{}</text>\n",
            x,
            MARGIN_T + plot_h + 16.0,
            x,
            MARGIN_T + plot_h + 16.0,
            eps
        ));
    }

    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
        MARGIN_L,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">epsilon{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 10.0,
        if report.log_x { " (log scale)" } else { "" }
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {:.2})\">unweighted accuracy</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    // curves and legend
    for (i, (label, points)) in report.curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.epsilon), y_of(p.accuracy)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            coords.join(" "),
            color
        ));
        let ly = MARGIN_T + 14.0 + i as f64 * 20.0;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"14\" height=\"3\" fill=\"{}\"/>\n",
            SVG_W - MARGIN_R + 16.0,
            ly - 4.0,
            color
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            SVG_W - MARGIN_R + 36.0,
            ly,
            label
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let svg = render_svg(report)?;
    fs::write(&path, svg).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}
