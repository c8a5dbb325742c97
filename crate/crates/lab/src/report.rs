//! Evaluation report files, SVG plots and the run summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nextpoint_core::metrics::{Aggregate, EvalReport, SceneRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::logging::read_records;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub sha256: String,
    pub vocab_hash: String,
    pub stage: String,
    pub step: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub r_thresh: f64,
    pub iou_threshold: f64,
    pub seg_threshold: f64,
    pub seg_max_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub aji: f64,
    pub scenes: usize,
    pub format_failures: usize,
}

impl From<Aggregate> for AggregateRecord {
    fn from(a: Aggregate) -> Self {
        Self { f1: a.f1, precision: a.precision, recall: a.recall, pq: a.pq, dq: a.dq, sq: a.sq, aji: a.aji, scenes: a.scenes, format_failures: a.format_failures }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: usize,
    pub file: String,
    pub format_ok: bool,
    pub n_pred: usize,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub aji: f64,
}

impl SceneRow {
    fn new(r: &SceneRecord, file: String) -> Self {
        Self {
            scene: r.scene,
            file,
            format_ok: r.format_ok,
            n_pred: r.n_pred,
            n_gt: r.n_gt,
            tp: r.tp,
            fp: r.fp,
            fn_count: r.fn_count,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            pq: r.pq,
            dq: r.dq,
            sq: r.sq,
            aji: r.aji,
        }
    }
}

/// Structured evaluation output (`eval_<split>.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub split: String,
    pub checkpoint: CheckpointInfo,
    pub settings: EvalSettings,
    pub aggregate: AggregateRecord,
    pub scenes: Vec<SceneRow>,
}

impl EvalDocument {
    pub fn new(report: &EvalReport, split: &str, files: &[String], checkpoint: CheckpointInfo) -> Self {
        let c = &report.config;
        Self {
            split: split.to_string(),
            checkpoint,
            settings: EvalSettings { r_thresh: c.r_thresh, iou_threshold: report.iou_threshold, seg_threshold: c.segmenter.threshold, seg_max_radius: c.segmenter.max_radius },
            aggregate: report.aggregate.into(),
            scenes: report.records.iter().zip(files).map(|(r, f)| SceneRow::new(r, f.clone())).collect(),
        }
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let json_path = dir.join(format!("{stem}.json"));
        let mut json = serde_json::to_vec_pretty(self).expect("eval document serializes");
        json.push(b'\n');
        fs::write(&json_path, json).map_err(|e| LabError::io(format!("writing {}", json_path.display()), e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.scenes {
            w.serialize(row).expect("csv row serializes");
        }
        let bytes = w.into_inner().expect("in-memory csv flush");
        fs::write(&csv_path, bytes).map_err(|e| LabError::io(format!("writing {}", csv_path.display()), e))?;
        Ok((json_path, csv_path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_slice(&bytes).map_err(|e| LabError::artifact(path, format!("not an eval report: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Standalone SVG line plot. The x range spans the first to last step seen
/// in any series and is recorded in `data-x-min` / `data-x-max`.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let mut svg = String::new();
    let range = |f: fn(&(f64, f64)) -> f64| all.iter().map(f).fold(None, |acc: Option<(f64, f64)>, v| Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v)))));
    let xr = range(|p| p.0);
    let yr = range(|p| p.1).map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) });
    let attrs = match xr {
        Some((lo, hi)) => format!(" data-x-min=\"{lo}\" data-x-max=\"{hi}\""),
        None => String::new(),
    };
    let _ = writeln!(svg, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\"{attrs}>");
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>", w / 2.0, escape(title));
    let (pw, ph) = (w - left - right, h - top - bottom);
    let _ = writeln!(svg, "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>", left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    if let (Some((x0, x1)), Some((y0, y1))) = (xr, yr) {
        let sx = |x: f64| if x1 > x0 { left + (x - x0) / (x1 - x0) * pw } else { left + pw / 2.0 };
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>", sx(xv), top + ph + 14.0, fmt_tick(xv));
            let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>", left - 4.0, sy(yv) + 3.0, fmt_tick(yv));
        }
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>", left + 8.0, top + 14.0 + 14.0 * k as f64, escape(&s.label));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogSummary {
    pub log: String,
    pub steps: usize,
    pub first_step: u64,
    pub last_step: u64,
    pub final_loss: Option<f64>,
    pub mean_reward_first: Option<f64>,
    pub mean_reward_last: Option<f64>,
    pub mean_filtered_fraction: Option<f64>,
    pub mean_format_failure_rate: Option<f64>,
    pub segmenter_calls: u64,
    pub last_val_f1: Option<f64>,
    pub skipped_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: String,
    pub split: String,
    pub stage: String,
    pub aggregate: AggregateRecord,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub logs: Vec<LogSummary>,
    pub evals: Vec<EvalSummary>,
    pub skipped_lines: usize,
}

fn field(r: &Value, k: &str) -> Option<f64> {
    r.get(k).and_then(Value::as_f64)
}

fn step_of(r: &Value) -> Option<u64> {
    r.get("step").and_then(Value::as_u64)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Window used for the first/last reward means.
const REWARD_WINDOW: usize = 20;

fn summarize_log(name: String, records: &[Value], skipped: usize) -> LogSummary {
    let steps: Vec<&Value> = records.iter().filter(|r| r["event"] == "step").collect();
    let rewards: Vec<f64> = steps.iter().filter_map(|r| field(r, "mean_reward")).collect();
    let window = REWARD_WINDOW.min(rewards.len());
    LogSummary {
        log: name,
        steps: steps.len(),
        first_step: steps.first().and_then(|r| step_of(r)).unwrap_or(0),
        last_step: steps.last().and_then(|r| step_of(r)).unwrap_or(0),
        final_loss: steps.iter().rev().find_map(|r| field(r, "loss")),
        mean_reward_first: mean(&rewards[..window]),
        mean_reward_last: mean(&rewards[rewards.len() - window..]),
        mean_filtered_fraction: mean(&steps.iter().filter_map(|r| field(r, "filtered_fraction")).collect::<Vec<_>>()),
        mean_format_failure_rate: mean(&steps.iter().filter_map(|r| field(r, "format_failure_rate")).collect::<Vec<_>>()),
        segmenter_calls: steps.iter().filter_map(|r| r.get("segmenter_calls").and_then(Value::as_u64)).sum(),
        last_val_f1: records.iter().rev().filter(|r| r["event"] == "eval").find_map(|r| field(r, "f1")),
        skipped_lines: skipped,
    }
}

fn series(records: &[Value], event: &str, key: &str, label: String) -> Series {
    let points = records.iter().filter(|r| r["event"] == event).filter_map(|r| Some((step_of(r)? as f64, field(r, key)?))).collect();
    Series { label, points }
}

fn file_label(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Reads logs and eval reports and writes `loss.svg`, `reward.svg`,
/// `f1.svg`, `rates.svg`, `summary.json` and `summary.md` into `out`.
pub fn build_report(logs: &[PathBuf], evals: &[PathBuf], out: &Path) -> Result<Summary> {
    fs::create_dir_all(out).map_err(|e| LabError::io(format!("creating {}", out.display()), e))?;
    let mut summary = Summary::default();
    let (mut loss, mut reward, mut f1, mut rates) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for path in logs {
        let (records, skipped) = read_records(path)?;
        let name = file_label(path);
        summary.skipped_lines += skipped;
        loss.push(series(&records, "step", "loss", format!("{name} loss")));
        reward.push(series(&records, "step", "mean_reward", format!("{name} reward")));
        f1.push(series(&records, "eval", "f1", format!("{name} val F1")));
        rates.push(series(&records, "step", "filtered_fraction", format!("{name} filtered")));
        rates.push(series(&records, "step", "format_failure_rate", format!("{name} format failures")));
        summary.logs.push(summarize_log(name, &records, skipped));
    }
    for path in evals {
        let doc = EvalDocument::read(path)?;
        summary.evals.push(EvalSummary { report: file_label(path), split: doc.split, stage: doc.checkpoint.stage, aggregate: doc.aggregate });
    }
    let keep = |v: Vec<Series>| v.into_iter().filter(|s| !s.points.is_empty()).collect::<Vec<_>>();
    let plots = [
        ("loss.svg", line_plot("Training loss", "step", "loss", &keep(loss))),
        ("reward.svg", line_plot("Mean group reward", "step", "reward", &keep(reward))),
        ("f1.svg", line_plot("Validation F1", "step", "F1", &keep(f1))),
        ("rates.svg", line_plot("Filtered and format-failure rates", "step", "fraction", &keep(rates))),
    ];
    for (name, svg) in plots {
        let p = out.join(name);
        fs::write(&p, svg).map_err(|e| LabError::io(format!("writing {}", p.display()), e))?;
    }
    let p = out.join("summary.json");
    let mut json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    json.push(b'\n');
    fs::write(&p, json).map_err(|e| LabError::io(format!("writing {}", p.display()), e))?;
    let p = out.join("summary.md");
    fs::write(&p, summary_markdown(&summary)).map_err(|e| LabError::io(format!("writing {}", p.display()), e))?;
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn summary_markdown(s: &Summary) -> String {
    let mut md = String::from("# Run summary\n\n");
    md.push_str("| log | steps | final loss | reward (first) | reward (last) | filtered | format failures | segmenter calls | last val F1 |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for l in &s.logs {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            l.log,
            l.steps,
            opt(l.final_loss),
            opt(l.mean_reward_first),
            opt(l.mean_reward_last),
            opt(l.mean_filtered_fraction),
            opt(l.mean_format_failure_rate),
            l.segmenter_calls,
            opt(l.last_val_f1)
        );
    }
    md.push_str("\n| report | split | stage | F1 | precision | recall | PQ | DQ | SQ | AJI | scenes | format failures |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for e in &s.evals {
        let a = &e.aggregate;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
            e.report, e.split, e.stage, a.f1, a.precision, a.recall, a.pq, a.dq, a.sq, a.aji, a.scenes, a.format_failures
        );
    }
    if s.skipped_lines > 0 {
        let _ = writeln!(md, "\n{} malformed log lines were skipped.", s.skipped_lines);
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(svg: &str, name: &str) -> Option<f64> {
        let start = svg.find(&format!("{name}=\""))? + name.len() + 2;
        svg[start..].split('"').next()?.parse().ok()
    }

    #[test]
    fn x_range_matches_steps() {
        let s = Series { label: "a".into(), points: vec![(3.0, 0.1), (10.0, 0.5), (57.0, 0.2)] };
        let svg = line_plot("t", "step", "y", &[s]);
        assert_eq!(attr(&svg, "data-x-min"), Some(3.0));
        assert_eq!(attr(&svg, "data-x-max"), Some(57.0));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_inputs_give_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("empty.ndjson");
        fs::write(&log, "").unwrap();
        let s = build_report(&[log], &[], &dir.path().join("out")).unwrap();
        assert_eq!(s.logs[0].steps, 0);
        assert_eq!(s.logs[0].mean_reward_last, None);
        let svg = fs::read_to_string(dir.path().join("out/reward.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("</svg>"));
        assert_eq!(attr(&svg, "data-x-min"), None);
    }

    #[test]
    fn summary_windows_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("rft.ndjson");
        let mut text = String::new();
        for s in 1..=50u64 {
            let _ = writeln!(text, "{{\"event\":\"step\",\"step\":{s},\"mean_reward\":{},\"filtered_fraction\":0.5,\"segmenter_calls\":2}}", s as f64 / 100.0);
        }
        text.push_str("{oops\n");
        fs::write(&log, text).unwrap();
        let s = build_report(&[log], &[], dir.path()).unwrap();
        let l = &s.logs[0];
        assert_eq!((l.steps, l.first_step, l.last_step, l.skipped_lines, l.segmenter_calls), (50, 1, 50, 1, 100));
        assert!((l.mean_reward_first.unwrap() - 0.105).abs() < 1e-12);
        assert!((l.mean_reward_last.unwrap() - 0.405).abs() < 1e-12);
    }
}
