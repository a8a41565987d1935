use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::cv::{EvaluationReport, TransferMatrix};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::synth::ContextTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

fn ensure_complete(report: &EvaluationReport) -> Result<()> {
    if report.folds.is_empty() || report.mean.is_empty() {
        return Err(Error::Invalid("refusing to emit an empty report".into()));
    }
    Ok(())
}

pub fn report_to_json(report: &EvaluationReport) -> Result<String> {
    ensure_complete(report)?;
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn report_from_json(text: &str) -> Result<EvaluationReport> {
    Ok(serde_json::from_str(text)?)
}

fn escape(key: &str) -> String {
    let k = key.replace('~', "~0").replace('/', "~1");
    match k.strip_prefix('#') {
        Some(rest) => format!("~2{rest}"),
        None => k,
    }
}

fn unescape(seg: &str) -> String {
    let s = match seg.strip_prefix("~2") {
        Some(rest) => format!("#{rest}"),
        None => seg.to_string(),
    };
    s.replace("~1", "/").replace("~0", "~")
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                flatten(&format!("{prefix}/{}", escape(k)), x, out)?;
            }
        }
        Value::Array(a) if !a.is_empty() => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}/#{i}"), x, out)?;
            }
        }
        leaf => out.push((prefix.to_string(), serde_json::to_string(leaf)?)),
    }
    Ok(())
}

fn insert(root: &mut Value, path: &str, leaf: Value) -> Result<()> {
    let bad = || Error::Format(format!("inconsistent report path {path:?}"));
    let segs: Vec<&str> = path.strip_prefix('/').ok_or_else(bad)?.split('/').collect();
    let mut cur = root;
    for (n, seg) in segs.iter().enumerate() {
        let last = n + 1 == segs.len();
        let fresh = || if last { leaf.clone() } else { Value::Null };
        if let Some(idx) = seg.strip_prefix('#') {
            let i: usize = idx.parse().map_err(|_| bad())?;
            if cur.is_null() {
                *cur = Value::Array(Vec::new());
            }
            let arr = cur.as_array_mut().ok_or_else(bad)?;
            if i == arr.len() {
                arr.push(fresh());
            } else if i > arr.len() || last {
                return Err(bad());
            }
            cur = &mut arr[i];
        } else {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            }
            let obj = cur.as_object_mut().ok_or_else(bad)?;
            let key = unescape(seg);
            if last && obj.contains_key(&key) {
                return Err(bad());
            }
            cur = obj.entry(key).or_insert_with(fresh);
        }
    }
    Ok(())
}

/// Long-format `key,value` CSV of every report field; values are JSON literals.
pub fn report_to_csv(report: &EvaluationReport) -> Result<String> {
    ensure_complete(report)?;
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(report)?, &mut rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn report_from_csv(text: &str) -> Result<EvaluationReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut root = Value::Null;
    for rec in r.records() {
        let rec = rec?;
        let (k, v) = (rec.get(0).unwrap_or_default(), rec.get(1).unwrap_or_default());
        insert(&mut root, k, serde_json::from_str(v)?)?;
    }
    Ok(serde_json::from_value(root)?)
}

/// Reliability-diagram table: one row per bin.
pub fn calibration_csv(report: &EvaluationReport) -> Result<Option<String>> {
    let Some(c) = &report.calibration else { return Ok(None) };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_low", "bin_high", "count", "confidence", "accuracy"])?;
    for b in 0..c.counts.len() {
        w.write_record([
            c.edges[b].to_string(),
            c.edges[b + 1].to_string(),
            c.counts[b].to_string(),
            c.confidence[b].to_string(),
            c.accuracy[b].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(Some(String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?))
}

fn contexts_in(reports: &[EvaluationReport]) -> Vec<ContextTag> {
    let mut set = BTreeSet::new();
    for r in reports {
        for c in ContextTag::ALL {
            if r.mean.contains_key(&format!("{c}/accuracy")) {
                set.insert(c);
            }
        }
    }
    set.into_iter().collect()
}

fn cell(v: Option<&f64>, ece: bool) -> String {
    match v {
        Some(x) if ece => format!("{x:.1e}"),
        Some(x) => format!("{x:.3}"),
        None => "--".into(),
    }
}

/// One row per report. Classification: `Acc`, `F1`, `ECE` for each context
/// and overall. Regression: one row per target with `RMSE` and `MAE` per report.
pub fn markdown_table(reports: &[EvaluationReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no reports to tabulate".into()))?;
    for r in reports {
        ensure_complete(r)?;
    }
    let mut s = String::new();
    match &first.config.task {
        Task::Classification => {
            let ctx = contexts_in(reports);
            let groups: Vec<(String, String)> = ctx
                .iter()
                .map(|c| (c.as_str().to_uppercase(), format!("{c}/")))
                .chain(std::iter::once(("ALL".to_string(), String::new())))
                .collect();
            s.push_str("| Model |");
            for (name, _) in &groups {
                let _ = write!(s, " {name} Acc | {name} F1 | {name} ECE |");
            }
            s.push_str("\n|---|");
            s.push_str(&"---:|".repeat(3 * groups.len()));
            s.push('\n');
            for r in reports {
                let _ = write!(s, "| {} |", r.strategy.label());
                for (_, p) in &groups {
                    let _ = write!(
                        s,
                        " {} | {} | {} |",
                        cell(r.mean.get(&format!("{p}accuracy")), false),
                        cell(r.mean.get(&format!("{p}macro_f1")), false),
                        cell(r.mean.get(&format!("{p}ece")), true)
                    );
                }
                s.push('\n');
            }
        }
        Task::Regression { .. } => {
            s.push_str("| Target |");
            for r in reports {
                let _ = write!(s, " {0} RMSE | {0} MAE |", r.strategy.label());
            }
            s.push_str("\n|---|");
            s.push_str(&"---:|".repeat(2 * reports.len()));
            s.push('\n');
            for name in first.config.task.target_names() {
                let _ = write!(s, "| {name} |");
                for r in reports {
                    let _ = write!(
                        s,
                        " {} | {} |",
                        cell(r.mean.get(&format!("rmse/{name}")), false),
                        cell(r.mean.get(&format!("mae/{name}")), false)
                    );
                }
                s.push('\n');
            }
        }
    }
    Ok(s)
}

/// Train context per row, test context per column, `--` on the diagonal.
pub fn transfer_markdown(m: &TransferMatrix) -> String {
    let mut s = String::from("| Train \\ Test |");
    for c in &m.contexts {
        let _ = write!(s, " {} |", c.as_str().to_uppercase());
    }
    s.push_str(" In-context CV |\n|---|");
    s.push_str(&"---:|".repeat(m.contexts.len() + 1));
    s.push('\n');
    for (i, c) in m.contexts.iter().enumerate() {
        let _ = write!(s, "| {} |", c.as_str().to_uppercase());
        for v in &m.cells[i] {
            let _ = write!(s, " {} |", cell(v.as_ref(), false));
        }
        let _ = writeln!(s, " {:.3} |", m.in_context[i]);
    }
    s
}

fn write_file(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `report` into `dir` in `format`; the calibration bin table is
/// written next to it whenever it exists.
pub fn emit_report(report: &EvaluationReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_complete(report)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    match format {
        ReportFormat::Json => out.push(write_file(dir.join("report.json"), &report_to_json(report)?)?),
        ReportFormat::Csv => out.push(write_file(dir.join("report.csv"), &report_to_csv(report)?)?),
        ReportFormat::Markdown => {
            out.push(write_file(dir.join("report.md"), &markdown_table(std::slice::from_ref(report))?)?)
        }
    }
    if let Some(c) = calibration_csv(report)? {
        out.push(write_file(dir.join("calibration.csv"), &c)?);
    }
    Ok(out)
}
