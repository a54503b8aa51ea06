//! Run artifacts on disk and the cross-run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Method;
use super::lifelong::{shared_fraction, LifelongRun};
use super::metrics::{average_score, fkt, mean_std};
use crate::error::{DmeaError, Result};
use crate::selection::similarity_csv;
use crate::taskgen::{SuiteKind, TaskId};

pub const RUN_SCHEMA: &str = "dmea-run/1";
pub const STANDALONE_SCHEMA: &str = "dmea-standalone/1";
pub const REPORT_SCHEMA: &str = "dmea-report/1";

/// How much a later task reused an earlier task of the same family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReusePair {
    pub earlier: String,
    pub later: String,
    pub fraction: f64,
}

/// Contents of a run's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub suite: SuiteKind,
    pub method: Method,
    pub seed: u64,
    pub order: Vec<String>,
    pub families: Vec<String>,
    /// `exact_match[i][j]`: task `j` after learning task `i`.
    pub exact_match: Vec<Vec<f64>>,
    pub token_accuracy: Vec<Vec<f64>>,
    pub average_per_step: Vec<f64>,
    pub final_average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standalone: Option<Vec<f64>>,
    /// Forward transfer at steps 2..=T; empty without standalone scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fkt: Vec<f64>,
    pub selected: Vec<Vec<u32>>,
    pub reused_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub same_family_reuse: Vec<ReusePair>,
    pub frozen_module_checks: usize,
    pub seconds: f64,
}

impl RunSummary {
    pub fn from_run(run: &LifelongRun, suite: SuiteKind, standalone: Option<&BTreeMap<TaskId, f64>>) -> Result<RunSummary> {
        let rows = &run.results.rows;
        let exact_match: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|s| s.exact_match).collect()).collect();
        let token_accuracy = rows.iter().map(|r| r.iter().map(|s| s.token_accuracy).collect()).collect();
        let average_per_step = exact_match.iter().map(|r| average_score(r)).collect::<Result<Vec<_>>>()?;
        let standalone = standalone.map(|s| run.standalone_in_order(s)).transpose()?;
        let fkt_steps = match &standalone {
            Some(d) => (2..=rows.len())
                .map(|t| fkt(&run.results.diagonal(), d, t))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mut same_family_reuse = Vec::new();
        for (i, later) in run.records.iter().enumerate() {
            if let Some(earlier) = run.records[..i].iter().find(|r| r.family == later.family) {
                same_family_reuse.push(ReusePair {
                    earlier: earlier.task.0.clone(),
                    later: later.task.0.clone(),
                    fraction: shared_fraction(&earlier.selected, &later.selected),
                });
            }
        }
        Ok(RunSummary {
            schema: RUN_SCHEMA.into(),
            suite,
            method: run.method.method,
            seed: run.seed,
            order: run.order.iter().map(|t| t.0.clone()).collect(),
            families: run.records.iter().map(|r| r.family.clone()).collect(),
            final_average: *average_per_step.last().expect("non-empty run"),
            exact_match,
            token_accuracy,
            average_per_step,
            standalone,
            fkt: fkt_steps,
            selected: run.records.iter().map(|r| r.selected.iter().map(|m| m.0).collect()).collect(),
            reused_layers: run.records.iter().map(|r| r.reused_layers).collect(),
            same_family_reuse,
            frozen_module_checks: run.integrity.iter().map(|c| c.frozen_modules).sum(),
            seconds: run.seconds,
        })
    }

    /// Score of the first task after the first and after the last step.
    pub fn first_task_drop(&self) -> f64 {
        self.exact_match[0][0] - self.exact_match.last().map(|r| r[0]).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandaloneFile {
    pub schema: String,
    pub suite: SuiteKind,
    pub seed: u64,
    pub scores: BTreeMap<String, f64>,
}

impl StandaloneFile {
    pub fn new(suite: SuiteKind, seed: u64, scores: &BTreeMap<TaskId, f64>) -> StandaloneFile {
        StandaloneFile {
            schema: STANDALONE_SCHEMA.into(),
            suite,
            seed,
            scores: scores.iter().map(|(k, v)| (k.0.clone(), *v)).collect(),
        }
    }

    pub fn scores(&self) -> BTreeMap<TaskId, f64> {
        self.scores.iter().map(|(k, v)| (TaskId(k.clone()), *v)).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DmeaError::Config(format!("{}: {e}", path.display())))
}

pub fn write_standalone(dir: &Path, file: &StandaloneFile) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("standalone.json"), file)
}

/// Writes everything a run produced under `dir`.
pub fn write_run(dir: &Path, run: &LifelongRun, summary: &RunSummary) -> Result<()> {
    let traces = dir.join("traces");
    let plots = dir.join("plots");
    std::fs::create_dir_all(&traces)?;
    std::fs::create_dir_all(&plots)?;
    write_json(&dir.join("summary.json"), summary)?;
    std::fs::write(dir.join("results.csv"), run.results.to_csv())?;
    write_json(&dir.join("routing.json"), &run.pool.routing_table())?;
    for r in &run.records {
        let stem = format!("step{}_{}", r.step, r.task);
        write_json(&traces.join(format!("{stem}.json")), r)?;
        std::fs::write(traces.join(format!("{stem}_adaptation.csv")), r.adaptation.log_csv())?;
    }
    write_json(&traces.join("integrity.json"), &run.integrity)?;
    if !run.similarity.is_empty() {
        std::fs::write(dir.join("similarity.csv"), similarity_csv(&run.similarity))?;
    }
    if !run.bases.bases.is_empty() {
        run.bases.save(&dir.join("bases"))?;
    }
    let series: Vec<Series> = summary
        .order
        .iter()
        .enumerate()
        .map(|(j, task)| Series {
            name: task.clone(),
            points: (j..summary.exact_match.len())
                .map(|i| ((i + 1) as f64, summary.exact_match[i][j]))
                .collect(),
        })
        .collect();
    let title = format!("{} on {} (seed {})", summary.method, summary.suite.as_str(), summary.seed);
    std::fs::write(plots.join("scores.svg"), line_chart(&title, "step", "exact match", &series, Some((0.0, 100.0))))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let (mean, std) = mean_std(values);
        MeanStd {
            mean,
            std,
            n: values.len(),
        }
    }
}

/// One (suite, method) row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub suite: SuiteKind,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_average: MeanStd,
    pub average_per_step: Vec<MeanStd>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fkt_per_step: Vec<MeanStd>,
    pub first_task_drop: MeanStd,
    /// Mean fraction of layers reused per task after the first.
    pub reuse_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub same_family_reuse: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub runs: usize,
    pub groups: Vec<MethodAggregate>,
}

fn collect_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(&path, name, out)?;
        } else if path.file_name().is_some_and(|n| n == name) {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads every finished run (and standalone file) under `dir`.
pub fn load_runs(dir: &Path) -> Result<(Vec<RunSummary>, Vec<StandaloneFile>)> {
    let mut summaries = Vec::new();
    collect_files(dir, "summary.json", &mut summaries)?;
    let mut runs = Vec::new();
    for p in summaries {
        let v: serde_json::Value = read_json(&p)?;
        if v.get("schema").and_then(|s| s.as_str()) == Some(RUN_SCHEMA) {
            runs.push(serde_json::from_value(v).map_err(|e| DmeaError::Config(format!("{}: {e}", p.display())))?);
        }
    }
    let mut files = Vec::new();
    collect_files(dir, "standalone.json", &mut files)?;
    let standalone = files.iter().map(|p| read_json(p)).collect::<Result<Vec<StandaloneFile>>>()?;
    Ok((runs, standalone))
}

/// Aggregates runs per (suite, method). Runs lacking transfer numbers pick
/// them up from a standalone file with the same suite and seed.
pub fn aggregate(runs: &[RunSummary], standalone: &[StandaloneFile]) -> Result<Report> {
    if runs.is_empty() {
        return Err(DmeaError::InvalidInput("no finished runs to report".into()));
    }
    let mut groups: BTreeMap<(&str, Method), Vec<RunSummary>> = BTreeMap::new();
    for r in runs {
        let mut r = r.clone();
        if r.fkt.is_empty() {
            if let Some(s) = standalone.iter().find(|s| s.suite == r.suite && s.seed == r.seed) {
                let d = r
                    .order
                    .iter()
                    .map(|t| s.scores.get(t).copied())
                    .collect::<Option<Vec<f64>>>();
                if let Some(d) = d {
                    let diag: Vec<f64> = (0..r.order.len()).map(|i| r.exact_match[i][i]).collect();
                    r.fkt = (2..=diag.len()).map(|t| fkt(&diag, &d, t)).collect::<Result<_>>()?;
                    r.standalone = Some(d);
                }
            }
        }
        groups.entry((r.suite.as_str(), r.method)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((_, method), rs) in groups {
        let steps = rs.iter().map(|r| r.average_per_step.len()).min().unwrap_or(0);
        let column = |f: &dyn Fn(&RunSummary) -> f64| MeanStd::of(&rs.iter().map(f).collect::<Vec<_>>());
        let fkt_steps = if rs.iter().all(|r| r.fkt.len() + 1 >= steps && !r.fkt.is_empty()) {
            (0..steps.saturating_sub(1)).map(|i| column(&|r| r.fkt[i])).collect()
        } else {
            Vec::new()
        };
        let reuse: Vec<f64> = rs
            .iter()
            .flat_map(|r| {
                let layers = r.selected.first().map(|s| s.len()).unwrap_or(1).max(1) as f64;
                r.reused_layers.iter().skip(1).map(move |&n| n as f64 / layers)
            })
            .collect();
        let family: Vec<f64> = rs.iter().flat_map(|r| r.same_family_reuse.iter().map(|p| p.fraction)).collect();
        out.push(MethodAggregate {
            suite: rs[0].suite,
            method,
            seeds: rs.iter().map(|r| r.seed).collect(),
            final_average: column(&|r| r.final_average),
            average_per_step: (0..steps).map(|i| column(&|r| r.average_per_step[i])).collect(),
            fkt_per_step: fkt_steps,
            first_task_drop: column(&|r| r.first_task_drop()),
            reuse_rate: if reuse.is_empty() { 0.0 } else { reuse.iter().sum::<f64>() / reuse.len() as f64 },
            same_family_reuse: (!family.is_empty()).then(|| MeanStd::of(&family)),
        });
    }
    Ok(Report {
        schema: REPORT_SCHEMA.into(),
        runs: runs.len(),
        groups: out,
    })
}

/// Checks a parsed report against the documented layout.
pub fn validate_report(value: &serde_json::Value) -> Result<()> {
    let bad = |m: &str| Err(DmeaError::InvalidInput(format!("report schema: {m}")));
    if value.get("schema").and_then(|s| s.as_str()) != Some(REPORT_SCHEMA) {
        return bad("missing or wrong `schema`");
    }
    if !value.get("runs").is_some_and(|r| r.is_u64()) {
        return bad("`runs` must be a count");
    }
    let Some(groups) = value.get("groups").and_then(|g| g.as_array()) else {
        return bad("`groups` must be an array");
    };
    let is_stat = |v: &serde_json::Value| {
        v.get("mean").is_some_and(|x| x.is_number())
            && v.get("std").is_some_and(|x| x.is_number())
            && v.get("n").is_some_and(|x| x.is_u64())
    };
    for g in groups {
        for key in ["suite", "method"] {
            if !g.get(key).is_some_and(|v| v.is_string()) {
                return bad(&format!("group `{key}` must be a string"));
            }
        }
        if !g.get("seeds").is_some_and(|s| s.as_array().is_some_and(|a| a.iter().all(|x| x.is_u64()))) {
            return bad("`seeds` must be an array of integers");
        }
        for key in ["final_average", "first_task_drop"] {
            if !g.get(key).is_some_and(is_stat) {
                return bad(&format!("`{key}` must be a mean/std/n object"));
            }
        }
        for key in ["average_per_step", "fkt_per_step"] {
            match g.get(key) {
                None if key == "fkt_per_step" => {}
                Some(v) if v.as_array().is_some_and(|a| a.iter().all(is_stat)) => {}
                _ => return bad(&format!("`{key}` must be an array of mean/std/n objects")),
            }
        }
        if !g.get("reuse_rate").is_some_and(|v| v.is_number()) {
            return bad("`reuse_rate` must be a number");
        }
        if let Some(v) = g.get("same_family_reuse") {
            if !is_stat(v) {
                return bad("`same_family_reuse` must be a mean/std/n object");
            }
        }
    }
    if value.to_string().contains("null") {
        return bad("null values are not allowed");
    }
    Ok(())
}

/// One CSV row per (run, step, learned task).
pub fn results_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("suite,method,seed,step,after_task,task,exact_match,token_accuracy\n");
    for r in runs {
        for (i, row) in r.exact_match.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{:.4},{:.4}",
                    r.suite.as_str(),
                    r.method,
                    r.seed,
                    i + 1,
                    r.order[i],
                    r.order[j],
                    s,
                    r.token_accuracy[i][j]
                );
            }
        }
    }
    out
}

/// Reads finished runs under `input` and writes `summary.json`,
/// `results.csv` and per-suite plots under `output`.
pub fn report(input: &Path, output: &Path) -> Result<Report> {
    let (runs, standalone) = load_runs(input)?;
    let rep = aggregate(&runs, &standalone)?;
    let plots = output.join("plots");
    std::fs::create_dir_all(&plots)?;
    write_json(&output.join("summary.json"), &rep)?;
    std::fs::write(output.join("results.csv"), results_csv(&runs))?;
    let mut suites: Vec<SuiteKind> = rep.groups.iter().map(|g| g.suite).collect();
    suites.dedup();
    for suite in suites {
        let groups: Vec<&MethodAggregate> = rep.groups.iter().filter(|g| g.suite == suite).collect();
        let avg: Vec<Series> = groups
            .iter()
            .map(|g| Series {
                name: g.method.to_string(),
                points: g.average_per_step.iter().enumerate().map(|(i, s)| ((i + 1) as f64, s.mean)).collect(),
            })
            .collect();
        let title = format!("average exact match, {} suite", suite.as_str());
        std::fs::write(
            plots.join(format!("{}_average.svg", suite.as_str())),
            line_chart(&title, "step", "average exact match", &avg, Some((0.0, 100.0))),
        )?;
        let transfer: Vec<Series> = groups
            .iter()
            .filter(|g| !g.fkt_per_step.is_empty())
            .map(|g| Series {
                name: g.method.to_string(),
                points: g.fkt_per_step.iter().enumerate().map(|(i, s)| ((i + 2) as f64, s.mean)).collect(),
            })
            .collect();
        if !transfer.is_empty() {
            let title = format!("forward transfer, {} suite", suite.as_str());
            std::fs::write(
                plots.join(format!("{}_fkt.svg", suite.as_str())),
                line_chart(&title, "step", "FKT", &transfer, None),
            )?;
        }
    }
    Ok(rep)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A static line chart as an SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if let Some((a, b)) = y_range {
        (y0, y1) = (a.min(y0), b.max(y1));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0
        );
    }
    let steps = (x1 - x0).round() as usize;
    for i in 0..=steps.min(20) {
        let x = x0 + (x1 - x0) * i as f64 / steps.clamp(1, 20) as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(x),
            top + ph + 18.0,
            x.round()
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
