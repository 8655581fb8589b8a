//! Per-figure CSV tables and SVG line plots built from sweep directories.
//!
//! Every table has three columns: a series label, an x value and a y value,
//! with the header naming the axes. Plots are rendered from the CSV text
//! alone, so regenerating a plot from the same table gives the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::selftrain::records::{read_records, IterationRecord};

use super::sweep::{collect_summaries, RunSummary, LR_SWEEP_DIR, SIZE_SWEEP_DIR};

pub const REPORT_DIR: &str = "report";

/// Median of the finite values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// A figure table: `(series, x, y)` rows under a `series,<x>,<y>` header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<(String, f64, f64)>,
}

impl Table {
    pub fn new(x_label: &str, y_label: &str) -> Self {
        Table {
            x_label: x_label.into(),
            y_label: y_label.into(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("series,{},{}\n", self.x_label, self.y_label);
        for (series, x, y) in &self.rows {
            writeln!(s, "{series},{x},{y}").expect("string write");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("figure table is empty".into()))?
            .split(',')
            .collect();
        if head.len() != 3 || head[0] != "series" {
            return Err(Error::Format(format!("unexpected figure header {head:?}")));
        }
        let mut t = Table::new(head[1], head[2]);
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("figure table line {}: {line:?}", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            let x = f[1].parse().map_err(|_| bad())?;
            let y = f[2].parse().map_err(|_| bad())?;
            t.rows.push((f[0].to_string(), x, y));
        }
        Ok(t)
    }

    /// Series in order of first appearance.
    pub fn series(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for (name, x, y) in &self.rows {
            match out.iter_mut().find(|(n, _)| n == name) {
                Some((_, pts)) => pts.push((*x, *y)),
                None => out.push((name.clone(), vec![(*x, *y)])),
            }
        }
        out
    }
}

/// A run's identity plus its records.
#[derive(Clone, Debug)]
pub struct RunData {
    pub summary: RunSummary,
    pub records: Vec<IterationRecord>,
}

pub fn load_runs(sweep_dir: &Path) -> Result<Vec<RunData>> {
    collect_summaries(sweep_dir)?
        .into_iter()
        .map(|summary| {
            let (_, records) =
                read_records(&sweep_dir.join(&summary.run_id).join("records.csv"))?;
            Ok(RunData { summary, records })
        })
        .collect()
}

type GroupKey = (String, u32);

fn group_by_lr(runs: &[RunData]) -> BTreeMap<GroupKey, Vec<&RunData>> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.summary.preset.clone(), r.summary.learning_rate.to_bits()))
            .or_default()
            .push(r);
    }
    groups
}

/// Per-iteration median across runs of `value(record)`, over the runs that
/// reached that iteration and have a value there.
fn median_series(runs: &[&RunData], value: impl Fn(&IterationRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut by_iter: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for rec in &r.records {
            if let Some(v) = value(rec) {
                by_iter.entry(rec.iteration).or_default().push(v);
            }
        }
    }
    by_iter
        .into_iter()
        .filter_map(|(it, vals)| median(&vals).map(|m| (it as f64, m)))
        .collect()
}

fn lr_label(preset: &str, bits: u32) -> String {
    format!("{preset} lr={:e}", f32::from_bits(bits))
}

/// Learning-rate figure: validation loss on the first corpus and training
/// loss per learning rate, medians across seeds.
pub fn lr_figure(runs: &[RunData]) -> Table {
    let mut t = Table::new("step", "loss");
    for ((preset, bits), group) in group_by_lr(runs) {
        let label = lr_label(&preset, bits);
        let primary = group[0].summary.corpora.first().cloned().unwrap_or_default();
        for (x, y) in median_series(&group, |r| r.val_losses.first().copied().flatten()) {
            t.rows.push((format!("{label} val_{primary}"), x, y));
        }
        for (x, y) in median_series(&group, |r| Some(r.train_loss())) {
            t.rows.push((format!("{label} train"), x, y));
        }
    }
    t
}

/// Dataset figure: validation loss on every corpus per learning rate.
pub fn dataset_figure(runs: &[RunData]) -> Table {
    let mut t = Table::new("step", "loss");
    for ((preset, bits), group) in group_by_lr(runs) {
        let label = lr_label(&preset, bits);
        for (c, name) in group[0].summary.corpora.iter().enumerate() {
            for (x, y) in median_series(&group, |r| r.val_losses.get(c).copied().flatten()) {
                t.rows.push((format!("{label} val_{name}"), x, y));
            }
        }
    }
    t
}

/// Size figure: median collapse iteration (non-collapsed runs counted as
/// `max_iters + 1`) against parameter count, one point per preset.
pub fn size_figure(summaries: &[RunSummary]) -> Table {
    let mut t = Table::new("params", "collapse_iteration");
    let mut groups: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.error.is_none()) {
        groups
            .entry((s.params, s.preset.clone()))
            .or_default()
            .push(s.collapse_rank() as f64);
    }
    for ((params, _), ranks) in groups {
        if let Some(m) = median(&ranks) {
            t.rows.push(("median".into(), params as f64, m));
        }
    }
    t
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders a line plot of every series in `table`.
pub fn render_svg(title: &str, table: &Table) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const L: f64 = 70.0;
    const R: f64 = 220.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let series = table.series();
    let (x0, x1) = range(table.rows.iter().map(|r| r.1));
    let (y0, y1) = range(table.rows.iter().map(|r| r.2));
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let mut w = |line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    w(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    ));
    w(format!(r#"<rect width="{W}" height="{H}" fill="white"/>"#));
    w(format!(
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (W - R + L) / 2.0,
        escape(title)
    ));
    w(format!(
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    ));
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (gx, gy) = (px(xv), py(yv));
        w(format!(
            r#"<text x="{gx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - B + 18.0,
            tick(xv)
        ));
        w(format!(
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            L - 6.0,
            gy + 4.0,
            tick(yv)
        ));
        w(format!(
            r##"<path d="M{L} {gy:.2} H{}" stroke="#dddddd"/>"##,
            W - R
        ));
    }
    w(format!(
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (W - R + L) / 2.0,
        H - 12.0,
        escape(&table.x_label)
    ));
    w(format!(
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (H - B + T) / 2.0,
        (H - B + T) / 2.0,
        escape(&table.y_label)
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if i / PALETTE.len() % 2 == 1 {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        let points: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if pts.len() == 1 {
            w(format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(pts[0].0),
                py(pts[0].1)
            ));
        } else {
            w(format!(
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                points.join(" ")
            ));
        }
        let ly = T + 10.0 + 16.0 * i as f64;
        w(format!(
            r#"<path d="M{} {ly} h18" stroke="{color}" stroke-width="2"{dash}/>"#,
            W - R + 12.0
        ));
        w(format!(
            r#"<text x="{}" y="{}">{}</text>"#,
            W - R + 34.0,
            ly + 4.0,
            escape(name)
        ));
    }
    w("</svg>".into());
    s
}

/// Writes `<stem>.csv` and `<stem>.svg` (rendered from the CSV text).
pub fn write_figure(dir: &Path, stem: &str, title: &str, table: &Table) -> Result<Vec<PathBuf>> {
    let csv = table.to_csv();
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = dir.join(format!("{stem}.svg"));
    let svg = render_svg(title, &Table::from_csv(&csv)?);
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok(vec![csv_path, svg_path])
}

/// Emits the learning-rate, size and dataset figures for the sweeps found
/// under `out_root` into `out_root/report`. Missing sweeps give tables with
/// only a header.
pub fn emit_report(out_root: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_root.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let lr_runs = load_runs(&out_root.join(LR_SWEEP_DIR))?;
    let size = collect_summaries(&out_root.join(SIZE_SWEEP_DIR))?;
    let mut files = Vec::new();
    files.extend(write_figure(
        &dir,
        "lr_sweep",
        "Validation and training loss per learning rate",
        &lr_figure(&lr_runs),
    )?);
    files.extend(write_figure(
        &dir,
        "size_sweep",
        "Collapse iteration against model size",
        &size_figure(&size),
    )?);
    files.extend(write_figure(
        &dir,
        "datasets",
        "Validation loss per evaluation corpus",
        &dataset_figure(&lr_runs),
    )?);
    Ok(files)
}
