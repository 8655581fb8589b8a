//! Per-iteration records and their CSV form.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a file back yields bit-identical values. Wall-clock time is kept out of
//! `records.csv` (it goes to `timing.csv`) so that reruns compare equal.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::metrics::CollapseMetrics;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 0-based; record `i` scores the sample drawn after `i` updates.
    pub iteration: u64,
    /// One entry per evaluation corpus, `None` on iterations skipped by the
    /// validation stride.
    pub val_losses: Vec<Option<f64>>,
    pub metrics: CollapseMetrics,
    pub clip_scale: f32,
    pub collapsed: bool,
    pub sample_file: String,
    /// Not persisted in `records.csv`.
    pub wall_ms: u64,
}

impl IterationRecord {
    pub fn train_loss(&self) -> f64 {
        self.metrics.train_loss
    }
}

pub fn sample_file_name(iteration: u64) -> String {
    format!("samples/iter_{iteration}.txt")
}

pub fn csv_header(corpora: &[String]) -> String {
    let mut cols = vec!["iter".to_string(), "train_loss".to_string()];
    cols.extend(corpora.iter().map(|c| format!("val_loss_{c}")));
    cols.extend(
        [
            "distinct_4gram_ratio",
            "max_token_fraction",
            "token_entropy",
            "clip_scale",
            "collapsed",
            "sample_file",
        ]
        .map(String::from),
    );
    cols.join(",")
}

pub fn csv_row(r: &IterationRecord) -> String {
    let mut cols = vec![r.iteration.to_string(), r.metrics.train_loss.to_string()];
    cols.extend(r.val_losses.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
    cols.push(r.metrics.distinct_4gram_ratio.to_string());
    cols.push(r.metrics.max_token_fraction.to_string());
    cols.push(r.metrics.token_entropy.to_string());
    cols.push(r.clip_scale.to_string());
    cols.push(u8::from(r.collapsed).to_string());
    cols.push(r.sample_file.clone());
    cols.join(",")
}

/// Appends records to `records.csv` and `timing.csv`, flushing after each
/// row so that a crash loses at most the iteration in flight.
pub struct RecordWriter {
    records: BufWriter<File>,
    timing: BufWriter<File>,
    dir: PathBuf,
}

impl RecordWriter {
    pub fn create(dir: &Path, corpora: &[String]) -> Result<Self> {
        fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(&p, e))
        };
        let mut w = RecordWriter {
            records: open("records.csv")?,
            timing: open("timing.csv")?,
            dir: dir.to_path_buf(),
        };
        let header = csv_header(corpora);
        w.line_records(&header)?;
        w.line_timing("iter,wall_ms")?;
        Ok(w)
    }

    fn line_records(&mut self, line: &str) -> Result<()> {
        let p = self.dir.join("records.csv");
        writeln!(self.records, "{line}")
            .and_then(|_| self.records.flush())
            .map_err(|e| Error::io(&p, e))
    }

    fn line_timing(&mut self, line: &str) -> Result<()> {
        let p = self.dir.join("timing.csv");
        writeln!(self.timing, "{line}")
            .and_then(|_| self.timing.flush())
            .map_err(|e| Error::io(&p, e))
    }

    /// Writes the raw sample bytes, then the record row.
    pub fn append(&mut self, r: &IterationRecord, sample: &[u8]) -> Result<()> {
        let p = self.dir.join(&r.sample_file);
        fs::write(&p, sample).map_err(|e| Error::io(&p, e))?;
        self.line_records(&csv_row(r))?;
        self.line_timing(&format!("{},{}", r.iteration, r.wall_ms))
    }
}

/// Parses a `records.csv`, returning the corpus names from the header and
/// the records (with `wall_ms` zero).
pub fn read_records(path: &Path) -> Result<(Vec<String>, Vec<IterationRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

pub fn parse_records(text: &str) -> Result<(Vec<String>, Vec<IterationRecord>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("records file is empty".into()))?
        .split(',')
        .collect();
    let corpora: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("val_loss_"))
        .map(String::from)
        .collect();
    if csv_header(&corpora) != header.join(",") {
        return Err(Error::Format(format!("unexpected records header {header:?}")));
    }
    let n = corpora.len();
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let bad = |what: &str| Error::Format(format!("records line {}: bad {what}", lineno + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad("column count"));
        }
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        let val_losses = (0..n)
            .map(|c| {
                let s = f[2 + c];
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad("val_loss"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let k = 2 + n;
        out.push(IterationRecord {
            iteration: f[0].parse().map_err(|_| bad("iter"))?,
            val_losses,
            metrics: CollapseMetrics {
                train_loss: num(1, "train_loss")?,
                distinct_4gram_ratio: num(k, "distinct_4gram_ratio")?,
                max_token_fraction: num(k + 1, "max_token_fraction")?,
                token_entropy: num(k + 2, "token_entropy")?,
            },
            clip_scale: f[k + 3].parse().map_err(|_| bad("clip_scale"))?,
            collapsed: match f[k + 4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("collapsed")),
            },
            sample_file: f[k + 5].to_string(),
            wall_ms: 0,
        });
    }
    Ok((corpora, out))
}
