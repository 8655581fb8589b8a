//! Transcripts of decoded samples at key iterations of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::selftrain::metrics::distinct_ngram_ratio;
use crate::selftrain::records::{read_records, sample_file_name};
use crate::selftrain::StopReason;

pub const TRANSCRIPT_FILE: &str = "transcript.md";

/// Iterations shown by default; anything past the last record is dropped and
/// the last record is always included.
pub const KEY_ITERATIONS: [u64; 3] = [0, 50, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptRow {
    pub iteration: u64,
    /// Decoded sample, `None` when the sample file is missing.
    pub text: Option<String>,
    /// Recomputed from the stored sample bytes.
    pub distinct_4gram_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub run_id: String,
    pub stop_reason: Option<StopReason>,
    pub rows: Vec<TranscriptRow>,
}

/// `{0, 50, 100, last}` clamped to `0..=last`, sorted and deduplicated.
pub fn transcript_iterations(last: u64) -> Vec<u64> {
    let mut its: Vec<u64> = KEY_ITERATIONS.iter().copied().filter(|&i| i <= last).collect();
    its.push(last);
    its.dedup();
    its
}

fn fence_for(text: &str) -> String {
    let mut longest = 0;
    let mut run = 0;
    for c in text.chars() {
        run = if c == '`' { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    "`".repeat((longest + 1).max(3))
}

impl Transcript {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# Transcript of {}\n", self.run_id).expect("string write");
        let reason = self.stop_reason.map_or("unfinished", StopReason::as_str);
        writeln!(s, "Stop reason: {reason}\n").expect("string write");
        for r in &self.rows {
            writeln!(s, "## Iteration {}\n", r.iteration).expect("string write");
            match (&r.text, r.distinct_4gram_ratio) {
                (Some(t), Some(ratio)) => {
                    let fence = fence_for(t);
                    writeln!(s, "distinct 4-gram ratio: {ratio:.4}\n").expect("string write");
                    writeln!(s, "{fence}text\n{t}\n{fence}\n").expect("string write");
                }
                _ => writeln!(s, "(sample missing)\n").expect("string write"),
            }
        }
        s
    }
}

/// Assembles the samples at [`transcript_iterations`] of a run directory
/// into `transcript.md` inside it. Missing samples are noted in place.
pub fn run_transcript_capture(run_dir: &Path) -> Result<(PathBuf, Transcript)> {
    let (_, records) = read_records(&run_dir.join("records.csv"))?;
    let last = records
        .last()
        .ok_or_else(|| Error::Format(format!("{}: run has no records", run_dir.display())))?;
    let stop_reason = match fs::read_to_string(run_dir.join("status")) {
        Ok(text) => text
            .lines()
            .find_map(|l| l.strip_prefix("stop_reason="))
            .map(StopReason::parse)
            .transpose()?,
        Err(_) => None,
    };
    let rows = transcript_iterations(last.iteration)
        .into_iter()
        .map(|it| {
            let path = run_dir.join(sample_file_name(it));
            match fs::read(&path) {
                Ok(bytes) => {
                    let ids: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
                    TranscriptRow {
                        iteration: it,
                        text: Some(String::from_utf8_lossy(&bytes).into_owned()),
                        distinct_4gram_ratio: Some(distinct_ngram_ratio(&ids, 4)),
                    }
                }
                Err(_) => TranscriptRow {
                    iteration: it,
                    text: None,
                    distinct_4gram_ratio: None,
                },
            }
        })
        .collect();
    let t = Transcript {
        run_id: run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        stop_reason,
        rows,
    };
    let out = run_dir.join(TRANSCRIPT_FILE);
    fs::write(&out, t.to_markdown()).map_err(|e| Error::io(&out, e))?;
    Ok((out, t))
}
