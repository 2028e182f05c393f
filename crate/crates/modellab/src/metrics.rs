//! Metrics files: JSON lines, one self-describing record per line. The
//! first line of every artifact is a manifest carrying the command, its
//! argument list, and the seed, so a file alone suffices to rerun the job
//! that produced it.

use std::path::Path;

use anyhow::Result;
use modellab_core::train::{StageReport, StepRecord, Variant};
use serde::{Deserialize, Serialize};

use crate::fsutil::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Record {
    /// First line of every metrics file.
    Manifest {
        command: String,
        args: Vec<String>,
        seed: u64,
        /// Hash of the full run plan; equal plans hash equal.
        fingerprint: u64,
    },
    Step(StepRecord),
    Eval {
        variant: Option<Variant>,
        seed: u64,
        accuracy: f32,
    },
    /// One greedy-decoded eval sample; `accuracy` is the mean of `correct`.
    Sample {
        index: usize,
        /// Content hash of the underlying grid.
        key: u64,
        predicted: Vec<usize>,
        expected: Vec<usize>,
        correct: bool,
    },
}

pub fn manifest(command: &str, args: &[String], seed: u64, fingerprint: u64) -> Record {
    Record::Manifest {
        command: command.to_string(),
        args: args.to_vec(),
        seed,
        fingerprint,
    }
}

/// Flattens a stage report into step records.
pub fn stage_records(report: &StageReport) -> impl Iterator<Item = Record> + '_ {
    report.steps.iter().cloned().map(Record::Step)
}

pub fn to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    atomic_write(path, to_jsonl(records)?.as_bytes())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
