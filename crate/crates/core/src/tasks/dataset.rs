//! Line-delimited `{"prompt", "response"}` datasets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TaskInstance;
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub prompt: String,
    pub response: String,
}

/// Split sizes for `n` items: `round(n * r)` for every split but the last,
/// which takes the remainder.
pub fn split_counts(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::Usage(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("split ratios sum to {total}, not 1")));
    }
    let mut counts: Vec<usize> = ratios[..ratios.len() - 1]
        .iter()
        .map(|&r| (n as f64 * r).round() as usize)
        .collect();
    let used: usize = counts.iter().sum();
    if used > n {
        return Err(Error::Usage(format!(
            "split ratios {ratios:?} overflow {n} items"
        )));
    }
    counts.push(n - used);
    Ok(counts)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Shuffle instances by `seed` and write one JSONL file per split.
/// Instances sharing an identity always land in the same split, so splits
/// are disjoint by identity. Returns the record count per split.
pub fn emit_dataset<I: TaskInstance>(
    instances: &[I],
    ratios: &[f64],
    paths: &[PathBuf],
    seed: u64,
) -> Result<Vec<usize>> {
    if ratios.len() != paths.len() {
        return Err(Error::Usage(format!(
            "{} split ratios but {} output paths",
            ratios.len(),
            paths.len()
        )));
    }
    let mut groups: Vec<Vec<&I>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for inst in instances {
        let slot = *index.entry(inst.identity()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(inst);
    }
    let counts = split_counts(groups.len(), ratios)?;
    RandomStream::new(seed)
        .fork_named("emit_dataset")
        .shuffle(&mut groups);

    let mut written = Vec::with_capacity(paths.len());
    let mut rest = groups.as_slice();
    for (path, &count) in paths.iter().zip(&counts) {
        let (split, tail) = rest.split_at(count);
        rest = tail;
        let records: Vec<Record> = split
            .iter()
            .flatten()
            .map(|inst| Record {
                prompt: inst.prompt_text(),
                response: inst.response_text(),
            })
            .collect();
        write_records(path, &records)?;
        written.push(records.len());
    }
    Ok(written)
}
