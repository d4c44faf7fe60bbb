//! Routing log records: one JSON line per example per stage.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingLogRecord {
    pub example_id: String,
    /// "audio" or "lang".
    pub stage: String,
    pub policy: String,
    pub probs: Vec<f64>,
    pub expert: usize,
    pub entropy: f64,
    pub step: u64,
    /// "train", "eval", or "forced".
    pub mode: String,
}

pub fn write_jsonl(path: &Path, records: &[RoutingLogRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl(path: &Path) -> io::Result<Vec<RoutingLogRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("routing.jsonl");
        let recs = vec![RoutingLogRecord {
            example_id: "ex-0".into(),
            stage: "audio".into(),
            policy: "fused".into(),
            probs: vec![0.25, 0.75],
            expert: 1,
            entropy: 0.56,
            step: 3,
            mode: "train".into(),
        }];
        write_jsonl(&path, &recs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].expert, 1);
        assert_eq!(back[0].stage, "audio");
    }
}
