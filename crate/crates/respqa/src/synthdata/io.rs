//! Corpus file formats: one QAExample per JSON line (spectrogram inlined as
//! a flat float list with shape header), corpus spec as JSON.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use super::corpus::{Corpus, QAExample};
use super::spec::CorpusSpec;

pub fn write_examples_jsonl(path: &Path, examples: &[QAExample]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_examples_jsonl(path: &Path) -> io::Result<Vec<QAExample>> {
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

pub fn write_spec(path: &Path, spec: &CorpusSpec) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(spec)?.as_bytes())?;
    f.write_all(b"\n")
}

pub fn read_spec(path: &Path) -> io::Result<CorpusSpec> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Write all six splits into `dir` as `<split>.jsonl`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for name in Corpus::SPLIT_NAMES {
        write_examples_jsonl(&dir.join(format!("{name}.jsonl")), corpus.split(name).unwrap())?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, name: &str) -> io::Result<Vec<QAExample>> {
    read_examples_jsonl(&dir.join(format!("{name}.jsonl")))
}
