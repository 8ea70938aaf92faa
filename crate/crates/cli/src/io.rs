use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use judgekit_core::datapipe::{read_jsonl, write_jsonl, DataError, ReadMode, ReadOutcome};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn is_stdio(p: &Option<PathBuf>) -> bool {
    p.as_deref().is_none_or(|p| p == Path::new("-"))
}

/// Rejects a missing input file, an output whose directory does not exist,
/// and an output that would overwrite an input.
pub fn check_paths(inputs: &[&Option<PathBuf>], outputs: &[&Option<PathBuf>]) -> Result<()> {
    let mut resolved_inputs = Vec::new();
    for p in inputs.iter().filter(|p| !is_stdio(p)) {
        let p = p.as_ref().expect("not stdio");
        let canon = p.canonicalize().with_context(|| format!("cannot open input {}", p.display()))?;
        resolved_inputs.push(canon);
    }
    for p in outputs.iter().filter(|p| !is_stdio(p)) {
        let p = p.as_ref().expect("not stdio");
        let parent = match p.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let dir = parent
            .canonicalize()
            .with_context(|| format!("output directory {} does not exist", parent.display()))?;
        let target = dir.join(p.file_name().context("output path has no file name")?);
        if resolved_inputs.contains(&target) {
            bail!("refusing to overwrite input file {}", p.display());
        }
    }
    Ok(())
}

pub fn reader(path: &Option<PathBuf>) -> Result<Box<dyn BufRead>> {
    if is_stdio(path) {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let p = path.as_ref().expect("not stdio");
    let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

pub fn read_all(path: &Option<PathBuf>) -> Result<String> {
    let mut s = String::new();
    reader(path)?.read_to_string(&mut s)?;
    Ok(s)
}

pub fn writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    if is_stdio(path) {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let p = path.as_ref().expect("not stdio");
    let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

pub fn read_records<T: DeserializeOwned>(
    path: &Option<PathBuf>,
    lenient: bool,
    check: impl Fn(&T) -> Result<(), DataError>,
) -> Result<Vec<T>> {
    let mode = if lenient { ReadMode::Lenient } else { ReadMode::Strict };
    let ReadOutcome { records, skipped } = read_jsonl(reader(path)?, mode, check)?;
    for (line, msg) in &skipped {
        eprintln!("skipped line {line}: {msg}");
    }
    if !skipped.is_empty() {
        eprintln!("skipped {} malformed line(s)", skipped.len());
    }
    Ok(records)
}

pub fn write_records<T: Serialize>(path: &Option<PathBuf>, records: &[T]) -> Result<()> {
    write_jsonl(writer(path)?, records)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
