//! File reading and writing shared by the commands. Numeric text uses Rust's
//! shortest round-trip float formatting, so identical values give identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use nbsynth::evidence::{parse_dataset, StudyRecord};
use nbsynth::sampler::Chain;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn read_dataset(path: &Path) -> CliResult<Vec<StudyRecord>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(parse_dataset(file)?)
}

fn create(path: &Path) -> CliResult<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Two whitespace-separated numeric columns, no header.
pub fn write_columns(path: &Path, a: &[f64], b: &[f64]) -> CliResult<()> {
    let mut w = create(path)?;
    let result = a.iter().zip(b).try_for_each(|(x, y)| writeln!(w, "{x}\t{y}")).and_then(|_| w.flush());
    result.map_err(|e| CliError::io(path, e))
}

/// One row per retained draw, headed by `iteration` and the parameter labels.
pub fn write_chain(path: &Path, names: &[String], chain: &Chain) -> CliResult<()> {
    let mut w = create(path)?;
    let result = (|| {
        writeln!(w, "iteration\t{}", names.join("\t"))?;
        for (it, row) in chain.retained_iterations.iter().zip(&chain.draws) {
            write!(w, "{it}")?;
            for v in row {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    result.map_err(|e| CliError::io(path, e))
}
