use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::CliError;

/// Create `path` and write the provenance comment line every CSV starts
/// with.
pub fn csv_writer(path: &Path, hash: &str, seed: u64) -> Result<BufWriter<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config_hash={hash} master_seed={seed}")?;
    Ok(w)
}

pub fn finish(mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
pub struct Provenance<'a> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub master_seed: u64,
    pub version: &'a str,
    pub field: Option<String>,
    pub probes_failed: Option<usize>,
    pub offset_fallbacks: Option<usize>,
}

impl<'a> Provenance<'a> {
    pub fn new(command: &'a str, config_hash: &'a str, master_seed: u64) -> Self {
        Self {
            command,
            config_hash,
            master_seed,
            version: env!("CARGO_PKG_VERSION"),
            field: None,
            probes_failed: None,
            offset_fallbacks: None,
        }
    }
}
