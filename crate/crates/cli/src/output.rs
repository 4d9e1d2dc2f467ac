//! CSV artifacts with a trailing metadata footer.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::CliError;

/// Where a table goes: a file, or standard output for `-`.
#[derive(Debug, Clone)]
pub enum Sink {
    File(PathBuf),
    Stdout,
}

impl Sink {
    pub fn resolve(path: &Path, out_dir: Option<&Path>) -> Sink {
        if path == Path::new("-") {
            return Sink::Stdout;
        }
        match out_dir {
            Some(dir) if path.is_relative() => Sink::File(dir.join(path)),
            _ => Sink::File(path.to_path_buf()),
        }
    }
}

/// A table buffered in memory and written out in one piece with its footer.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
    notes: Vec<String>,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self { writer, notes: Vec::new() })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    /// Extra `# key=value` line placed before the standard footer.
    pub fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.notes.push(format!("# {key}={value}"));
    }

    pub fn finish(self, sink: &Sink, seed: u64, started: Instant) -> Result<(), CliError> {
        let mut body = self.writer.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        for n in &self.notes {
            writeln!(body, "{n}")?;
        }
        writeln!(body, "# seed={seed}")?;
        writeln!(body, "# version={}", env!("CARGO_PKG_VERSION"))?;
        writeln!(body, "# wall_time_s={:.3}", started.elapsed().as_secs_f64())?;
        match sink {
            Sink::Stdout => std::io::stdout().write_all(&body)?,
            Sink::File(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, body)?;
            }
        }
        Ok(())
    }
}

/// Shortest round-trip form, switching to exponent notation for tiny or huge
/// magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
