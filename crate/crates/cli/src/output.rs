//! Output directories, provenance records and artifact writers.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dpae_autograd::Tensor;
use dpae_core::profile::ExperimentConfig;
use serde::Serialize;

use crate::Failure;

pub const OUTPUT_ROOT_ENV: &str = "DPAE_OUTPUT_ROOT";
const LOCK_FILE: &str = ".lock";

/// Relative output paths resolve against `DPAE_OUTPUT_ROOT` when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        let path = resolve_output(path);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { path, lock }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::Io(format!(
                "{} is locked by another command (remove {} if it is stale)",
                path.display(),
                lock.display()
            ))
            .into()),
            Err(e) => Err(e).with_context(|| format!("locking {}", path.display())),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Provenance embedded in every artifact. Output locations are left out so
/// that reruns into different directories stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub seed: u64,
    pub args: serde_json::Value,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn new(command: &'static str, args: serde_json::Value, config: &ExperimentConfig) -> Self {
        Self {
            command,
            seed: config.seed,
            args,
            config: config.clone(),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run record serializes")
    }

    pub fn csv_comment(&self) -> String {
        format!("# run={}\n", serde_json::to_string(self).expect("run record serializes"))
    }
}

#[derive(Serialize)]
struct WithRun<'a, T: Serialize> {
    run: &'a RunRecord,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with the run record as the leading `run` field.
pub fn write_json<T: Serialize>(path: &Path, run: &RunRecord, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&WithRun { run, body })?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// CSV with a `# run=` comment line, a header row and the given rows.
pub fn write_csv(path: &Path, run: &RunRecord, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = run.csv_comment();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// One row per time step, one column per channel.
pub fn write_matrix(path: &Path, run: &RunRecord, names: &[String], m: &Tensor) -> Result<()> {
    let rows = m.data().chunks(m.cols()).map(|r| r.iter().map(f64::to_string).collect());
    write_csv(path, run, names, rows)
}

pub fn number_row(values: &[f64]) -> Vec<String> {
    values.iter().map(f64::to_string).collect()
}

/// Plain-text table line for terminal summaries.
pub fn summary_line(fields: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            s.push_str("  ");
        }
        let _ = write!(s, "{k}={v}");
    }
    s
}
