//! Run manifests: resolved arguments and parameters recorded next to the
//! outputs of every subcommand as `key = value` lines. Re-invoking the
//! recorded `arg` lines reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub struct Manifest {
    command: String,
    entries: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    /// Captures the current process argv (minus the binary path).
    pub fn new(command: &str) -> Self {
        let mut m = Self {
            command: command.to_string(),
            entries: Vec::new(),
            started: Instant::now(),
        };
        m.push("command", command);
        for arg in std::env::args().skip(1) {
            m.push("arg", &arg);
        }
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_path(&mut self, key: &str, path: &Path) {
        self.push(key, path.display());
    }

    /// Writes `<command>.manifest` into the directory.
    pub fn write(mut self, dir: &Path) -> anyhow::Result<PathBuf> {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis().saturating_sub(self.started.elapsed().as_millis()))
            .unwrap_or(0);
        self.push("started_unix_ms", started_unix_ms);
        self.push("duration_ms", self.started.elapsed().as_millis());
        let mut text = String::from("# gridfuse run manifest\n");
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k} = {v}");
        }
        let path = dir.join(format!("{}.manifest", self.command));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
