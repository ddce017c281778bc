//! Artifact plumbing: output-path resolution, experiment manifests and
//! small CSV helpers.
//!
//! Every command writes a `manifest.txt` into its output directory: plain
//! `key=value` lines followed by one `artifact=<sha256>  <name>` line per
//! declared file. The training log's checksum is computed over its
//! deterministic columns (the wall-time column varies run to run); all
//! other artifacts are hashed byte-for-byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qrvae::config::hex_digest;

/// Resolve an output directory against `QRVAE_OUT_ROOT` when relative.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("QRVAE_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Key-value pairs plus named artifacts, rendered deterministically.
pub struct Manifest {
    entries: Vec<(String, String)>,
    artifacts: Vec<(String, String)>, // (name, sha256)
}

impl Manifest {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Manifest {
            entries: vec![
                ("experiment".into(), experiment.to_string()),
                ("seed".into(), seed.to_string()),
            ],
            artifacts: Vec::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Record a file already written into `dir`, hashing its bytes.
    pub fn add_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))
            .with_context(|| format!("hashing artifact {name}"))?;
        self.artifacts.push((name.to_string(), hex_digest(&bytes)));
        Ok(())
    }

    /// Record an artifact whose checksum is computed over caller-provided
    /// content (used for the training log's deterministic columns).
    pub fn add_content(&mut self, name: &str, content: &str) {
        self.artifacts.push((name.to_string(), hex_digest(content.as_bytes())));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            writeln!(text, "{k}={v}").unwrap();
        }
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        for (name, digest) in &artifacts {
            writeln!(text, "artifact={digest}  {name}").unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), text).context("writing manifest.txt")?;
        Ok(())
    }
}

/// Write rows of `f64` values as CSV with the given header.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Write one labeled metric per row.
pub fn write_metrics(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("metric,value\n");
    for (name, value) in rows {
        writeln!(text, "{name},{value:.17e}").unwrap();
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
