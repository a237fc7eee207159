//! Run directories and the plain-text metrics log.
//!
//! Every subcommand writes into a fresh `--out` directory and refuses to
//! touch a non-empty one unless `--force` is given. Training runs lay out:
//! `config.snapshot`, `metrics.log`, `checkpoints/step_N/`; quantization
//! adds `codes/` and `codebooks/`; evaluation adds `report.tsv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cobert_core::objectives::LossReport;

/// Ensure `out` exists and is empty; with `force`, wipe whatever was there.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = out.is_file() || fs::read_dir(out)?.next().is_some();
        if occupied {
            if !force {
                bail!(
                    "output location {} already exists; pass --force to overwrite",
                    out.display()
                );
            }
            if out.is_file() {
                fs::remove_file(out)?;
            } else {
                fs::remove_dir_all(out)?;
            }
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

/// Refuse to overwrite a single output file unless forced.
pub fn prepare_out_file(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            bail!("output file {} already exists; pass --force to overwrite", out.display());
        }
        fs::remove_file(out)?;
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Append-only loss log: one `step, loss name, value` row per entry.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    /// Create a fresh log (truncating any existing file).
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path)
            .with_context(|| format!("creating metrics log {}", path.display()))?;
        Ok(MetricsLog { file })
    }

    /// Open an existing log for appending (resumed runs).
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening metrics log {}", path.display()))?;
        Ok(MetricsLog { file })
    }

    pub fn log(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        writeln!(self.file, "{step}, {name}, {value}")?;
        Ok(())
    }

    /// Log every loss a step produced, in the report's fixed name order.
    pub fn log_report(&mut self, step: u64, report: &LossReport) -> Result<()> {
        for (name, value) in report.named() {
            self.log(step, name, value)?;
        }
        Ok(())
    }
}

/// Parse a metrics log back into `(step, name, value)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, String, f64)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ", ").collect();
        if parts.len() != 3 {
            bail!("{} line {}: expected `step, name, value`", path.display(), lineno + 1);
        }
        let step = parts[0].trim().parse::<u64>().with_context(|| {
            format!("{} line {}: bad step `{}`", path.display(), lineno + 1, parts[0])
        })?;
        let value = parts[2].trim().parse::<f64>().with_context(|| {
            format!("{} line {}: bad value `{}`", path.display(), lineno + 1, parts[2])
        })?;
        rows.push((step, parts[1].to_string(), value));
    }
    Ok(rows)
}

/// Locate the highest-numbered `step_N` checkpoint under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(&dir)
        .with_context(|| format!("no checkpoints directory at {}", dir.display()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().into_string().unwrap_or_default();
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| anyhow::anyhow!("no step_N checkpoints under {}", dir.display()))
}
