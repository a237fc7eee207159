//! TSV evaluation reports.
//!
//! Quality rows follow the fixed column order (model, feature, phone purity,
//! cluster purity, PNMI). Probe and ablation reports carry probe accuracy;
//! ablation rows are one per (teacher, branch-setting) cell.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

#[derive(Debug, Clone)]
pub struct QualityRow {
    pub model: String,
    pub feature: String,
    pub phone_purity: f64,
    pub cluster_purity: f64,
    pub pnmi: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub model: String,
    pub feature: String,
    pub probe_acc: f64,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub teacher: String,
    pub alpha: f64,
    pub probe_acc: f64,
}

pub fn write_quality(path: &Path, rows: &[QualityRow]) -> Result<()> {
    let mut out = String::from("model\tfeature\tphone_purity\tcluster_purity\tpnmi\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.model, r.feature, r.phone_purity, r.cluster_purity, r.pnmi
        ));
    }
    fs::write(path, out).with_context(|| format!("writing report {}", path.display()))?;
    Ok(())
}

pub fn write_probe(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let mut out = String::from("model\tfeature\tprobe_acc\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.model, r.feature, r.probe_acc));
    }
    fs::write(path, out).with_context(|| format!("writing report {}", path.display()))?;
    Ok(())
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("model\tteacher\talpha\tprobe_acc\n");
    for r in rows {
        out.push_str(&format!(
            "cobert\t{}\t{}\t{}\n",
            r.teacher, r.alpha, r.probe_acc
        ));
    }
    fs::write(path, out).with_context(|| format!("writing report {}", path.display()))?;
    Ok(())
}

/// Generic TSV reader: (header fields, data rows).
pub fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{}: empty report", path.display()))?
        .split('\t')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split('\t').map(|s| s.to_string()).collect());
    }
    Ok((header, rows))
}
