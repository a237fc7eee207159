//! Corpus manifests: TSV rows of (utt_id, frames_path, phones_path,
//! codes_path?, wav_path?). Every row always has five tab-separated fields;
//! `-` marks an absent optional path. Relative paths resolve against the
//! manifest file's directory. Loading validates that utterance ids are
//! unique and every referenced file exists.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// One manifest row with paths resolved to the manifest's location.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub utt_id: String,
    pub frames_path: PathBuf,
    pub phones_path: PathBuf,
    pub codes_path: Option<PathBuf>,
    pub wav_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

/// Row content for writing; paths are written verbatim (the writer decides
/// whether they are relative to the manifest or absolute).
#[derive(Debug, Clone)]
pub struct RowSpec {
    pub utt_id: String,
    pub frames: String,
    pub phones: String,
    pub codes: Option<String>,
    pub wav: Option<String>,
}

fn resolve(base: &Path, field: &str) -> PathBuf {
    let p = Path::new(field);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut rows = Vec::new();
        let mut ids = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                bail!(
                    "{} line {}: expected 5 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                );
            }
            let utt_id = fields[0].to_string();
            if !ids.insert(utt_id.clone()) {
                bail!("{} line {}: duplicate utt_id `{utt_id}`", path.display(), lineno + 1);
            }
            let opt = |f: &str| if f == "-" { None } else { Some(resolve(&base, f)) };
            let row = ManifestRow {
                utt_id,
                frames_path: resolve(&base, fields[1]),
                phones_path: resolve(&base, fields[2]),
                codes_path: opt(fields[3]),
                wav_path: opt(fields[4]),
            };
            for p in [Some(&row.frames_path), Some(&row.phones_path), row.codes_path.as_ref(), row.wav_path.as_ref()]
                .into_iter()
                .flatten()
            {
                if !p.exists() {
                    bail!(
                        "{} line {}: referenced file {} does not exist",
                        path.display(),
                        lineno + 1,
                        p.display()
                    );
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            bail!("{}: manifest has no rows", path.display());
        }
        Ok(Manifest { rows })
    }

    pub fn write(path: &Path, rows: &[RowSpec]) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&r.utt_id);
            out.push('\t');
            out.push_str(&r.frames);
            out.push('\t');
            out.push_str(&r.phones);
            out.push('\t');
            out.push_str(r.codes.as_deref().unwrap_or("-"));
            out.push('\t');
            out.push_str(r.wav.as_deref().unwrap_or("-"));
            out.push('\n');
        }
        fs::write(path, out).with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// Read a newline-delimited integer file (phone labels, code streams).
pub fn read_ints(path: &Path) -> Result<Vec<usize>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .with_context(|| format!("{}: `{l}` is not a non-negative integer", path.display()))
        })
        .collect()
}

/// Write integers one per line.
pub fn write_ints(path: &Path, vals: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(vals.len() * 4);
    for v in vals {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::write(p, b"x").unwrap();
    }

    #[test]
    fn round_trip_with_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        touch(&d.join("a.tnsr"));
        touch(&d.join("a.phones"));
        touch(&d.join("a.codes"));
        touch(&d.join("b.tnsr"));
        touch(&d.join("b.phones"));
        let rows = vec![
            RowSpec {
                utt_id: "a".into(),
                frames: "a.tnsr".into(),
                phones: "a.phones".into(),
                codes: Some("a.codes".into()),
                wav: None,
            },
            RowSpec {
                utt_id: "b".into(),
                frames: "b.tnsr".into(),
                phones: "b.phones".into(),
                codes: None,
                wav: None,
            },
        ];
        let mpath = d.join("manifest.tsv");
        Manifest::write(&mpath, &rows).unwrap();
        let m = Manifest::load(&mpath).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].utt_id, "a");
        assert_eq!(m.rows[0].codes_path.as_ref().unwrap(), &d.join("a.codes"));
        assert!(m.rows[1].codes_path.is_none());
        assert_eq!(m.rows[1].frames_path, d.join("b.tnsr"));
    }

    #[test]
    fn duplicate_ids_and_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        touch(&d.join("a.tnsr"));
        touch(&d.join("a.phones"));
        let mpath = d.join("m.tsv");

        fs::write(&mpath, "a\ta.tnsr\ta.phones\t-\t-\na\ta.tnsr\ta.phones\t-\t-\n").unwrap();
        let e = Manifest::load(&mpath).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");

        fs::write(&mpath, "a\tmissing.tnsr\ta.phones\t-\t-\n").unwrap();
        let e = Manifest::load(&mpath).unwrap_err();
        assert!(e.to_string().contains("does not exist"), "{e}");

        fs::write(&mpath, "a\ta.tnsr\n").unwrap();
        let e = Manifest::load(&mpath).unwrap_err();
        assert!(e.to_string().contains("5 tab-separated"), "{e}");
    }

    #[test]
    fn int_files_round_trip_and_reject_junk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.codes");
        write_ints(&p, &[0, 5, 12, 3]).unwrap();
        assert_eq!(read_ints(&p).unwrap(), vec![0, 5, 12, 3]);
        fs::write(&p, "1\ntwo\n").unwrap();
        assert!(read_ints(&p).is_err());
    }
}
