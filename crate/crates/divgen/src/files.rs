//! On-disk formats: manifests, prompt lists, checkpoints, histories,
//! probability matrices and metric reports.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use divgen_core::hash::checksum_hex;
use divgen_core::metrics::ProbMatrix;
use divgen_core::trainer::{Checkpoint, EpochRecord};
use divgen_core::{GenerationPrompt, Manifest, ManifestEntry, MetricReport};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and a rename, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// A missing file is an empty manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Manifest::from_jsonl(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_file(path, manifest.to_jsonl().as_bytes())
}

/// Appends one entry as a JSONL line.
pub fn append_manifest_entry(path: &Path, entry: &ManifestEntry) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
    line.push('\n');
    f.write_all(line.as_bytes())
}

/// Re-hashes every entry's file (paths relative to `root`).
pub fn verify_manifest(manifest: &Manifest, root: &Path) -> Result<()> {
    for e in manifest.entries() {
        let path = root.join(&e.path);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let found = checksum_hex(&bytes);
        if found != e.checksum {
            return Err(Error::ChecksumMismatch {
                id: e.id.clone(),
                expected: e.checksum.clone(),
                found,
            });
        }
    }
    Ok(())
}

pub fn prompts_path(dir: &Path, class_id: &str) -> PathBuf {
    dir.join(format!("{class_id}.prompts.jsonl"))
}

pub fn write_prompts(path: &Path, prompts: &[GenerationPrompt]) -> Result<()> {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_prompts(path: &Path) -> Result<Vec<GenerationPrompt>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.into(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_json(path, ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,eval_acc\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.loss, h.eval_acc));
    }
    out
}

pub fn load_probs(path: &Path) -> Result<ProbMatrix> {
    Ok(ProbMatrix::from_csv(&read_text(path)?)?)
}

pub fn save_report(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use divgen_core::Domain;

    #[test]
    fn manifest_append_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/manifest.jsonl");
        assert!(load_manifest(&path).unwrap().is_empty());
        let entry = ManifestEntry {
            id: "r1".into(),
            path: "r1.ppm".into(),
            class_id: "a".into(),
            domain: Domain::Real,
            format: "ppm".into(),
            checksum: checksum_hex(b"xyz"),
            provenance: None,
        };
        append_manifest_entry(&path, &entry).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries(), std::slice::from_ref(&entry));
        fs::write(dir.path().join("m/r1.ppm"), b"xyz").unwrap();
        verify_manifest(&m, &dir.path().join("m")).unwrap();
        fs::write(dir.path().join("m/r1.ppm"), b"xyZ").unwrap();
        assert!(matches!(
            verify_manifest(&m, &dir.path().join("m")),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn history_format() {
        let h = [EpochRecord {
            epoch: 0,
            loss: 0.5,
            eval_acc: 1.0,
        }];
        assert_eq!(history_csv(&h), "epoch,loss,eval_acc\n0,0.5,1\n");
    }
}
