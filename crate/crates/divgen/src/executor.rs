//! Bounded-concurrency job runner.
//!
//! Workers pull jobs from a shared cursor and hand results back to the
//! calling thread, which is the only writer of manifest entries. Entries
//! are released strictly in job order, so the manifest is identical for
//! every interleaving of backend completions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use divgen_core::hash::checksum_hex;
use divgen_core::{downsample_box, Domain, GenerationJob, Manifest, ManifestEntry, Provenance};
use thiserror::Error;

use crate::backend::{BackendError, ImageBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    /// Delay after the failed attempt `attempt` (0-based): `base * 2^attempt`.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobFailure {
    pub job_id: String,
    pub attempts: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecuteError {
    #[error("invalid executor config: {0}")]
    InvalidConfig(&'static str),
    #[error("backend unavailable for {job_id} after {attempts} attempts: {last}")]
    BackendUnavailable {
        job_id: String,
        attempts: u32,
        last: String,
    },
    #[error("{} of {total} jobs failed; first: {}", failures.len(), failures[0].message)]
    PartialFailure {
        /// Entries of the jobs that did succeed, in job order.
        written: Vec<ManifestEntry>,
        failures: Vec<JobFailure>,
        total: usize,
    },
    #[error("manifest writer: {0}")]
    Writer(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecutionReport {
    /// New entries, in job order.
    pub entries: Vec<ManifestEntry>,
    pub generated: usize,
    pub skipped: usize,
}

enum Outcome {
    Written(Box<ManifestEntry>),
    Failed(JobFailure),
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn run_job(job: &GenerationJob, backend: &dyn ImageBackend, out_dir: &Path, retry: &RetryPolicy) -> Outcome {
    let fail = |attempts, message: String| {
        Outcome::Failed(JobFailure {
            job_id: job.job_id.clone(),
            attempts,
            message,
        })
    };
    let mut last = BackendError::Request("no attempt made".into());
    let mut generated = None;
    for attempt in 0..retry.max_attempts {
        match backend.generate(job) {
            Ok(img) => {
                generated = Some(img);
                break;
            }
            Err(e) => {
                log::warn!("{} attempt {} failed: {e}", job.job_id, attempt + 1);
                last = e;
                if attempt + 1 < retry.max_attempts {
                    thread::sleep(retry.delay(attempt));
                }
            }
        }
    }
    let Some(img) = generated else {
        let err = ExecuteError::BackendUnavailable {
            job_id: job.job_id.clone(),
            attempts: retry.max_attempts,
            last: last.to_string(),
        };
        return fail(retry.max_attempts, err.to_string());
    };
    let target = job.params.target_resolution;
    if img.raster.width != img.raster.height || img.raster.width % target != 0 {
        return fail(
            1,
            format!(
                "backend returned {}x{}, not a multiple of {target}",
                img.raster.width, img.raster.height
            ),
        );
    }
    let small = match downsample_box(&img.raster, img.raster.width / target) {
        Ok(s) => s,
        Err(e) => return fail(1, e.to_string()),
    };
    let bytes = match img.format.encode(&small) {
        Ok(b) => b,
        Err(e) => return fail(1, e.to_string()),
    };
    let rel = format!("{}.{}", job.relative_stem(), img.format.extension());
    if let Err(e) = write_atomic(&out_dir.join(&rel), &bytes) {
        return fail(1, format!("writing {rel}: {e}"));
    }
    Outcome::Written(Box::new(ManifestEntry {
        id: job.job_id.clone(),
        path: rel,
        class_id: job.class_id.clone(),
        domain: Domain::Synthetic,
        format: img.format.extension().to_string(),
        checksum: checksum_hex(&bytes),
        provenance: Some(Provenance {
            prompt_text: job.prompt.text.clone(),
            kind: job.prompt.kind,
            style: job.prompt.style.clone(),
            seed: job.seed,
            guidance_scale: job.params.guidance_scale,
            steps: job.params.steps,
            replica: job.replica,
        }),
    }))
}

/// Runs every job whose id is not already in `existing`.
///
/// `on_entry` receives each new entry in job order as soon as all earlier
/// jobs have finished, so a caller appending to a manifest file keeps it
/// resumable after an interruption. Failed jobs produce no entry; if any
/// job fails the result is [`ExecuteError::PartialFailure`].
pub fn execute<F>(
    jobs: &[GenerationJob],
    backend: &dyn ImageBackend,
    out_dir: &Path,
    existing: &Manifest,
    config: &ExecutorConfig,
    mut on_entry: F,
) -> Result<ExecutionReport, ExecuteError>
where
    F: FnMut(&ManifestEntry) -> std::io::Result<()>,
{
    if config.max_concurrency == 0 || config.retry.max_attempts == 0 {
        return Err(ExecuteError::InvalidConfig(
            "max_concurrency and max_attempts must be at least 1",
        ));
    }
    let pending: Vec<&GenerationJob> = jobs.iter().filter(|j| !existing.contains_id(&j.job_id)).collect();
    let skipped = jobs.len() - pending.len();
    let workers = config.max_concurrency.min(pending.len());
    let out_dir: PathBuf = out_dir.to_path_buf();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut writer_error = None;
    let cursor = AtomicUsize::new(0);
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (cursor, pending, out_dir) = (&cursor, &pending, &out_dir);
            s.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(job) = pending.get(i) else { break };
                let outcome = run_job(job, backend, out_dir, &config.retry);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffered: BTreeMap<usize, Outcome> = BTreeMap::new();
        let mut next = 0;
        for (i, outcome) in rx {
            buffered.insert(i, outcome);
            while let Some(outcome) = buffered.remove(&next) {
                next += 1;
                match outcome {
                    Outcome::Written(entry) => {
                        if writer_error.is_none() {
                            if let Err(e) = on_entry(&entry) {
                                writer_error = Some(e.to_string());
                                // Stop handing out work; in-flight jobs finish.
                                cursor.store(pending.len(), Ordering::Relaxed);
                            }
                        }
                        entries.push(*entry);
                    }
                    Outcome::Failed(f) => failures.push(f),
                }
            }
        }
    });
    if let Some(e) = writer_error {
        return Err(ExecuteError::Writer(e));
    }
    if !failures.is_empty() {
        return Err(ExecuteError::PartialFailure {
            written: entries,
            failures,
            total: pending.len(),
        });
    }
    Ok(ExecutionReport {
        generated: entries.len(),
        entries,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
        };
        assert_eq!(r.delay(0), Duration::from_millis(100));
        assert_eq!(r.delay(1), Duration::from_millis(200));
        assert_eq!(r.delay(3), Duration::from_millis(800));
        assert!(r.delay(40) >= r.delay(31));
    }
}
