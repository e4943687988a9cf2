use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use divgen::backend::{BackendError, GeneratedImage, ImageBackend, StubBackend};
use divgen::core::hash::checksum_hex;
use divgen::core::{
    generate_prompt_corpus, plan_jobs, CorpusOptions, GenerationJob, GenerationParams, Manifest, MockLlm,
};
use divgen::executor::{execute, ExecuteError, ExecutorConfig, RetryPolicy};
use divgen::files;

fn params() -> GenerationParams {
    GenerationParams {
        width: 64,
        height: 64,
        target_resolution: 16,
        ..GenerationParams::default()
    }
}

fn jobs(n: usize) -> Vec<GenerationJob> {
    let mut llm = MockLlm::new(3);
    let opts = CorpusOptions {
        target: 6,
        per_query: 6,
        ..CorpusOptions::default()
    };
    let corpus = generate_prompt_corpus("owl", "owl", None, &mut llm, &opts).unwrap();
    plan_jobs("owl", &corpus, n, 11, params()).unwrap()
}

fn cfg(concurrency: usize, attempts: u32) -> ExecutorConfig {
    ExecutorConfig {
        max_concurrency: concurrency,
        retry: RetryPolicy {
            max_attempts: attempts,
            base_delay: Duration::from_millis(1),
        },
    }
}

struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ImageBackend> ImageBackend for Counting<B> {
    fn generate(&self, job: &GenerationJob) -> Result<GeneratedImage, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(job)
    }
}

struct AlwaysDown;

impl ImageBackend for AlwaysDown {
    fn generate(&self, _: &GenerationJob) -> Result<GeneratedImage, BackendError> {
        Err(BackendError::Request("connection refused".into()))
    }
}

/// Finishes jobs out of order by sleeping a job-dependent time.
struct Jittery {
    in_flight: AtomicUsize,
    peak: Mutex<usize>,
}

impl ImageBackend for Jittery {
    fn generate(&self, job: &GenerationJob) -> Result<GeneratedImage, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        {
            let mut p = self.peak.lock().unwrap();
            *p = (*p).max(now);
        }
        std::thread::sleep(Duration::from_millis(job.seed % 7));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        StubBackend.generate(job)
    }
}

#[test]
fn happy_path_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("manifest.jsonl");
    let jobs = jobs(10);
    let backend = Counting {
        inner: StubBackend,
        calls: AtomicUsize::new(0),
    };
    let report = execute(&jobs, &backend, dir.path(), &Manifest::default(), &cfg(4, 3), |e| {
        files::append_manifest_entry(&manifest_path, e)
    })
    .unwrap();
    assert_eq!((report.generated, report.skipped), (10, 0));
    let manifest = files::load_manifest(&manifest_path).unwrap();
    assert_eq!(manifest.len(), 10);
    files::verify_manifest(&manifest, dir.path()).unwrap();
    for (e, j) in manifest.entries().iter().zip(&jobs) {
        assert_eq!(e.id, j.job_id);
        assert_eq!(e.path, format!("{}.ppm", j.job_id));
        let p = e.provenance.as_ref().unwrap();
        assert_eq!((p.seed, p.guidance_scale, p.steps), (j.seed, 2.0, 50));
        assert_eq!(p.prompt_text, j.prompt.text);
        assert_eq!(p.style, j.prompt.style);
        let bytes = std::fs::read(dir.path().join(&e.path)).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(checksum_hex(&bytes), e.checksum);
    }
    assert_eq!(backend.calls.load(Ordering::SeqCst), 10);

    let mtime = std::fs::metadata(dir.path().join(&manifest.entries()[0].path))
        .unwrap()
        .modified()
        .unwrap();
    let again = execute(&jobs, &backend, dir.path(), &manifest, &cfg(4, 3), |e| {
        files::append_manifest_entry(&manifest_path, e)
    })
    .unwrap();
    assert_eq!((again.generated, again.skipped), (0, 10));
    assert_eq!(backend.calls.load(Ordering::SeqCst), 10);
    assert_eq!(files::load_manifest(&manifest_path).unwrap(), manifest);
    let mtime2 = std::fs::metadata(dir.path().join(&manifest.entries()[0].path))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(mtime, mtime2);
}

#[test]
fn partial_manifest_resumes_remaining_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = jobs(6);
    let first = execute(
        &jobs[..2],
        &StubBackend,
        dir.path(),
        &Manifest::default(),
        &cfg(2, 1),
        |_| Ok(()),
    )
    .unwrap();
    let existing = Manifest::new(first.entries).unwrap();
    let rest = execute(&jobs, &StubBackend, dir.path(), &existing, &cfg(2, 1), |_| Ok(())).unwrap();
    assert_eq!((rest.generated, rest.skipped), (4, 2));
    let ids: Vec<&str> = rest.entries.iter().map(|e| e.id.as_str()).collect();
    let want: Vec<&str> = jobs[2..].iter().map(|j| j.job_id.as_str()).collect();
    assert_eq!(ids, want);
}

#[test]
fn failing_backend_reports_every_job() {
    let dir = tempfile::tempdir().unwrap();
    let backend = Counting {
        inner: AlwaysDown,
        calls: AtomicUsize::new(0),
    };
    let mut seen = 0;
    let err = execute(
        &jobs(10),
        &backend,
        dir.path(),
        &Manifest::default(),
        &cfg(3, 3),
        |_| {
            seen += 1;
            Ok(())
        },
    )
    .unwrap_err();
    match err {
        ExecuteError::PartialFailure {
            written,
            failures,
            total,
        } => {
            assert!(written.is_empty());
            assert_eq!((failures.len(), total), (10, 10));
            assert!(failures.iter().all(|f| f.attempts == 3));
            let ids: BTreeSet<_> = failures.iter().map(|f| f.job_id.clone()).collect();
            assert_eq!(ids.len(), 10);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen, 0);
    assert_eq!(backend.calls.load(Ordering::SeqCst), 30);
    // No image files were left behind.
    assert!(!dir.path().join("owl").exists());
}

#[test]
fn order_is_independent_of_completion_order_and_concurrency_is_bounded() {
    let jobs = jobs(24);
    let mut runs = Vec::new();
    for concurrency in [1, 3, 8] {
        let dir = tempfile::tempdir().unwrap();
        let backend = Jittery {
            in_flight: AtomicUsize::new(0),
            peak: Mutex::new(0),
        };
        let mut order = Vec::new();
        let report = execute(
            &jobs,
            &backend,
            dir.path(),
            &Manifest::default(),
            &cfg(concurrency, 1),
            |e| {
                order.push(e.id.clone());
                Ok(())
            },
        )
        .unwrap();
        assert!(*backend.peak.lock().unwrap() <= concurrency);
        let ids: Vec<String> = jobs.iter().map(|j| j.job_id.clone()).collect();
        assert_eq!(order, ids);
        runs.push(report.entries);
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}

#[test]
fn writer_failure_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let err = execute(
        &jobs(8),
        &StubBackend,
        dir.path(),
        &Manifest::default(),
        &cfg(2, 1),
        |_| Err(std::io::Error::other("disk full")),
    )
    .unwrap_err();
    assert!(matches!(err, ExecuteError::Writer(m) if m.contains("disk full")));
}

#[test]
fn rejects_zero_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        execute(
            &jobs(1),
            &StubBackend,
            dir.path(),
            &Manifest::default(),
            &cfg(0, 1),
            |_| Ok(())
        ),
        Err(ExecuteError::InvalidConfig(_))
    ));
}
