use divgen::backend::StubBackend;
use divgen::config::PipelineConfig;
use divgen::core::{EmbeddingProvider, EmbeddingVector};
use divgen::files;
use divgen::pipeline;
use divgen::store::EmbeddingStore;

fn store_line(key: &str, v: &[f64]) -> String {
    serde_json::json!({"key": key, "values": v}).to_string() + "\n"
}

#[test]
fn crane_resolves_to_bird_with_file_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    text += &store_line("a large long-legged bird", &[0.9, 0.1, 0.0]);
    text += &store_line("a large machine used for lifting", &[0.0, 0.2, 0.9]);
    for (i, v) in [[0.8, 0.3, 0.1], [0.7, 0.1, 0.2], [0.95, 0.0, 0.05]].iter().enumerate() {
        text += &store_line(&format!("img/crane_{i}.jpg"), v);
    }
    std::fs::write(dir.path().join("emb.jsonl"), text).unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(
        &cfg_path,
        r#"{"embedding":{"mode":"file","path":"emb.jsonl"},
            "classes":[{"id":"crane","meanings":["a large long-legged bird","a large machine used for lifting"],
                        "images":["img/crane_0.jpg","img/crane_1.jpg","img/crane_2.jpg"]}]}"#,
    )
    .unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let s = pipeline::run_resolve(&cfg, None, dir.path()).unwrap();
    let m = &s.resolved[0];
    assert_eq!(m.chosen.text, "a large long-legged bird");
    assert!(m.all_scores[0] > m.all_scores[1]);

    // An image key missing from the store is an error, not a silent skip.
    let mut bad = cfg.clone();
    bad.classes[0].images.push("img/missing.jpg".into());
    assert_eq!(
        pipeline::run_resolve(&bad, None, dir.path()).unwrap_err().name(),
        "SimilarityError::KeyNotFound"
    );
}

#[test]
fn meanings_k_truncates_candidates() {
    let mut cfg =
        PipelineConfig::from_json(r#"{"classes":[{"id":"x","meanings":["a","b","c"]}],"meanings_k":1}"#).unwrap();
    let provider = pipeline::embedding_provider(&cfg).unwrap();
    let m = pipeline::resolve_class(&cfg, provider.as_ref(), &cfg.classes[0])
        .unwrap()
        .unwrap();
    assert_eq!(m.all_scores.len(), 1);
    cfg.meanings_k = 5;
    let m = pipeline::resolve_class(&cfg, provider.as_ref(), &cfg.classes[0])
        .unwrap()
        .unwrap();
    assert_eq!(m.all_scores.len(), 3);
    cfg.classes[0].meanings.clear();
    assert!(pipeline::resolve_class(&cfg, provider.as_ref(), &cfg.classes[0])
        .unwrap()
        .is_none());
}

#[test]
fn store_round_trip_through_provider() {
    let mut s = EmbeddingStore::default();
    s.insert("k", EmbeddingVector::new(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(s.insert("j", EmbeddingVector::new(vec![1.0]).unwrap()).is_err());
    let back = EmbeddingStore::from_jsonl(&s.to_jsonl()).unwrap();
    assert_eq!(back.embed("k").unwrap().values(), &[1.0, 2.0]);
}

fn small_run_config() -> PipelineConfig {
    PipelineConfig::from_json(
        r#"{"seed": 5,
            "classes":[{"id":"crane","meanings":["a large long-legged bird","a large machine used for lifting"]},
                       {"id":"tench"},{"id":"goldfish"}],
            "corpus":{"target":40},"quota_per_class":4,
            "params":{"guidance_scale":2.0,"steps":50,"width":32,"height":32,"target_resolution":8},
            "trainer":{"epochs":2},"toy":{"train_per_class":60,"test_per_class":60}}"#,
    )
    .unwrap()
}

#[test]
fn offline_run_is_deterministic_and_resumable() {
    let cfg = small_run_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline::run_all(&cfg, a.path(), &StubBackend).unwrap();
    let rb = pipeline::run_all(&cfg, b.path(), &StubBackend).unwrap();
    assert_eq!(ra.generation.generated, 12);
    assert_eq!(ra.manifest_entries, 12);
    assert_eq!(ra.report, rb.report);
    let read = |d: &std::path::Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
    assert_eq!(read(a.path(), "checkpoint.json"), read(b.path(), "checkpoint.json"));

    let again = pipeline::run_all(&cfg, a.path(), &StubBackend).unwrap();
    assert_eq!((again.generation.generated, again.generation.skipped), (0, 12));
    assert_eq!(again.report, ra.report);
    let manifest = files::load_manifest(&a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 12);
    files::verify_manifest(&manifest, a.path()).unwrap();
}

#[test]
fn prompts_reuse_saved_meaning() {
    let cfg = small_run_config();
    let dir = tempfile::tempdir().unwrap();
    let resolved = pipeline::run_resolve(&cfg, Some("crane"), dir.path()).unwrap();
    let mut llm = pipeline::llm_client(&cfg).unwrap();
    pipeline::run_prompts(&cfg, Some("crane"), dir.path(), llm.as_mut()).unwrap();
    let prompts = files::read_prompts(&files::prompts_path(dir.path(), "crane")).unwrap();
    assert_eq!(prompts.len(), 40);
    // The mock LLM writes the queried subject, meaning included, into each foreground.
    let meaning = &resolved.resolved[0].chosen.text;
    assert!(
        prompts.iter().all(|p| p.text.contains(meaning.as_str())),
        "{}",
        prompts[0].text
    );
}
