//! Pipeline stages shared by the CLI subcommands.

use std::path::{Path, PathBuf};
use std::time::Duration;

use divgen_core::hash::SeedBuilder;
use divgen_core::metrics::ProbMatrix;
use divgen_core::trainer::{train, Checkpoint, EpochRecord};
use divgen_core::{
    bucket_accuracy, generate_prompt_corpus, inception_score, load_style_list, make_two_domain_toy, plan_jobs,
    resolve_ambiguity, shot_buckets, top1_accuracy, Domain, EmbeddingProvider, LabeledSet, LlmClient, Manifest,
    MeaningCandidate, MetricReport, MockEmbeddings, MockLlm, Network, PromptCorpus, ResolvedMeaning, ToyDomains,
};
use serde::{Deserialize, Serialize};

use crate::backend::{HttpBackend, ImageBackend, StubBackend};
use crate::config::{ClassSpec, EmbeddingMode, GenMode, LlmMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::executor::{execute, ExecutorConfig, RetryPolicy};
use crate::files;
use crate::llm::HttpLlm;
use crate::store::EmbeddingStore;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MEANINGS_FILE: &str = "meanings.json";

pub fn embedding_provider(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match cfg.embedding.mode {
        EmbeddingMode::Mock => Box::new(MockEmbeddings::new(cfg.seed, cfg.embedding.dim)),
        EmbeddingMode::File => {
            let path = cfg
                .embedding
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("embedding.mode \"file\" needs embedding.path".into()))?;
            Box::new(EmbeddingStore::load(&cfg.resolve_path(path))?)
        }
    })
}

pub fn llm_client(cfg: &PipelineConfig) -> Result<Box<dyn LlmClient>> {
    Ok(match cfg.llm.mode {
        LlmMode::Mock => Box::new(MockLlm::new(cfg.seed)),
        LlmMode::Http => {
            if cfg.llm.base_url.is_empty() {
                return Err(Error::Config("llm.mode \"http\" needs llm.base_url".into()));
            }
            Box::new(HttpLlm::new(
                &cfg.llm.base_url,
                Duration::from_secs(cfg.llm.timeout_secs),
            ))
        }
    })
}

pub fn image_backend(cfg: &PipelineConfig) -> Result<Box<dyn ImageBackend>> {
    Ok(match cfg.generation.mode {
        GenMode::Stub => Box::new(StubBackend),
        GenMode::Http => {
            if cfg.generation.base_url.is_empty() {
                return Err(Error::Config(
                    "generation.mode \"http\" needs generation.base_url".into(),
                ));
            }
            Box::new(HttpBackend::new(
                &cfg.generation.base_url,
                Duration::from_secs(cfg.generation.timeout_secs),
            ))
        }
    })
}

pub fn executor_config(cfg: &PipelineConfig) -> ExecutorConfig {
    ExecutorConfig {
        max_concurrency: cfg.generation.max_concurrency,
        retry: RetryPolicy {
            max_attempts: cfg.generation.max_attempts,
            base_delay: Duration::from_millis(cfg.generation.base_delay_ms),
        },
    }
}

/// Image keys of a class; in mock mode a class without listed images gets
/// `{id}/image/{j}` placeholders.
pub fn image_keys(cfg: &PipelineConfig, class: &ClassSpec) -> Vec<String> {
    if !class.images.is_empty() || cfg.embedding.mode == EmbeddingMode::File {
        return class.images.clone();
    }
    (0..cfg.embedding.mock_images_per_class)
        .map(|j| format!("{}/image/{j}", class.id))
        .collect()
}

/// `None` when the class lists no candidate meanings.
pub fn resolve_class(
    cfg: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
    class: &ClassSpec,
) -> Result<Option<ResolvedMeaning>> {
    if class.meanings.is_empty() {
        return Ok(None);
    }
    let candidates = MeaningCandidate::enumerate(class.meanings.iter().take(cfg.meanings_k).cloned());
    let text_embs = candidates
        .iter()
        .map(|c| provider.embed_unit(&c.text))
        .collect::<Result<Vec<_>, _>>()?;
    let image_embs = image_keys(cfg, class)
        .iter()
        .map(|k| provider.embed_unit(k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(resolve_ambiguity(
        &class.id,
        &candidates,
        &text_embs,
        &image_embs,
    )?))
}

pub fn selected_classes<'a>(cfg: &'a PipelineConfig, only: Option<&str>) -> Result<Vec<&'a ClassSpec>> {
    match only {
        Some(id) => Ok(vec![cfg.class(id)?]),
        None => Ok(cfg.classes.iter().collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveSummary {
    pub classes: usize,
    pub resolved: Vec<ResolvedMeaning>,
}

pub fn run_resolve(cfg: &PipelineConfig, only: Option<&str>, out: &Path) -> Result<ResolveSummary> {
    let provider = embedding_provider(cfg)?;
    let classes = selected_classes(cfg, only)?;
    let mut resolved = Vec::new();
    for c in &classes {
        if let Some(m) = resolve_class(cfg, provider.as_ref(), c)? {
            log::info!("{}: chose {:?} (score {:.4})", c.id, m.chosen.text, m.score);
            resolved.push(m);
        }
    }
    files::write_json(&out.join(MEANINGS_FILE), &resolved)?;
    Ok(ResolveSummary {
        classes: classes.len(),
        resolved,
    })
}

/// Meaning for a class, read from a previous `resolve` output in `out` when
/// present, otherwise computed.
fn meaning_for(
    cfg: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
    class: &ClassSpec,
    out: &Path,
) -> Result<Option<ResolvedMeaning>> {
    let saved = out.join(MEANINGS_FILE);
    if saved.exists() {
        let all: Vec<ResolvedMeaning> = files::read_json(&saved)?;
        if let Some(m) = all.into_iter().find(|m| m.class_id == class.id) {
            return Ok(Some(m));
        }
    }
    resolve_class(cfg, provider, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub class_id: String,
    pub cd_prompts: usize,
    pub styles: usize,
    pub queries: usize,
    pub path: PathBuf,
}

pub fn run_prompts(
    cfg: &PipelineConfig,
    only: Option<&str>,
    out: &Path,
    client: &mut dyn LlmClient,
) -> Result<Vec<PromptSummary>> {
    let provider = embedding_provider(cfg)?;
    let mut summaries = Vec::new();
    for c in selected_classes(cfg, only)? {
        let meaning = meaning_for(cfg, provider.as_ref(), c, out)?;
        let corpus = generate_prompt_corpus(&c.id, c.name(), meaning.as_ref(), client, &cfg.corpus_options())?;
        let path = files::prompts_path(out, &c.id);
        files::write_prompts(&path, &corpus.cd_prompts)?;
        log::info!(
            "{}: {} prompts from {} queries",
            c.id,
            corpus.cd_prompts.len(),
            corpus.queries_issued
        );
        summaries.push(PromptSummary {
            class_id: c.id.clone(),
            cd_prompts: corpus.cd_prompts.len(),
            styles: corpus.styles.len(),
            queries: corpus.queries_issued,
            path,
        });
    }
    Ok(summaries)
}

/// Uses `{out}/{class}.prompts.jsonl` when it exists, else queries the LLM.
fn corpus_for(
    cfg: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
    class: &ClassSpec,
    out: &Path,
    client: &mut dyn LlmClient,
) -> Result<PromptCorpus> {
    let path = files::prompts_path(out, &class.id);
    if path.exists() {
        return Ok(PromptCorpus {
            class_id: class.id.clone(),
            cd_prompts: files::read_prompts(&path)?,
            styles: load_style_list()?,
            queries_issued: 0,
        });
    }
    let meaning = meaning_for(cfg, provider, class, out)?;
    let corpus = generate_prompt_corpus(&class.id, class.name(), meaning.as_ref(), client, &cfg.corpus_options())?;
    files::write_prompts(&path, &corpus.cd_prompts)?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub planned: usize,
    pub generated: usize,
    pub skipped: usize,
    pub manifest: PathBuf,
}

pub fn run_generate(
    cfg: &PipelineConfig,
    only: Option<&str>,
    out: &Path,
    client: &mut dyn LlmClient,
    backend: &dyn ImageBackend,
) -> Result<GenerateSummary> {
    let provider = embedding_provider(cfg)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let existing = files::load_manifest(&manifest_path)?;
    let mut jobs = Vec::new();
    for c in selected_classes(cfg, only)? {
        let corpus = corpus_for(cfg, provider.as_ref(), c, out, client)?;
        jobs.extend(plan_jobs(&c.id, &corpus, cfg.quota_per_class, cfg.seed, cfg.params)?);
    }
    let report = execute(&jobs, backend, out, &existing, &executor_config(cfg), |e| {
        files::append_manifest_entry(&manifest_path, e)
    })?;
    log::info!("generated {}, skipped {}", report.generated, report.skipped);
    Ok(GenerateSummary {
        planned: jobs.len(),
        generated: report.generated,
        skipped: report.skipped,
        manifest: manifest_path,
    })
}

pub fn toy_data(cfg: &PipelineConfig) -> Result<(ToyDomains, LabeledSet)> {
    let t = &cfg.toy;
    let train = make_two_domain_toy(cfg.seed, t.train_per_class, t.classes, t.shift, t.scale)?;
    let test_seed = SeedBuilder::new("toy-test").u64(cfg.seed).finish();
    let test = make_two_domain_toy(test_seed, t.test_per_class, t.classes, t.shift, t.scale)?.real;
    Ok((train, test))
}

pub fn train_toy(cfg: &PipelineConfig) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let (data, _) = toy_data(cfg)?;
    let network_config = cfg.network_config();
    let train_config = cfg.train_config()?;
    let mut net = Network::new(&network_config)?;
    let history = train(&mut net, &data.real, &data.synthetic, &train_config, None)?;
    Ok((
        Checkpoint {
            network_config,
            train_config,
            network: net,
            note: String::new(),
        },
        history,
    ))
}

/// Top-1 and per-bucket accuracy on held-out real toy data (buckets from
/// the real training counts), and the Inception Score of the model's class
/// posteriors over the synthetic training set.
pub fn evaluate_toy(cfg: &PipelineConfig, ck: &Checkpoint) -> Result<(MetricReport, ProbMatrix)> {
    let (data, test) = toy_data(cfg)?;
    let net = &ck.network;
    let pred = net.predict(&test.features, ck.train_config.eval_bn_domain)?;
    let top1 = top1_accuracy(&pred, &test.labels)?;
    let mut counts = std::collections::BTreeMap::new();
    for &l in &data.real.labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let per_bucket = bucket_accuracy(&pred, &test.labels, &shot_buckets(&counts))?;
    let probs = ProbMatrix::new(net.predict_proba(&data.synthetic.features, Domain::Synthetic)?)?;
    let (is_mean, is_std) = inception_score(&probs, cfg.is_splits)?;
    Ok((
        MetricReport {
            top1,
            per_bucket,
            is_mean,
            is_std,
        },
        probs,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub resolved: usize,
    pub prompts: usize,
    pub generation: GenerateSummary,
    pub manifest_entries: usize,
    pub subsampled_entries: usize,
    pub final_loss: f64,
    pub report: MetricReport,
}

/// resolve -> prompts -> generate -> subsample -> train -> evaluate, with
/// the configured providers. Toy features stand in for image features.
pub fn run_all(cfg: &PipelineConfig, out: &Path, backend: &dyn ImageBackend) -> Result<RunSummary> {
    let mut client = llm_client(cfg)?;
    let resolved = run_resolve(cfg, None, out)?;
    let mut prompts = 0;
    for c in &cfg.classes {
        let path = files::prompts_path(out, &c.id);
        prompts += if path.exists() {
            files::read_prompts(&path)?.len()
        } else {
            run_prompts(cfg, Some(&c.id), out, client.as_mut())?[0].cd_prompts
        };
    }
    let generation = run_generate(cfg, None, out, client.as_mut(), backend)?;
    let manifest = files::load_manifest(&generation.manifest)?;
    files::verify_manifest(&manifest, out)?;
    let subsampled: Manifest = divgen_core::subsample_low_data(&manifest, cfg.toy.train_per_class, cfg.seed)?;
    files::save_manifest(&out.join("manifest.subsampled.jsonl"), &subsampled)?;
    let (ck, history) = train_toy(cfg)?;
    files::save_checkpoint(&out.join("checkpoint.json"), &ck)?;
    files::write_file(&out.join("history.csv"), files::history_csv(&history).as_bytes())?;
    let (report, _) = evaluate_toy(cfg, &ck)?;
    files::save_report(&out.join("metrics.json"), &report)?;
    Ok(RunSummary {
        resolved: resolved.resolved.len(),
        prompts,
        generation,
        manifest_entries: manifest.len(),
        subsampled_entries: subsampled.len(),
        final_loss: history.last().map_or(f64::NAN, |h| h.loss),
        report,
    })
}
