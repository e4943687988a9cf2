//! Allocation-only core of the `divgen` pipeline.
//!
//! Everything in this crate is a pure function of its inputs and seeds:
//! label-ambiguity resolution over embedding similarities, LLM prompt
//! construction and parsing, style substitution, generation job planning,
//! dataset subsampling and batch composition, a small dual-BN classifier
//! with its trainer, and evaluation metrics.
//!
//! IO, HTTP backends and the command-line driver live in the `divgen` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod generation;
pub mod hash;
pub mod matrix;
pub mod metrics;
pub mod prompt;
pub mod similarity;
pub mod trainer;

pub use dataset::{
    compose_batches, make_two_domain_toy, shot_buckets, subsample_long_tail, subsample_low_data, BatchPlan,
    BatchStream, ComposedBatch, DatasetError, Domain, LabeledSet, Manifest, ManifestEntry, Provenance, ShotBucket,
    ToyDomains,
};
pub use generation::{
    downsample_box, plan_jobs, stub_generate, GenerationError, GenerationJob, GenerationParams, RasterImage,
};
pub use matrix::Matrix;
pub use metrics::{
    bucket_accuracy, inception_score, knn_classify, top1_accuracy, DistanceMetric, MetricReport, MetricsError,
    ProbMatrix,
};
pub use prompt::{
    apply_style, assemble_cd_prompt, build_cd_query, generate_prompt_corpus, load_style_list, parse_aspect_response,
    AspectSet, ChatMessage, ChatRequest, CorpusOptions, GenerationPrompt, LlmClient, MockLlm, PromptCorpus,
    PromptError, PromptKind,
};
pub use similarity::{
    mean_similarity, normalize, resolve_ambiguity, EmbeddingProvider, EmbeddingVector, MeaningCandidate,
    MockEmbeddings, ResolvedMeaning, SimilarityError, UnitEmbedding,
};
pub use trainer::{
    combined_step, cross_entropy, extract_features, grad_check, linear_probe, train, Batch, BnMode, Checkpoint,
    EpochRecord, LinearProbe, Network, NetworkConfig, Phase, ProbeConfig, Sgd, TrainConfig, TrainError,
};
