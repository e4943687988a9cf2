//! Std companion to `divgen-core`: configuration, file formats, the
//! embedding store, HTTP and stub backends, the concurrent generation
//! executor and the pipeline stages behind the `divgen` command.

pub mod backend;
pub mod config;
pub mod error;
pub mod executor;
pub mod files;
pub mod llm;
pub mod pipeline;
pub mod store;

pub use divgen_core as core;
pub use error::{Error, Result};
