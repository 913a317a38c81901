//! File formats, aggregation pipelines and the command-line driver built
//! on [`gtfuse_core`].

pub mod cli;
pub mod coco;
pub mod compare;
pub mod error;
pub mod pipeline;

pub use coco::{export, export_string, ingest, ingest_str, IngestReport, Strictness};
pub use compare::{compare_methods, Comparison, NamedSpec};
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, Method, PipelineOutput, PipelineSpec, RunReport};
