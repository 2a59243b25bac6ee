//! Pipeline plumbing behind the `conceptlm` binary: config, sweep manifest,
//! stage runners and the long-format report.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use pipeline::Workspace;
