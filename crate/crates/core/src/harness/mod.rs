//! Configuration, QA metrics, staged caching and the experiment pipeline.

pub mod cache;
pub mod config;
pub mod gradchecks;
pub mod metrics;
pub mod pipeline;

pub use config::{LabelSource, RunConfig, StudentInit};
pub use gradchecks::{run_grad_checks, GradCheckResult};
pub use metrics::{exact_match, token_f1};
pub use pipeline::{run_pipeline, run_stages, MetricsReport, Pipeline, Stage, StageMetrics};
