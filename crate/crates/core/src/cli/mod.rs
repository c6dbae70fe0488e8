//! Pipeline orchestration, configuration and reports.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{Config, ConfigError, Resources};
pub use metrics::{metrics_from, report_metrics, Case, Confusion, GroundTruth, Metrics};
pub use pipeline::{analyze, analyze_text, expand_paths, Artifacts};
pub use report::{BinaryReport, BinaryStatus, PropertyResult, Report, SCHEMA_VERSION};
