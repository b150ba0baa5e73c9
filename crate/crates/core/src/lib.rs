//! CPU-side peak GPU memory estimation from profiler traces.
//!
//! The pipeline runs trace ingest ([`trace`]), block reconstruction and
//! attribution ([`analyzer`]), re-timing into one training iteration
//! ([`orchestrator`]) and a caching-allocator replay ([`sim`]).
//! [`estimator`] chains them; [`metrics`] scores recorded runs and
//! [`synth`] produces traces with known answers.

pub mod analyzer;
pub mod estimator;
pub mod metrics;
pub mod orchestrator;
pub mod scalar;
pub mod sim;
pub mod synth;
pub mod trace;
pub mod units;

pub use estimator::{estimate, predict_oom, EstimateError, EstimateReport, PipelineConfig};
pub use scalar::Scalar;
pub use sim::{simulate, SimConfig, SimOutcome};
pub use trace::FieldMapping;

/// Exact rational scalar for metrics.
pub type Exact = num_rational::Ratio<i128>;
pub type MetricsReportF32 = metrics::MetricsReport<f32>;
pub type MetricsReportF64 = metrics::MetricsReport<f64>;
pub type MetricsReportExact = metrics::MetricsReport<Exact>;
