//! End-to-end estimation: trace bytes in, peak-memory report out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{self, AnalyzeError, MemoryBlock, Reconstruction};
use crate::orchestrator::{self, OrchestrateError, OrchestratedSequence, OrchestratorConfig};
use crate::sim::{self, CurvePoint, SimConfig, SimError};
use crate::trace::{self, AnnotationIndex, FieldMapping, IngestError, IngestOptions, ParsedTrace, WindowForest};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Pipeline failure tagged with the stage that raised it. The stage error's
/// message is embedded, so the chain ends here.
#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("stage=ingest: {0}")]
    Ingest(IngestError),
    #[error("stage=analyze: {0}")]
    Analyze(AnalyzeError),
    #[error("stage=orchestrate: {0}")]
    Orchestrate(OrchestrateError),
    #[error("stage=simulate: {0}")]
    Simulate(SimError),
}

macro_rules! stage_from {
    ($($variant:ident($err:ty)),*) => {$(
        impl From<$err> for EstimateError {
            fn from(e: $err) -> Self {
                EstimateError::$variant(e)
            }
        }
    )*};
}

stage_from!(Ingest(IngestError), Analyze(AnalyzeError), Orchestrate(OrchestrateError), Simulate(SimError));

impl EstimateError {
    pub fn stage(&self) -> &'static str {
        match self {
            EstimateError::Ingest(_) => "ingest",
            EstimateError::Analyze(_) => "analyze",
            EstimateError::Orchestrate(_) => "orchestrate",
            EstimateError::Simulate(_) => "simulate",
        }
    }
}

/// Device capacity test for a predicted peak.
pub fn predict_oom(peak_bytes: u64, capacity_bytes: u64) -> bool {
    peak_bytes > capacity_bytes
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineConfig {
    pub ingest: IngestOptions,
    pub orchestrator: OrchestratorConfig,
    /// Allocator constants. Its device capacity is used only for the OOM
    /// prediction when `capacity_bytes` is unset.
    pub sim: SimConfig,
    pub capacity_bytes: Option<u64>,
}

impl PipelineConfig {
    /// Target capacity, if any was configured.
    pub fn effective_capacity(&self) -> Option<u64> {
        self.capacity_bytes
            .or((self.sim.device_capacity_bytes != u64::MAX).then_some(self.sim.device_capacity_bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub dropped_unrecognized: usize,
    pub dropped_other_device: usize,
    pub rejected_records: usize,
    pub orphan_frees: usize,
    pub size_mismatches: usize,
    pub zero_lifetime_blocks: usize,
    pub iteration_count: usize,
    pub blocks_reconstructed: usize,
    pub blocks_attributed: usize,
    pub events_simulated: usize,
    pub analysis_window_start_us: i64,
    pub analysis_window_end_us: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub analysis_iteration: usize,
    pub optimizer_states_per_parameter: usize,
    pub target_device: Option<i64>,
    pub device_capacity_bytes: Option<u64>,
    pub min_block_bytes: u64,
    pub small_alloc_threshold_bytes: u64,
    pub small_segment_bytes: u64,
    pub large_segment_bytes: u64,
    pub min_large_alloc_bytes: u64,
    pub large_round_bytes: u64,
    pub split_remainder_small_min: u64,
    pub split_remainder_large_min: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    /// Estimated peak of memory reserved from the device.
    pub peak_reserved_bytes: u64,
    pub peak_allocated_bytes: u64,
    pub predicted_oom: bool,
    pub curve_points: usize,
    pub diagnostics: Diagnostics,
    pub config: ConfigEcho,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

impl EstimateReport {
    /// Versioned `key = value` text; the field order is fixed.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields are TOML-representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Every intermediate product of one pipeline run, for dumps and tests.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub parsed: ParsedTrace,
    pub forest: WindowForest,
    pub annotations: AnnotationIndex,
    pub reconstruction: Reconstruction,
    /// Attributed and classified blocks.
    pub blocks: Vec<MemoryBlock>,
    pub sequence: OrchestratedSequence,
    pub report: EstimateReport,
}

pub fn estimate(
    source: &[u8],
    mapping: &FieldMapping,
    config: &PipelineConfig,
) -> Result<EstimateReport, EstimateError> {
    run_pipeline(source, mapping, config).map(|run| run.report)
}

/// Runs ingest, analysis, orchestration and simulation.
///
/// The replay runs against an unbounded device. When the predicted peak
/// fits the target capacity the device level never refuses a segment, so
/// the bounded replay would be identical; when it does not fit, the run is
/// reported as an OOM regardless of what cache reclamation could recover.
pub fn run_pipeline(
    source: &[u8],
    mapping: &FieldMapping,
    config: &PipelineConfig,
) -> Result<PipelineRun, EstimateError> {
    let parsed = trace::parse_trace(source, mapping, config.ingest)?;
    let forest = trace::build_windows(&parsed.events)?;
    let annotations = trace::index_annotations(&parsed.events, mapping)?;

    let mut reconstruction = analyzer::reconstruct_blocks(&parsed.events);
    let blocks_reconstructed = reconstruction.blocks.len();
    let attributed = analyzer::attribute_blocks(std::mem::take(&mut reconstruction.blocks), &forest);
    reconstruction.blocks = attributed.clone();
    let relevant = analyzer::filter_relevant(attributed)?;
    let blocks = orchestrator::classify_blocks(relevant, &annotations, &forest, &config.orchestrator);
    let sequence = orchestrator::orchestrate(&blocks, &annotations, &config.orchestrator)?;

    let sim_cfg = SimConfig {
        device_capacity_bytes: u64::MAX,
        ..config.sim
    };
    let outcome = sim::simulate(&sequence, &sim_cfg)?;
    let capacity = config.effective_capacity();
    let predicted_oom =
        outcome.oom.is_some() || capacity.is_some_and(|c| predict_oom(outcome.peak_reserved_bytes, c));

    let s = &config.sim;
    let report = EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        peak_reserved_bytes: outcome.peak_reserved_bytes,
        peak_allocated_bytes: outcome.peak_allocated_bytes,
        predicted_oom,
        curve_points: outcome.curve.len(),
        diagnostics: Diagnostics {
            dropped_unrecognized: parsed.dropped_unrecognized,
            dropped_other_device: parsed.dropped_other_device,
            rejected_records: parsed.rejected,
            orphan_frees: reconstruction.orphan_frees,
            size_mismatches: reconstruction.size_mismatches,
            zero_lifetime_blocks: reconstruction.zero_lifetime,
            iteration_count: annotations.iteration_boundaries.len(),
            blocks_reconstructed,
            blocks_attributed: blocks.len(),
            events_simulated: sequence.events.len(),
            analysis_window_start_us: sequence.analysis_window.start_us,
            analysis_window_end_us: sequence.analysis_window.end_us,
        },
        config: ConfigEcho {
            analysis_iteration: config.orchestrator.analysis_iteration,
            optimizer_states_per_parameter: config.orchestrator.optimizer_states_per_parameter,
            target_device: parsed.target_device,
            device_capacity_bytes: capacity,
            min_block_bytes: s.min_block_bytes,
            small_alloc_threshold_bytes: s.small_alloc_threshold_bytes,
            small_segment_bytes: s.small_segment_bytes,
            large_segment_bytes: s.large_segment_bytes,
            min_large_alloc_bytes: s.min_large_alloc_bytes,
            large_round_bytes: s.large_round_bytes,
            split_remainder_small_min: s.split_remainder_small_min,
            split_remainder_large_min: s.split_remainder_large_min,
        },
        curve: outcome.curve,
    };
    Ok(PipelineRun {
        parsed,
        forest,
        annotations,
        reconstruction,
        blocks,
        sequence,
        report,
    })
}
