//! Lifecycle classification and re-timing of analyzed blocks.
//!
//! CPU-observed lifetimes are rewritten into the lifetimes expected on the
//! device: parameters and optimizer state stay resident, gradients live until
//! the gradient-clearing call, batch data is bounded by its iteration and
//! activations keep their observed timings. Only the analysis iteration is
//! emitted, with blocks carried over from earlier iterations allocated at its
//! start.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{LifecycleClass, MemoryBlock};
use crate::trace::{AnnotationIndex, TimeWindow, WindowForest, WindowKind};

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("analysis iteration {requested} (1-based) is not a complete profiled iteration; {available} available")]
    NoSuchIteration { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SequenceError {
    #[error("event {index} is out of order")]
    OutOfOrder { index: usize },
    #[error("event {index}: block {block_id} has zero size")]
    ZeroSize { index: usize, block_id: usize },
    #[error("event {index}: block {block_id} allocated twice")]
    DuplicateAlloc { index: usize, block_id: usize },
    #[error("event {index}: block {block_id} freed twice")]
    DuplicateFree { index: usize, block_id: usize },
    #[error("event {index}: block {block_id} freed without a preceding allocation")]
    FreeWithoutAlloc { index: usize, block_id: usize },
    #[error("event {index}: block {block_id} freed at or before its allocation time")]
    FreeNotAfterAlloc { index: usize, block_id: usize },
    #[error("event {index}: block {block_id} freed with size {found}, allocated with {expected}")]
    SizeMismatch {
        index: usize,
        block_id: usize,
        expected: u64,
        found: u64,
    },
}

#[derive(Debug, Error)]
pub enum SequenceIoError {
    #[error("sequence file: {0}")]
    Csv(#[from] csv::Error),
    #[error("sequence file: {0}")]
    Io(#[from] std::io::Error),
    #[error("sequence file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    // Free sorts before Alloc at equal timestamps.
    Free,
    Alloc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrchestratedEvent {
    pub ts_us: i64,
    pub kind: EventKind,
    pub block_id: usize,
    pub size_bytes: u64,
    pub class: LifecycleClass,
}

impl OrchestratedEvent {
    pub fn sort_key(&self) -> (i64, EventKind, usize) {
        (self.ts_us, self.kind, self.block_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrchestratedSequence {
    pub events: Vec<OrchestratedEvent>,
    pub analysis_window: TimeWindow,
    pub carryover_ids: BTreeSet<usize>,
}

impl OrchestratedSequence {
    /// Builds a sequence from raw events, sorting them into canonical order.
    pub fn from_events(mut events: Vec<OrchestratedEvent>, analysis_window: TimeWindow) -> Self {
        events.sort_by_key(OrchestratedEvent::sort_key);
        Self {
            events,
            analysis_window,
            carryover_ids: BTreeSet::new(),
        }
    }

    /// Checks ordering and per-block pairing.
    pub fn validate(&self) -> Result<(), SequenceError> {
        validate_events(&self.events)
    }
}

pub fn validate_events(events: &[OrchestratedEvent]) -> Result<(), SequenceError> {
    let mut allocs: HashMap<usize, (i64, u64)> = HashMap::new();
    let mut freed: BTreeSet<usize> = BTreeSet::new();
    for (index, e) in events.iter().enumerate() {
        if index > 0 && events[index - 1].sort_key() > e.sort_key() {
            return Err(SequenceError::OutOfOrder { index });
        }
        let block_id = e.block_id;
        if e.size_bytes == 0 {
            return Err(SequenceError::ZeroSize { index, block_id });
        }
        match e.kind {
            EventKind::Alloc => {
                if allocs.insert(block_id, (e.ts_us, e.size_bytes)).is_some() {
                    return Err(SequenceError::DuplicateAlloc { index, block_id });
                }
            }
            EventKind::Free => {
                let Some(&(alloc_ts, size)) = allocs.get(&block_id) else {
                    return Err(SequenceError::FreeWithoutAlloc { index, block_id });
                };
                if !freed.insert(block_id) {
                    return Err(SequenceError::DuplicateFree { index, block_id });
                }
                if e.ts_us <= alloc_ts {
                    return Err(SequenceError::FreeNotAfterAlloc { index, block_id });
                }
                if e.size_bytes != size {
                    return Err(SequenceError::SizeMismatch {
                        index,
                        block_id,
                        expected: size,
                        found: e.size_bytes,
                    });
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// 1-based index of the iteration that is replayed.
    pub analysis_iteration: usize,
    /// Optimizer-state blocks each parameter's size can justify.
    pub optimizer_states_per_parameter: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            analysis_iteration: 2,
            optimizer_states_per_parameter: 2,
        }
    }
}

/// Marks every cpu-op node that runs backward work: the node, or one of its
/// op ancestors, carries a sequence number whose first occurrence is an
/// earlier op that finished before it started.
pub fn backward_nodes(forest: &WindowForest) -> Vec<bool> {
    let nodes = forest.nodes();
    let mut first: HashMap<i64, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if let (WindowKind::CpuOp, Some(seq)) = (n.kind, n.seq_no) {
            first
                .entry(seq)
                .and_modify(|f| {
                    if (n.start_us, n.event) < (nodes[*f].start_us, nodes[*f].event) {
                        *f = i;
                    }
                })
                .or_insert(i);
        }
    }
    let mut backward = vec![false; nodes.len()];
    // parents precede children in node order
    for (i, n) in nodes.iter().enumerate() {
        let own = n.kind == WindowKind::CpuOp
            && n.seq_no.is_some_and(|seq| {
                let f = first[&seq];
                f != i && nodes[f].end_us <= n.start_us
            });
        backward[i] = own || n.parent.is_some_and(|p| backward[p]);
    }
    backward
}

/// Assigns a [`LifecycleClass`] to every block.
///
/// Precedence when several rules match: Parameter, OptimizerState, Gradient,
/// BatchData, Activation, Other.
pub fn classify_blocks(
    mut blocks: Vec<MemoryBlock>,
    annotations: &AnnotationIndex,
    forest: &WindowForest,
    config: &OrchestratorConfig,
) -> Vec<MemoryBlock> {
    let first_iteration_start = annotations
        .iteration_boundaries
        .first()
        .map_or(i64::MIN, |w| w.start_us);
    let backward = backward_nodes(forest);

    let mut backward_end: HashMap<usize, i64> = HashMap::new();
    for (i, node) in forest.nodes().iter().enumerate() {
        if backward[i] {
            if let Some(it) = annotations.iteration_at(node.start_us) {
                let end = backward_end.entry(it).or_insert(node.end_us);
                *end = (*end).max(node.end_us);
            }
        }
    }

    let is_parameter = |b: &MemoryBlock| b.alloc_us < first_iteration_start && b.is_persistent();
    let mut state_quota: HashMap<u64, usize> = HashMap::new();
    for b in blocks.iter().filter(|b| is_parameter(b)) {
        *state_quota.entry(b.size_bytes).or_default() += config.optimizer_states_per_parameter;
    }

    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by_key(|&i| (blocks[i].alloc_us, blocks[i].alloc_event, i));
    for i in order {
        let b = &blocks[i];
        let iteration = annotations.iteration_at(b.alloc_us);
        let class = if is_parameter(b) {
            LifecycleClass::Parameter
        } else if annotations.in_optimizer_step(b.alloc_us)
            && state_quota.get(&b.size_bytes).is_some_and(|&q| q > 0)
        {
            *state_quota.get_mut(&b.size_bytes).expect("quota present") -= 1;
            LifecycleClass::OptimizerState
        } else if b.attribution.is_some_and(|a| backward[a.op])
            && iteration.is_some_and(|it| {
                let end = backward_end.get(&it).copied().unwrap_or(i64::MIN);
                b.dealloc_us.map_or(true, |d| d > end)
            })
        {
            LifecycleClass::Gradient
        } else if annotations.in_dataloader(b.alloc_us) {
            LifecycleClass::BatchData
        } else if iteration.is_some()
            && !annotations.in_optimizer_step(b.alloc_us)
            && !annotations.in_zero_grad(b.alloc_us)
        {
            LifecycleClass::Activation
        } else {
            LifecycleClass::Other
        };
        blocks[i].lifecycle = class;
    }
    blocks
}

/// Re-times classified blocks into the event sequence of the analysis
/// iteration.
pub fn orchestrate(
    blocks: &[MemoryBlock],
    annotations: &AnnotationIndex,
    config: &OrchestratorConfig,
) -> Result<OrchestratedSequence, OrchestrateError> {
    let available = annotations.iteration_boundaries.len();
    let iteration = config
        .analysis_iteration
        .checked_sub(1)
        .filter(|&i| i < available)
        .ok_or(OrchestrateError::NoSuchIteration {
            requested: config.analysis_iteration,
            available,
        })?;
    let window = annotations.iteration_boundaries[iteration];
    // Gradients live until the next gradient clear. Those produced after the
    // analysis iteration's clear are released by the following iteration's
    // clear; without any clear in the analysis iteration they persist to its
    // end.
    let mut zero_grad_ends: Vec<i64> = annotations
        .zero_grad_in(iteration)
        .map(|w| w.window.end_us)
        .collect();
    if !zero_grad_ends.is_empty() {
        zero_grad_ends.extend(annotations.zero_grad_in(iteration + 1).map(|w| w.window.end_us));
    }
    zero_grad_ends.sort_unstable();
    let gradient_free = |alloc_ts: i64| {
        zero_grad_ends
            .iter()
            .copied()
            .find(|&end| end > alloc_ts)
            .unwrap_or(window.end_us)
    };

    let mut events = Vec::new();
    let mut carryover_ids = BTreeSet::new();
    for b in blocks {
        let class = b.lifecycle;
        let (alloc_ts, free_ts) = if b.alloc_us < window.start_us {
            let carried = matches!(
                class,
                LifecycleClass::Parameter | LifecycleClass::OptimizerState | LifecycleClass::Gradient
            ) && b.is_live_at(window.start_us);
            if !carried {
                continue;
            }
            carryover_ids.insert(b.block_id);
            let free = match class {
                LifecycleClass::Gradient => Some(gradient_free(window.start_us)),
                _ => None,
            };
            (window.start_us, free)
        } else if b.alloc_us < window.end_us {
            let observed = b.dealloc_us.filter(|&d| d <= window.end_us);
            let free = match class {
                LifecycleClass::Parameter | LifecycleClass::OptimizerState => observed,
                LifecycleClass::Gradient => Some(gradient_free(b.alloc_us)),
                LifecycleClass::BatchData
                | LifecycleClass::Activation
                | LifecycleClass::Other
                | LifecycleClass::Unclassified => Some(observed.unwrap_or(window.end_us)),
            };
            (b.alloc_us, free)
        } else {
            continue;
        };

        events.push(OrchestratedEvent {
            ts_us: alloc_ts,
            kind: EventKind::Alloc,
            block_id: b.block_id,
            size_bytes: b.size_bytes,
            class,
        });
        if let Some(ts_us) = free_ts {
            events.push(OrchestratedEvent {
                ts_us,
                kind: EventKind::Free,
                block_id: b.block_id,
                size_bytes: b.size_bytes,
                class,
            });
        }
    }

    let mut sequence = OrchestratedSequence::from_events(events, window);
    sequence.carryover_ids = carryover_ids;
    Ok(sequence)
}

#[derive(Serialize, Deserialize)]
struct SequenceRow {
    ts_us: i64,
    kind: EventKind,
    block_id: usize,
    size_bytes: u64,
    class: String,
}

/// Writes the sequence as CSV preceded by `#` metadata lines.
pub fn write_sequence<W: Write>(mut writer: W, seq: &OrchestratedSequence) -> Result<(), SequenceIoError> {
    writeln!(
        writer,
        "# analysis_window {} {}",
        seq.analysis_window.start_us, seq.analysis_window.end_us
    )?;
    let ids: Vec<String> = seq.carryover_ids.iter().map(usize::to_string).collect();
    writeln!(writer, "# carryover {}", ids.join(" "))?;
    let mut csv = csv::Writer::from_writer(writer);
    for e in &seq.events {
        csv.serialize(SequenceRow {
            ts_us: e.ts_us,
            kind: e.kind,
            block_id: e.block_id,
            size_bytes: e.size_bytes,
            class: e.class.as_str().to_string(),
        })?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a sequence written by [`write_sequence`]. Metadata lines are
/// optional; without them the window spans the first and last event.
/// Events are taken in file order and not re-sorted.
pub fn read_sequence<R: BufRead>(reader: R) -> Result<OrchestratedSequence, SequenceIoError> {
    let mut window = None;
    let mut carryover_ids = BTreeSet::new();
    let mut body = String::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let Some(meta) = line.strip_prefix('#') else {
            body.push_str(&line);
            body.push('\n');
            continue;
        };
        let bad = |message: &str| SequenceIoError::Format {
            line: n + 1,
            message: message.to_string(),
        };
        let mut parts = meta.split_whitespace();
        match parts.next() {
            Some("analysis_window") => {
                let mut bound = || {
                    parts
                        .next()
                        .and_then(|v| v.parse::<i64>().ok())
                        .ok_or_else(|| bad("expected two integer bounds"))
                };
                let (start, end) = (bound()?, bound()?);
                window = Some(TimeWindow::new(start, end));
            }
            Some("carryover") => {
                for id in parts {
                    carryover_ids.insert(id.parse().map_err(|_| bad("bad block id"))?);
                }
            }
            _ => {}
        }
    }

    let mut csv = csv::Reader::from_reader(body.as_bytes());
    let mut events = Vec::new();
    for (n, row) in csv.deserialize::<SequenceRow>().enumerate() {
        let row = row?;
        let class = LifecycleClass::parse(&row.class).ok_or_else(|| SequenceIoError::Format {
            line: n + 2,
            message: format!("unknown class \"{}\"", row.class),
        })?;
        events.push(OrchestratedEvent {
            ts_us: row.ts_us,
            kind: row.kind,
            block_id: row.block_id,
            size_bytes: row.size_bytes,
            class,
        });
    }
    let window = window.unwrap_or_else(|| {
        TimeWindow::new(
            events.first().map_or(0, |e| e.ts_us),
            events.last().map_or(0, |e| e.ts_us),
        )
    });
    Ok(OrchestratedSequence {
        events,
        analysis_window: window,
        carryover_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::{Attribution, AttributionCondition};
    use crate::trace::{AnnotatedWindow, Placement};

    fn block(id: usize, size: u64, alloc: i64, dealloc: Option<i64>, class: LifecycleClass) -> MemoryBlock {
        MemoryBlock {
            block_id: id,
            address: id as u64 + 1,
            size_bytes: size,
            alloc_us: alloc,
            dealloc_us: dealloc,
            device_id: 0,
            thread_id: 1,
            alloc_event: id,
            dealloc_event: None,
            attribution: None,
            lifecycle: class,
        }
    }

    fn annotated(start: i64, end: i64, iteration: usize) -> AnnotatedWindow {
        AnnotatedWindow {
            window: TimeWindow::new(start, end),
            placement: Placement::Iteration(iteration),
            event: 0,
        }
    }

    fn two_iterations() -> AnnotationIndex {
        AnnotationIndex {
            iteration_boundaries: vec![TimeWindow::new(0, 100), TimeWindow::new(100, 200)],
            ..AnnotationIndex::default()
        }
    }

    fn events_of(seq: &OrchestratedSequence, id: usize) -> Vec<(EventKind, i64)> {
        seq.events
            .iter()
            .filter(|e| e.block_id == id)
            .map(|e| (e.kind, e.ts_us))
            .collect()
    }

    #[test]
    fn gradient_free_moves_to_zero_grad_end() {
        let mut index = two_iterations();
        index.zero_grad_windows.push(annotated(180, 185, 1));
        let blocks = vec![block(0, 4096, 120, Some(150), LifecycleClass::Gradient)];
        let seq = orchestrate(&blocks, &index, &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 120), (EventKind::Free, 185)]
        );
    }

    #[test]
    fn batch_free_is_clamped_to_iteration_end() {
        let blocks = vec![block(0, 4096, 110, Some(230), LifecycleClass::BatchData)];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 110), (EventKind::Free, 200)]
        );
    }

    #[test]
    fn parameter_is_carried_over_without_free() {
        let blocks = vec![block(0, 4096, -10, None, LifecycleClass::Parameter)];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        assert_eq!(events_of(&seq, 0), vec![(EventKind::Alloc, 100)]);
        assert!(seq.carryover_ids.contains(&0));
    }

    #[test]
    fn missing_zero_grad_frees_gradients_at_window_end() {
        let blocks = vec![
            block(0, 1024, 50, None, LifecycleClass::Gradient),
            block(1, 1024, 150, Some(160), LifecycleClass::Gradient),
        ];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 100), (EventKind::Free, 200)]
        );
        assert_eq!(
            events_of(&seq, 1),
            vec![(EventKind::Alloc, 150), (EventKind::Free, 200)]
        );
    }

    #[test]
    fn carried_gradient_is_freed_by_early_zero_grad() {
        let mut index = two_iterations();
        index.zero_grad_windows.push(annotated(102, 105, 1));
        let blocks = vec![
            block(0, 1024, 50, Some(104), LifecycleClass::Gradient),
            block(1, 1024, 150, None, LifecycleClass::Gradient),
        ];
        let seq = orchestrate(&blocks, &index, &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 100), (EventKind::Free, 105)]
        );
        assert_eq!(
            events_of(&seq, 1),
            vec![(EventKind::Alloc, 150), (EventKind::Free, 200)]
        );
    }

    #[test]
    fn late_gradient_waits_for_next_iterations_clear() {
        let mut index = two_iterations();
        index.iteration_boundaries.push(TimeWindow::new(200, 300));
        index.zero_grad_windows.push(annotated(102, 105, 1));
        index.zero_grad_windows.push(annotated(210, 214, 2));
        let blocks = vec![block(0, 1024, 150, Some(212), LifecycleClass::Gradient)];
        let seq = orchestrate(&blocks, &index, &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 150), (EventKind::Free, 214)]
        );
    }

    #[test]
    fn activation_timings_are_kept_and_strays_dropped() {
        let blocks = vec![
            block(0, 512, 120, Some(140), LifecycleClass::Activation),
            block(1, 512, 40, Some(60), LifecycleClass::Activation),
            block(2, 512, 40, Some(160), LifecycleClass::Activation),
            block(3, 512, 250, None, LifecycleClass::Activation),
            block(4, 512, 150, None, LifecycleClass::Other),
        ];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        assert_eq!(
            events_of(&seq, 0),
            vec![(EventKind::Alloc, 120), (EventKind::Free, 140)]
        );
        assert!(events_of(&seq, 1).is_empty());
        assert!(events_of(&seq, 2).is_empty());
        assert!(events_of(&seq, 3).is_empty());
        assert_eq!(
            events_of(&seq, 4),
            vec![(EventKind::Alloc, 150), (EventKind::Free, 200)]
        );
        seq.validate().unwrap();
    }

    #[test]
    fn unknown_iteration_is_an_error() {
        let config = OrchestratorConfig {
            analysis_iteration: 3,
            ..OrchestratorConfig::default()
        };
        assert!(orchestrate(&[], &two_iterations(), &config).is_err());
    }

    #[test]
    fn free_sorts_before_alloc_at_equal_time() {
        let blocks = vec![
            block(0, 512, 110, Some(130), LifecycleClass::Activation),
            block(1, 512, 130, Some(140), LifecycleClass::Activation),
        ];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        let order: Vec<(i64, EventKind, usize)> = seq.events.iter().map(|e| e.sort_key()).collect();
        assert_eq!(
            order,
            vec![
                (110, EventKind::Alloc, 0),
                (130, EventKind::Free, 0),
                (130, EventKind::Alloc, 1),
                (140, EventKind::Free, 1)
            ]
        );
    }

    fn classify_fixture() -> (Vec<MemoryBlock>, AnnotationIndex, WindowForest) {
        use crate::trace::{build_windows, EventCategory, TraceEvent};
        let op = |start: i64, end: i64, seq: Option<i64>, order: usize| TraceEvent {
            category: EventCategory::CpuOp,
            name: format!("op{order}"),
            start_us: start,
            duration_us: Some(end - start),
            thread_id: 1,
            seq_no: seq,
            mem: None,
            file_order: order,
        };
        // forward op [110,120] seq 7, backward op [140,150] seq 7,
        // optimizer op [170,180]
        let events = vec![
            op(110, 120, Some(7), 0),
            op(140, 150, Some(7), 1),
            op(170, 180, None, 2),
        ];
        let forest = build_windows(&events).unwrap();
        let mut index = two_iterations();
        index.optimizer_step_windows.push(annotated(165, 185, 1));
        index.dataloader_windows.push(annotated(101, 105, 1));
        let attributed = |node: usize| {
            Some(Attribution {
                op: node,
                component: node,
                condition: AttributionCondition::OutlivesComponent,
            })
        };
        let mut blocks = vec![
            block(0, 4_096_000, -5, None, LifecycleClass::Unclassified),
            block(1, 4_096_000, 172, None, LifecycleClass::Unclassified),
            block(2, 2048, 112, Some(145), LifecycleClass::Unclassified),
            block(3, 2048, 142, None, LifecycleClass::Unclassified),
            block(4, 2048, 102, Some(190), LifecycleClass::Unclassified),
            block(5, 2048, 174, Some(176), LifecycleClass::Unclassified),
            block(6, 2048, 144, Some(146), LifecycleClass::Unclassified),
        ];
        blocks[1].attribution = attributed(2);
        blocks[2].attribution = attributed(0);
        blocks[3].attribution = attributed(1);
        blocks[5].attribution = attributed(2);
        blocks[6].attribution = attributed(1);
        (blocks, index, forest)
    }

    #[test]
    fn classification_rules() {
        let (blocks, index, forest) = classify_fixture();
        let classes: Vec<LifecycleClass> =
            classify_blocks(blocks, &index, &forest, &OrchestratorConfig::default())
                .iter()
                .map(|b| b.lifecycle)
                .collect();
        assert_eq!(
            classes,
            vec![
                LifecycleClass::Parameter,
                LifecycleClass::OptimizerState,
                LifecycleClass::Activation,
                LifecycleClass::Gradient,
                LifecycleClass::BatchData,
                LifecycleClass::Other,
                LifecycleClass::Activation,
            ]
        );
    }

    #[test]
    fn optimizer_state_quota_is_bounded() {
        let (mut blocks, index, forest) = classify_fixture();
        for id in 7..10 {
            let mut extra = block(id, 4_096_000, 172 + id as i64, None, LifecycleClass::Unclassified);
            extra.attribution = blocks[1].attribution;
            blocks.push(extra);
        }
        let classes: Vec<LifecycleClass> =
            classify_blocks(blocks, &index, &forest, &OrchestratorConfig::default())
                .iter()
                .map(|b| b.lifecycle)
                .collect();
        assert_eq!(
            &classes[7..],
            &[
                LifecycleClass::OptimizerState,
                LifecycleClass::Other,
                LifecycleClass::Other
            ]
        );
    }

    #[test]
    fn sequence_file_round_trips() {
        let blocks = vec![
            block(0, 4096, -10, None, LifecycleClass::Parameter),
            block(1, 512, 120, Some(140), LifecycleClass::Activation),
        ];
        let seq = orchestrate(&blocks, &two_iterations(), &OrchestratorConfig::default()).unwrap();
        let mut out = Vec::new();
        write_sequence(&mut out, &seq).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("# analysis_window 100 200\n# carryover 0\nts_us,kind,block_id,size_bytes,class\n"));
        assert_eq!(read_sequence(out.as_slice()).unwrap(), seq);
    }

    #[test]
    fn validation_catches_broken_sequences() {
        let ev = |ts: i64, kind: EventKind, block_id: usize| OrchestratedEvent {
            ts_us: ts,
            kind,
            block_id,
            size_bytes: 512,
            class: LifecycleClass::Activation,
        };
        use EventKind::{Alloc, Free};
        assert_eq!(
            validate_events(&[ev(1, Free, 0)]),
            Err(SequenceError::FreeWithoutAlloc { index: 0, block_id: 0 })
        );
        assert_eq!(
            validate_events(&[ev(2, Alloc, 0), ev(1, Free, 0)]),
            Err(SequenceError::OutOfOrder { index: 1 })
        );
        assert_eq!(
            validate_events(&[ev(1, Alloc, 0), ev(2, Alloc, 0)]),
            Err(SequenceError::DuplicateAlloc { index: 1, block_id: 0 })
        );
        assert_eq!(
            validate_events(&[ev(1, Free, 1), ev(1, Alloc, 1)]),
            Err(SequenceError::FreeWithoutAlloc { index: 0, block_id: 1 })
        );
        assert!(validate_events(&[ev(1, Alloc, 0), ev(2, Free, 0)]).is_ok());
    }
}
