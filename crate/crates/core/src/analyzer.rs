//! Memory-block lifecycle reconstruction and operator attribution.
//!
//! Allocation and deallocation instants are paired by address into
//! [`MemoryBlock`]s, then each block is tied to the cpu-op window that
//! produced it. Blocks no operator can claim are script-level temporaries and
//! are filtered out before orchestration.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::trace::{EventCategory, TraceEvent, WindowForest, WindowKind};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("no memory block could be attributed to an operator; nothing to simulate")]
    EmptyAnalysis,
    #[error("failed to write block dump: {0}")]
    Dump(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LifecycleClass {
    Unclassified,
    Parameter,
    BatchData,
    Activation,
    Gradient,
    OptimizerState,
    Other,
}

impl LifecycleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleClass::Unclassified => "unclassified",
            LifecycleClass::Parameter => "parameter",
            LifecycleClass::BatchData => "batch_data",
            LifecycleClass::Activation => "activation",
            LifecycleClass::Gradient => "gradient",
            LifecycleClass::OptimizerState => "optimizer_state",
            LifecycleClass::Other => "other",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        [
            LifecycleClass::Unclassified,
            LifecycleClass::Parameter,
            LifecycleClass::BatchData,
            LifecycleClass::Activation,
            LifecycleClass::Gradient,
            LifecycleClass::OptimizerState,
            LifecycleClass::Other,
        ]
        .into_iter()
        .find(|c| c.as_str() == text)
    }

    /// Classes that stay resident for the whole analysis window.
    pub fn is_persistent(self) -> bool {
        matches!(self, LifecycleClass::Parameter | LifecycleClass::OptimizerState)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributionCondition {
    /// Whole lifespan inside the op window.
    WithinOp,
    /// Allocated inside the op window, alive past the end of its component.
    OutlivesComponent,
}

impl AttributionCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributionCondition::WithinOp => "within_op",
            AttributionCondition::OutlivesComponent => "outlives_component",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attribution {
    /// Forest node of the originating cpu-op window.
    pub op: usize,
    /// Forest node of the linked high-level component.
    pub component: usize,
    pub condition: AttributionCondition,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemoryBlock {
    pub block_id: usize,
    pub address: u64,
    pub size_bytes: u64,
    pub alloc_us: i64,
    /// `None` means the block is persistent for the rest of the trace.
    pub dealloc_us: Option<i64>,
    pub device_id: i64,
    pub thread_id: i64,
    /// Index of the allocating instant in the event list.
    pub alloc_event: usize,
    pub dealloc_event: Option<usize>,
    pub attribution: Option<Attribution>,
    pub lifecycle: LifecycleClass,
}

impl MemoryBlock {
    pub fn is_persistent(&self) -> bool {
        self.dealloc_us.is_none()
    }

    /// Whether the block is live at `t` (allocated at or before, freed after).
    pub fn is_live_at(&self, t: i64) -> bool {
        self.alloc_us <= t && self.dealloc_us.map_or(true, |d| d > t)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reconstruction {
    pub blocks: Vec<MemoryBlock>,
    /// Deallocations with no open block at their address.
    pub orphan_frees: usize,
    /// Deallocations whose size matched no open block at their address.
    pub size_mismatches: usize,
    /// Blocks freed in the same microsecond they were allocated; their
    /// deallocation is pushed one microsecond later.
    pub zero_lifetime: usize,
}

/// Pairs allocation and deallocation instants into blocks.
///
/// A deallocation closes the most recently opened block at its address whose
/// size matches; failing that, the most recent open block at the address.
pub fn reconstruct_blocks(events: &[TraceEvent]) -> Reconstruction {
    let mut out = Reconstruction::default();
    let mut open: HashMap<u64, Vec<usize>> = HashMap::new();

    for (index, event) in events.iter().enumerate() {
        if event.category != EventCategory::CpuInstant {
            continue;
        }
        let Some(mem) = event.mem else { continue };
        if mem.bytes > 0 {
            let id = out.blocks.len();
            out.blocks.push(MemoryBlock {
                block_id: id,
                address: mem.address,
                size_bytes: mem.bytes as u64,
                alloc_us: event.start_us,
                dealloc_us: None,
                device_id: mem.device_id,
                thread_id: event.thread_id,
                alloc_event: index,
                dealloc_event: None,
                attribution: None,
                lifecycle: LifecycleClass::Unclassified,
            });
            open.entry(mem.address).or_default().push(id);
            continue;
        }

        let size = mem.bytes.unsigned_abs();
        let Some(stack) = open.get_mut(&mem.address).filter(|s| !s.is_empty()) else {
            out.orphan_frees += 1;
            continue;
        };
        let id = match stack.iter().rposition(|&b| out.blocks[b].size_bytes == size) {
            Some(pos) => stack.remove(pos),
            None => {
                out.size_mismatches += 1;
                stack.pop().expect("stack is non-empty")
            }
        };
        let block = &mut out.blocks[id];
        let mut dealloc = event.start_us;
        if dealloc <= block.alloc_us {
            out.zero_lifetime += 1;
            dealloc = block.alloc_us + 1;
        }
        block.dealloc_us = Some(dealloc);
        block.dealloc_event = Some(index);
    }
    out
}

/// Window that plays the "high-level component" role for `op`: its nearest
/// python-function ancestor, or the outermost op window on the chain when no
/// python frame encloses it.
pub fn component_of(forest: &WindowForest, op: usize) -> usize {
    forest
        .nearest_python_ancestor(op)
        .unwrap_or_else(|| forest.ancestors(op).last().unwrap_or(op))
}

/// Attributes each block to the innermost cpu-op window satisfying the
/// within-op condition, falling back to the innermost op satisfying the
/// outlives-component condition.
pub fn attribute_blocks(mut blocks: Vec<MemoryBlock>, forest: &WindowForest) -> Vec<MemoryBlock> {
    for block in &mut blocks {
        block.attribution = attribute_one(block, forest);
    }
    blocks
}

fn attribute_one(block: &MemoryBlock, forest: &WindowForest) -> Option<Attribution> {
    let mut ops: Vec<usize> = forest
        .containing(block.thread_id, block.alloc_us)
        .into_iter()
        .filter(|&n| forest.node(n).kind == WindowKind::CpuOp)
        .collect();
    if ops.is_empty() {
        return None;
    }
    ops.sort_by_key(|&n| {
        let node = forest.node(n);
        (node.duration(), std::cmp::Reverse(node.depth), n)
    });

    if let Some(dealloc) = block.dealloc_us {
        if let Some(&op) = ops.iter().find(|&&n| dealloc <= forest.node(n).end_us) {
            return Some(Attribution {
                op,
                component: component_of(forest, op),
                condition: AttributionCondition::WithinOp,
            });
        }
    }
    ops.iter().find_map(|&op| {
        let component = component_of(forest, op);
        let outlives = block
            .dealloc_us
            .map_or(true, |d| d > forest.node(component).end_us);
        outlives.then_some(Attribution {
            op,
            component,
            condition: AttributionCondition::OutlivesComponent,
        })
    })
}

/// Keeps only attributed blocks, preserving order.
pub fn filter_relevant(blocks: Vec<MemoryBlock>) -> Result<Vec<MemoryBlock>, AnalyzeError> {
    let kept: Vec<MemoryBlock> = blocks
        .into_iter()
        .filter(|b| b.attribution.is_some())
        .collect();
    if kept.is_empty() {
        return Err(AnalyzeError::EmptyAnalysis);
    }
    Ok(kept)
}

#[derive(Serialize)]
struct BlockDumpRow<'a> {
    block_id: usize,
    size_bytes: u64,
    alloc_us: i64,
    dealloc_us: Option<i64>,
    op: &'a str,
    component: &'a str,
    condition: &'a str,
    lifecycle: &'a str,
}

/// Writes one CSV row per block for debugging attribution.
pub fn write_block_dump<W: Write>(
    writer: W,
    blocks: &[MemoryBlock],
    events: &[TraceEvent],
    forest: &WindowForest,
) -> Result<(), AnalyzeError> {
    let mut csv = csv::Writer::from_writer(writer);
    for block in blocks {
        let name = |node: usize| events[forest.node(node).event].name.as_str();
        let (op, component, condition) = match block.attribution {
            Some(a) => (name(a.op), name(a.component), a.condition.as_str()),
            None => ("", "", ""),
        };
        csv.serialize(BlockDumpRow {
            block_id: block.block_id,
            size_bytes: block.size_bytes,
            alloc_us: block.alloc_us,
            dealloc_us: block.dealloc_us,
            op,
            component,
            condition,
            lifecycle: block.lifecycle.as_str(),
        })?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{build_windows, MemArgs};

    fn instant(ts: i64, address: u64, bytes: i64) -> TraceEvent {
        TraceEvent {
            category: EventCategory::CpuInstant,
            name: "[memory]".into(),
            start_us: ts,
            duration_us: None,
            thread_id: 1,
            seq_no: None,
            mem: Some(MemArgs {
                address,
                bytes,
                device_id: 0,
                total_allocated: None,
            }),
            file_order: 0,
        }
    }

    fn window(category: EventCategory, start: i64, end: i64) -> TraceEvent {
        TraceEvent {
            category,
            name: format!("{category:?}[{start},{end}]"),
            start_us: start,
            duration_us: Some(end - start),
            thread_id: 1,
            seq_no: None,
            mem: None,
            file_order: 0,
        }
    }

    fn block(alloc: i64, dealloc: Option<i64>) -> MemoryBlock {
        MemoryBlock {
            block_id: 0,
            address: 1,
            size_bytes: 512,
            alloc_us: alloc,
            dealloc_us: dealloc,
            device_id: 0,
            thread_id: 1,
            alloc_event: 0,
            dealloc_event: None,
            attribution: None,
            lifecycle: LifecycleClass::Unclassified,
        }
    }

    #[test]
    fn alloc_free_pair_becomes_one_block() {
        let r = reconstruct_blocks(&[instant(1, 0xA, 1024), instant(5, 0xA, -1024)]);
        assert_eq!(r.blocks.len(), 1);
        assert_eq!(r.blocks[0].size_bytes, 1024);
        assert_eq!((r.blocks[0].alloc_us, r.blocks[0].dealloc_us), (1, Some(5)));
    }

    #[test]
    fn reused_address_opens_a_fresh_block() {
        let r = reconstruct_blocks(&[
            instant(1, 0xA, 1024),
            instant(5, 0xA, -1024),
            instant(7, 0xA, 2048),
        ]);
        assert_eq!(r.blocks.len(), 2);
        assert_eq!(r.blocks[1].size_bytes, 2048);
        assert!(r.blocks[1].is_persistent());
    }

    #[test]
    fn lone_free_is_an_orphan() {
        let r = reconstruct_blocks(&[instant(3, 0xB, -512)]);
        assert!(r.blocks.is_empty());
        assert_eq!(r.orphan_frees, 1);
    }

    #[test]
    fn mismatched_free_closes_latest_block() {
        let r = reconstruct_blocks(&[instant(1, 0xA, 1024), instant(2, 0xA, -512)]);
        assert_eq!(r.size_mismatches, 1);
        assert_eq!(r.blocks[0].size_bytes, 1024);
        assert_eq!(r.blocks[0].dealloc_us, Some(2));
    }

    #[test]
    fn same_tick_free_is_pushed_forward() {
        let r = reconstruct_blocks(&[instant(4, 0xA, 512), instant(4, 0xA, -512)]);
        assert_eq!(r.zero_lifetime, 1);
        assert_eq!(r.blocks[0].dealloc_us, Some(5));
        assert_eq!(r.blocks[0].dealloc_event, Some(1));
    }

    #[test]
    fn block_inside_op_uses_within_op() {
        let events = vec![window(EventCategory::CpuOp, 10, 20)];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(12, Some(18))], &forest);
        let a = out[0].attribution.unwrap();
        assert_eq!(a.op, 0);
        assert_eq!(a.condition, AttributionCondition::WithinOp);
    }

    #[test]
    fn block_outliving_component_uses_second_condition() {
        let events = vec![
            window(EventCategory::PythonFunction, 5, 60),
            window(EventCategory::CpuOp, 10, 20),
        ];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(15, None)], &forest);
        let a = out[0].attribution.unwrap();
        assert_eq!(a.condition, AttributionCondition::OutlivesComponent);
        assert_eq!(a.op, forest.node_for_event(1).unwrap());
        assert_eq!(a.component, forest.node_for_event(0).unwrap());
    }

    #[test]
    fn block_dying_inside_component_is_unattributed() {
        let events = vec![
            window(EventCategory::PythonFunction, 5, 25),
            window(EventCategory::CpuOp, 10, 20),
        ];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(12, Some(22))], &forest);
        assert!(out[0].attribution.is_none());
    }

    #[test]
    fn block_dying_after_component_end_is_attributed() {
        let events = vec![
            window(EventCategory::PythonFunction, 5, 25),
            window(EventCategory::CpuOp, 10, 20),
        ];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(12, Some(30))], &forest);
        let a = out[0].attribution.unwrap();
        assert_eq!(a.condition, AttributionCondition::OutlivesComponent);
    }

    #[test]
    fn innermost_op_wins() {
        let events = vec![
            window(EventCategory::CpuOp, 0, 100),
            window(EventCategory::CpuOp, 10, 40),
            window(EventCategory::CpuOp, 12, 20),
        ];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(13, Some(18)), block(13, Some(30))], &forest);
        assert_eq!(out[0].attribution.unwrap().op, 2);
        assert_eq!(out[1].attribution.unwrap().op, 1);
    }

    #[test]
    fn op_without_python_frame_uses_outermost_op() {
        let events = vec![
            window(EventCategory::CpuOp, 0, 100),
            window(EventCategory::CpuOp, 10, 40),
        ];
        let forest = build_windows(&events).unwrap();
        let out = attribute_blocks(vec![block(15, Some(120))], &forest);
        let a = out[0].attribution.unwrap();
        assert_eq!((a.op, a.component), (1, 0));
        assert_eq!(a.condition, AttributionCondition::OutlivesComponent);
    }

    #[test]
    fn filter_keeps_attributed_in_order() {
        let attribution = Some(Attribution {
            op: 0,
            component: 0,
            condition: AttributionCondition::WithinOp,
        });
        let mut blocks = vec![block(1, None), block(2, None), block(3, None)];
        blocks[0].attribution = attribution;
        blocks[2].attribution = attribution;
        let kept = filter_relevant(blocks).unwrap();
        assert_eq!(kept.iter().map(|b| b.alloc_us).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(filter_relevant(kept.clone()).unwrap(), kept);
    }

    #[test]
    fn filter_of_unattributed_is_empty_analysis() {
        let err = filter_relevant(vec![block(1, None)]).unwrap_err();
        assert!(matches!(err, AnalyzeError::EmptyAnalysis));
    }

    #[test]
    fn block_dump_has_header_and_rows() {
        let events = vec![window(EventCategory::CpuOp, 10, 20)];
        let forest = build_windows(&events).unwrap();
        let blocks = attribute_blocks(vec![block(12, Some(18))], &forest);
        let mut out = Vec::new();
        write_block_dump(&mut out, &blocks, &events, &forest).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("block_id,size_bytes,alloc_us,dealloc_us,op,component,condition,lifecycle")
        );
        assert_eq!(
            lines.next(),
            Some("0,512,12,18,\"CpuOp[10,20]\",\"CpuOp[10,20]\",within_op,unclassified")
        );
    }
}
