//! Two-level caching allocator simulation.
//!
//! The framework level is a best-fit-with-coalescing allocator that carves
//! tensor blocks out of cached segments, split into a small and a large pool.
//! The device level is a capacity counter that grants or refuses segment
//! requests. Replaying an [`OrchestratedSequence`] through both levels yields
//! the allocated/reserved time series and its peak.

pub mod fuzz;
pub mod reference;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{EventKind, OrchestratedEvent, OrchestratedSequence, SequenceError};

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("allocation request of zero bytes")]
    ZeroRequest,
    #[error("allocation request of {0} bytes overflows rounding")]
    RequestTooLarge(u64),
    #[error("block {0} is already live")]
    DuplicateBlock(usize),
    #[error("block {0} is not live")]
    UnknownBlock(usize),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("invalid event sequence: {0}")]
    InvalidSequence(#[from] SequenceError),
}

/// Allocator constants. Defaults mirror PyTorch's CUDA caching allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub min_block_bytes: u64,
    /// Rounded requests up to this size are served from the small pool.
    pub small_alloc_threshold_bytes: u64,
    pub small_segment_bytes: u64,
    pub large_segment_bytes: u64,
    /// Large requests at or above this size get a segment of their own,
    /// rounded to `large_round_bytes`.
    pub min_large_alloc_bytes: u64,
    pub large_round_bytes: u64,
    pub device_capacity_bytes: u64,
    pub split_remainder_small_min: u64,
    pub split_remainder_large_min: u64,
}

impl Default for SimConfig {
    /// Device capacity defaults to unbounded.
    fn default() -> Self {
        Self {
            min_block_bytes: 512,
            small_alloc_threshold_bytes: MIB,
            small_segment_bytes: 2 * MIB,
            large_segment_bytes: 20 * MIB,
            min_large_alloc_bytes: 10 * MIB,
            large_round_bytes: 2 * MIB,
            device_capacity_bytes: u64::MAX,
            split_remainder_small_min: 512,
            split_remainder_large_min: MIB,
        }
    }
}

impl SimConfig {
    pub fn with_capacity(device_capacity_bytes: u64) -> Self {
        Self {
            device_capacity_bytes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.min_block_bytes == 0 {
            return bad("min_block_bytes must be positive");
        }
        if self.device_capacity_bytes == 0 {
            return bad("device_capacity_bytes must be positive");
        }
        for (name, v) in [
            ("small_segment_bytes", self.small_segment_bytes),
            ("large_segment_bytes", self.large_segment_bytes),
            ("large_round_bytes", self.large_round_bytes),
        ] {
            if v == 0 || v % self.min_block_bytes != 0 {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be a positive multiple of min_block_bytes"
                )));
            }
        }
        if !(self.small_alloc_threshold_bytes < self.min_large_alloc_bytes
            && self.min_large_alloc_bytes < self.large_segment_bytes)
        {
            return bad("need small_alloc_threshold < min_large_alloc < large_segment");
        }
        if self.small_segment_bytes < self.small_alloc_threshold_bytes {
            return bad("small_segment_bytes must hold the largest small request");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn pool_for(&self, rounded_bytes: u64) -> Pool {
        if rounded_bytes <= self.small_alloc_threshold_bytes {
            Pool::Small
        } else {
            Pool::Large
        }
    }

    pub fn split_min(&self, pool: Pool) -> u64 {
        match pool {
            Pool::Small => self.split_remainder_small_min,
            Pool::Large => self.split_remainder_large_min,
        }
    }
}

/// Smallest multiple of `min_block_bytes` that holds the request.
pub fn round_size(cfg: &SimConfig, request_bytes: u64) -> Result<u64, SimError> {
    if request_bytes == 0 {
        return Err(SimError::ZeroRequest);
    }
    let m = cfg.min_block_bytes;
    request_bytes
        .div_ceil(m)
        .checked_mul(m)
        .ok_or(SimError::RequestTooLarge(request_bytes))
}

/// Size of the segment requested from the device for a rounded request.
pub fn segment_size_for(cfg: &SimConfig, rounded_bytes: u64) -> u64 {
    if rounded_bytes <= cfg.small_alloc_threshold_bytes {
        cfg.small_segment_bytes
    } else if rounded_bytes < cfg.min_large_alloc_bytes {
        cfg.large_segment_bytes
    } else {
        let r = cfg.large_round_bytes;
        rounded_bytes.div_ceil(r).saturating_mul(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    Small,
    Large,
}

impl Pool {
    fn index(self) -> usize {
        match self {
            Pool::Small => 0,
            Pool::Large => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockState {
    Used { block_id: usize },
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentBlock {
    pub offset: u64,
    pub size: u64,
    pub state: BlockState,
}

/// Snapshot of one cached segment, blocks in offset order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub segment_id: usize,
    pub total_bytes: u64,
    pub pool: Pool,
    pub blocks: Vec<SegmentBlock>,
}

impl Segment {
    pub fn is_fully_free(&self) -> bool {
        matches!(self.blocks.as_slice(), [b] if b.state == BlockState::Free)
    }
}

#[derive(Debug, Clone)]
struct SegmentSlot {
    total: u64,
    pool: Pool,
    /// offset -> (size, state)
    blocks: BTreeMap<u64, (u64, BlockState)>,
}

impl SegmentSlot {
    fn is_fully_free(&self) -> bool {
        self.blocks.len() == 1
            && self
                .blocks
                .values()
                .all(|&(size, state)| state == BlockState::Free && size == self.total)
    }
}

/// Details of a refused allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct OomInfo {
    pub block_id: usize,
    pub requested_bytes: u64,
    pub rounded_bytes: u64,
    pub segment_request_bytes: u64,
    /// Reserved bytes left after cached segments were released.
    pub reserved_after_reclaim: u64,
    pub segments_released: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllocOutcome {
    Granted {
        segment_id: usize,
        offset: u64,
        block_bytes: u64,
        new_segment: bool,
    },
    OutOfMemory(OomInfo),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("allocator invariant violated: {0}")]
pub struct InvariantViolation(pub String);

/// Mutable allocator state for stepwise replay.
#[derive(Debug, Clone)]
pub struct SimState {
    cfg: SimConfig,
    segments: BTreeMap<usize, SegmentSlot>,
    next_segment_id: usize,
    /// Per pool: (size, segment_id, offset) of every free block.
    free_index: [BTreeSet<(u64, usize, u64)>; 2],
    live: HashMap<usize, (usize, u64)>,
    reserved: u64,
    allocated: u64,
}

impl SimState {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            segments: BTreeMap::new(),
            next_segment_id: 0,
            free_index: [BTreeSet::new(), BTreeSet::new()],
            live: HashMap::new(),
            reserved: 0,
            allocated: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Sum of segment sizes held from the device.
    pub fn reserved_bytes(&self) -> u64 {
        self.reserved
    }

    /// Sum of used block sizes.
    pub fn allocated_bytes(&self) -> u64 {
        self.allocated
    }

    pub fn live_blocks(&self) -> usize {
        self.live.len()
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.segments
            .iter()
            .map(|(&id, slot)| Segment {
                segment_id: id,
                total_bytes: slot.total,
                pool: slot.pool,
                blocks: slot
                    .blocks
                    .iter()
                    .map(|(&offset, &(size, state))| SegmentBlock { offset, size, state })
                    .collect(),
            })
            .collect()
    }

    /// Best-fit free block for `rounded` bytes in `pool`, if cached.
    pub fn best_fit(&self, pool: Pool, rounded: u64) -> Option<(u64, usize, u64)> {
        self.free_index[pool.index()]
            .range((rounded, 0, 0)..)
            .next()
            .copied()
    }

    pub fn alloc(&mut self, block_id: usize, request_bytes: u64) -> Result<AllocOutcome, SimError> {
        if self.live.contains_key(&block_id) {
            return Err(SimError::DuplicateBlock(block_id));
        }
        let rounded = round_size(&self.cfg, request_bytes)?;
        let pool = self.cfg.pool_for(rounded);

        if let Some((size, segment_id, offset)) = self.best_fit(pool, rounded) {
            self.free_index[pool.index()].remove(&(size, segment_id, offset));
            let block_bytes = self.carve(segment_id, offset, size, rounded, block_id);
            return Ok(AllocOutcome::Granted {
                segment_id,
                offset,
                block_bytes,
                new_segment: false,
            });
        }

        let segment_bytes = segment_size_for(&self.cfg, rounded);
        if !self.device_grants(segment_bytes) {
            let released = self.reclaim(segment_bytes);
            if !self.device_grants(segment_bytes) {
                return Ok(AllocOutcome::OutOfMemory(OomInfo {
                    block_id,
                    requested_bytes: request_bytes,
                    rounded_bytes: rounded,
                    segment_request_bytes: segment_bytes,
                    reserved_after_reclaim: self.reserved,
                    segments_released: released,
                }));
            }
        }

        let segment_id = self.next_segment_id;
        self.next_segment_id += 1;
        let mut blocks = BTreeMap::new();
        blocks.insert(0, (segment_bytes, BlockState::Free));
        self.segments.insert(
            segment_id,
            SegmentSlot {
                total: segment_bytes,
                pool,
                blocks,
            },
        );
        self.reserved += segment_bytes;
        let block_bytes = self.carve(segment_id, 0, segment_bytes, rounded, block_id);
        Ok(AllocOutcome::Granted {
            segment_id,
            offset: 0,
            block_bytes,
            new_segment: true,
        })
    }

    /// Marks the free block at `offset` used, splitting off the remainder
    /// when it reaches the pool's split minimum. Returns the used size.
    fn carve(&mut self, segment_id: usize, offset: u64, size: u64, rounded: u64, block_id: usize) -> u64 {
        let split_min = self.cfg.split_min(self.segments[&segment_id].pool);
        let slot = self.segments.get_mut(&segment_id).expect("segment exists");
        let remainder = size - rounded;
        let used = if remainder >= split_min && remainder > 0 {
            let rest = offset + rounded;
            slot.blocks.insert(rest, (remainder, BlockState::Free));
            self.free_index[slot.pool.index()].insert((remainder, segment_id, rest));
            rounded
        } else {
            size
        };
        slot.blocks.insert(offset, (used, BlockState::Used { block_id }));
        self.live.insert(block_id, (segment_id, offset));
        self.allocated += used;
        used
    }

    fn device_grants(&self, segment_bytes: u64) -> bool {
        self.reserved
            .checked_add(segment_bytes)
            .is_some_and(|total| total <= self.cfg.device_capacity_bytes)
    }

    /// Releases fully-free segments, largest first, until `needed` more bytes
    /// fit on the device. Returns how many were released.
    fn reclaim(&mut self, needed: u64) -> usize {
        let mut candidates: Vec<(u64, usize)> = self
            .segments
            .iter()
            .filter(|(_, s)| s.is_fully_free())
            .map(|(&id, s)| (s.total, id))
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut released = 0;
        for (total, id) in candidates {
            if self.device_grants(needed) {
                break;
            }
            let slot = self.segments.remove(&id).expect("candidate exists");
            self.free_index[slot.pool.index()].remove(&(total, id, 0));
            self.reserved -= total;
            released += 1;
        }
        released
    }

    /// Frees a live block and coalesces it with free neighbors. The segment
    /// stays cached.
    pub fn free(&mut self, block_id: usize) -> Result<u64, SimError> {
        let (segment_id, offset) = self
            .live
            .remove(&block_id)
            .ok_or(SimError::UnknownBlock(block_id))?;
        let slot = self.segments.get_mut(&segment_id).expect("live block's segment");
        let pool = slot.pool.index();
        let (size, _) = slot.blocks[&offset];
        self.allocated -= size;

        let mut start = offset;
        let mut merged = size;
        if let Some((&prev_off, &(prev_size, BlockState::Free))) = slot.blocks.range(..offset).next_back() {
            slot.blocks.remove(&prev_off);
            self.free_index[pool].remove(&(prev_size, segment_id, prev_off));
            start = prev_off;
            merged += prev_size;
        }
        let next_off = offset + size;
        if let Some(&(next_size, BlockState::Free)) = slot.blocks.get(&next_off) {
            slot.blocks.remove(&next_off);
            self.free_index[pool].remove(&(next_size, segment_id, next_off));
            merged += next_size;
        }
        slot.blocks.remove(&offset);
        slot.blocks.insert(start, (merged, BlockState::Free));
        self.free_index[pool].insert((merged, segment_id, start));
        Ok(size)
    }

    /// Checks tiling, coalescing maximality, alignment, free-index mirroring
    /// and byte accounting.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        let fail = |m: String| Err(InvariantViolation(m));
        let align = self.cfg.min_block_bytes;
        let mut reserved = 0u64;
        let mut allocated = 0u64;
        let mut free_blocks: [BTreeSet<(u64, usize, u64)>; 2] = [BTreeSet::new(), BTreeSet::new()];
        let mut used_ids = 0usize;

        for (&id, slot) in &self.segments {
            reserved += slot.total;
            if slot.total % align != 0 {
                return fail(format!("segment {id} size {} unaligned", slot.total));
            }
            let mut cursor = 0u64;
            let mut prev_free = false;
            for (&offset, &(size, state)) in &slot.blocks {
                if offset != cursor {
                    return fail(format!("segment {id}: gap or overlap at offset {offset}"));
                }
                if size == 0 || size % align != 0 {
                    return fail(format!("segment {id}: block at {offset} has size {size}"));
                }
                match state {
                    BlockState::Free => {
                        if prev_free {
                            return fail(format!("segment {id}: adjacent free blocks at {offset}"));
                        }
                        free_blocks[slot.pool.index()].insert((size, id, offset));
                    }
                    BlockState::Used { block_id } => {
                        allocated += size;
                        used_ids += 1;
                        if self.live.get(&block_id) != Some(&(id, offset)) {
                            return fail(format!("block {block_id} missing from live map"));
                        }
                    }
                }
                prev_free = state == BlockState::Free;
                cursor = offset + size;
            }
            if cursor != slot.total {
                return fail(format!("segment {id}: blocks cover {cursor} of {}", slot.total));
            }
        }
        if free_blocks != self.free_index {
            return fail("free index does not mirror free blocks".into());
        }
        if used_ids != self.live.len() {
            return fail("live map has stale entries".into());
        }
        if reserved != self.reserved || allocated != self.allocated {
            return fail(format!(
                "accounting drift: reserved {}/{reserved}, allocated {}/{allocated}",
                self.reserved, self.allocated
            ));
        }
        if !(allocated <= reserved && reserved <= self.cfg.device_capacity_bytes) {
            return fail("allocated <= reserved <= capacity does not hold".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CurvePoint {
    pub ts_us: i64,
    pub allocated_bytes: u64,
    pub reserved_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct OomEvent {
    pub ts_us: i64,
    pub block_id: usize,
    pub requested_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SimOutcome {
    /// One point per processed event; truncated before a refused allocation.
    pub curve: Vec<CurvePoint>,
    pub peak_reserved_bytes: u64,
    pub peak_allocated_bytes: u64,
    pub oom: Option<OomEvent>,
}

impl SimOutcome {
    pub(crate) fn push(&mut self, point: CurvePoint) {
        self.peak_reserved_bytes = self.peak_reserved_bytes.max(point.reserved_bytes);
        self.peak_allocated_bytes = self.peak_allocated_bytes.max(point.allocated_bytes);
        self.curve.push(point);
    }
}

/// Replays a sequence chronologically through the two-level allocator.
pub fn simulate(seq: &OrchestratedSequence, cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    simulate_events(&seq.events, cfg)
}

pub fn simulate_events(events: &[OrchestratedEvent], cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    crate::orchestrator::validate_events(events)?;
    let mut state = SimState::new(*cfg)?;
    let mut outcome = SimOutcome::default();
    for e in events {
        match e.kind {
            EventKind::Alloc => {
                if let AllocOutcome::OutOfMemory(info) = state.alloc(e.block_id, e.size_bytes)? {
                    outcome.oom = Some(OomEvent {
                        ts_us: e.ts_us,
                        block_id: e.block_id,
                        requested_bytes: info.requested_bytes,
                    });
                    break;
                }
            }
            EventKind::Free => {
                state.free(e.block_id)?;
            }
        }
        outcome.push(CurvePoint {
            ts_us: e.ts_us,
            allocated_bytes: state.allocated_bytes(),
            reserved_bytes: state.reserved_bytes(),
        });
    }
    Ok(outcome)
}

/// Writes the curve as CSV (`ts_us,allocated_bytes,reserved_bytes`).
pub fn write_curve<W: Write>(writer: W, curve: &[CurvePoint]) -> Result<(), csv::Error> {
    let mut csv = csv::Writer::from_writer(writer);
    for point in curve {
        csv.serialize(point)?;
    }
    csv.flush()?;
    Ok(())
}

/// Index of the first point where two curves differ, or where one ends early.
pub fn first_divergence(a: &SimOutcome, b: &SimOutcome) -> Option<usize> {
    let shared = a.curve.len().min(b.curve.len());
    (0..shared)
        .find(|&i| a.curve[i] != b.curve[i])
        .or_else(|| (a.curve.len() != b.curve.len() || a.oom != b.oom).then_some(shared))
}
