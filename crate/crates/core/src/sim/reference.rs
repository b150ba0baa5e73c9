//! Naive reference allocator used to cross-check [`super::SimState`].
//!
//! Same rules, different machinery: blocks live in plain vectors, every
//! lookup is a linear scan and byte totals are recomputed from the segment
//! list instead of being tracked incrementally. None of the production
//! helpers (rounding, segment sizing, free index) are reused here.

use crate::orchestrator::{validate_events, EventKind, OrchestratedEvent};

use super::{CurvePoint, OomEvent, SimConfig, SimError, SimOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
struct RefBlock {
    offset: u64,
    size: u64,
    owner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RefSegment {
    id: usize,
    small: bool,
    total: u64,
    blocks: Vec<RefBlock>,
}

#[derive(Debug, Clone)]
pub struct ReferenceAllocator {
    cfg: SimConfig,
    segments: Vec<RefSegment>,
    next_id: usize,
}

impl ReferenceAllocator {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            cfg,
            segments: Vec::new(),
            next_id: 0,
        }
    }

    pub fn reserved(&self) -> u64 {
        self.segments.iter().map(|s| s.total).sum()
    }

    pub fn allocated(&self) -> u64 {
        self.segments
            .iter()
            .flat_map(|s| s.blocks.iter())
            .filter(|b| b.owner.is_some())
            .map(|b| b.size)
            .sum()
    }

    /// Returns `Ok(false)` when both allocator levels refuse the request.
    pub fn alloc(&mut self, block_id: usize, request: u64) -> Result<bool, SimError> {
        if request == 0 {
            return Err(SimError::ZeroRequest);
        }
        let owned = self
            .segments
            .iter()
            .any(|s| s.blocks.iter().any(|b| b.owner == Some(block_id)));
        if owned {
            return Err(SimError::DuplicateBlock(block_id));
        }
        let unit = self.cfg.min_block_bytes;
        let mut rounded = unit;
        while rounded < request {
            rounded = rounded
                .checked_add(unit)
                .ok_or(SimError::RequestTooLarge(request))?;
        }
        let small = rounded <= self.cfg.small_alloc_threshold_bytes;
        let split_min = if small {
            self.cfg.split_remainder_small_min
        } else {
            self.cfg.split_remainder_large_min
        };

        // best fit: smallest free block, then lowest segment id, then offset
        let mut best: Option<(u64, usize, u64)> = None;
        for seg in self.segments.iter().filter(|s| s.small == small) {
            for b in seg.blocks.iter().filter(|b| b.owner.is_none() && b.size >= rounded) {
                let key = (b.size, seg.id, b.offset);
                if best.map_or(true, |k| key < k) {
                    best = Some(key);
                }
            }
        }

        let (segment_id, offset) = match best {
            Some((_, seg, off)) => (seg, off),
            None => {
                let want = if small {
                    self.cfg.small_segment_bytes
                } else if rounded < self.cfg.min_large_alloc_bytes {
                    self.cfg.large_segment_bytes
                } else {
                    let r = self.cfg.large_round_bytes;
                    let mut s = 0u64;
                    while s < rounded {
                        s = s.saturating_add(r);
                    }
                    s
                };
                if !self.fits(want) {
                    self.release_cached(want);
                    if !self.fits(want) {
                        return Ok(false);
                    }
                }
                let id = self.next_id;
                self.next_id += 1;
                self.segments.push(RefSegment {
                    id,
                    small,
                    total: want,
                    blocks: vec![RefBlock {
                        offset: 0,
                        size: want,
                        owner: None,
                    }],
                });
                (id, 0)
            }
        };

        let seg = self
            .segments
            .iter_mut()
            .find(|s| s.id == segment_id)
            .expect("chosen segment exists");
        let pos = seg
            .blocks
            .iter()
            .position(|b| b.offset == offset)
            .expect("chosen block exists");
        let leftover = seg.blocks[pos].size - rounded;
        if leftover > 0 && leftover >= split_min {
            seg.blocks[pos].size = rounded;
            seg.blocks.insert(
                pos + 1,
                RefBlock {
                    offset: offset + rounded,
                    size: leftover,
                    owner: None,
                },
            );
        }
        seg.blocks[pos].owner = Some(block_id);
        Ok(true)
    }

    fn fits(&self, want: u64) -> bool {
        self.reserved()
            .checked_add(want)
            .is_some_and(|t| t <= self.cfg.device_capacity_bytes)
    }

    fn release_cached(&mut self, want: u64) {
        loop {
            if self.fits(want) {
                return;
            }
            // largest fully-free segment, lowest id on ties
            let victim = self
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.blocks.len() == 1 && s.blocks[0].owner.is_none())
                .max_by(|(_, a), (_, b)| a.total.cmp(&b.total).then(b.id.cmp(&a.id)))
                .map(|(i, _)| i);
            match victim {
                Some(i) => {
                    self.segments.remove(i);
                }
                None => return,
            }
        }
    }

    pub fn free(&mut self, block_id: usize) -> Result<(), SimError> {
        for seg in &mut self.segments {
            if let Some(pos) = seg.blocks.iter().position(|b| b.owner == Some(block_id)) {
                seg.blocks[pos].owner = None;
                // merge until no two adjacent free blocks remain
                let mut i = 0;
                while i + 1 < seg.blocks.len() {
                    if seg.blocks[i].owner.is_none() && seg.blocks[i + 1].owner.is_none() {
                        let next = seg.blocks.remove(i + 1);
                        seg.blocks[i].size += next.size;
                    } else {
                        i += 1;
                    }
                }
                return Ok(());
            }
        }
        Err(SimError::UnknownBlock(block_id))
    }
}

/// Replays events through the reference allocator.
pub fn simulate_reference(
    events: &[OrchestratedEvent],
    cfg: &SimConfig,
) -> Result<SimOutcome, SimError> {
    validate_events(events)?;
    cfg.validate()?;
    let mut alloc = ReferenceAllocator::new(*cfg);
    let mut outcome = SimOutcome::default();
    for e in events {
        match e.kind {
            EventKind::Alloc => {
                if !alloc.alloc(e.block_id, e.size_bytes)? {
                    outcome.oom = Some(OomEvent {
                        ts_us: e.ts_us,
                        block_id: e.block_id,
                        requested_bytes: e.size_bytes,
                    });
                    break;
                }
            }
            EventKind::Free => alloc.free(e.block_id)?,
        }
        outcome.push(CurvePoint {
            ts_us: e.ts_us,
            allocated_bytes: alloc.allocated(),
            reserved_bytes: alloc.reserved(),
        });
    }
    Ok(outcome)
}
