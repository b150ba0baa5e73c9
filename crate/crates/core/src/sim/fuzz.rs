//! Seeded random allocation sequences for differential testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analyzer::LifecycleClass;
use crate::orchestrator::{EventKind, OrchestratedEvent, OrchestratedSequence};
use crate::trace::TimeWindow;

use super::{SimConfig, GIB, MIB};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzParams {
    pub max_events: usize,
    pub min_size: u64,
    pub max_size: u64,
    /// Probability of a free whenever some block is live.
    pub free_probability: f64,
}

impl Default for FuzzParams {
    fn default() -> Self {
        Self {
            max_events: 1000,
            min_size: 1,
            max_size: 64 * MIB,
            free_probability: 0.45,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub seed: u64,
    pub sequence: OrchestratedSequence,
    pub config: SimConfig,
}

/// Sizes are log-uniform over `[min_size, max_size]` so both pools get
/// traffic; the device capacity is drawn between 64 MiB and 4 GiB so some
/// cases run into the device limit.
pub fn random_case(seed: u64, params: &FuzzParams) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(1..=params.max_events.max(1));
    let (lo, hi) = ((params.min_size.max(1)) as f64, params.max_size.max(1) as f64);

    let mut events = Vec::with_capacity(target);
    let mut live: Vec<(usize, i64, u64)> = Vec::new();
    let mut next_id = 0usize;
    let mut ts = 0i64;
    while events.len() < target {
        ts += rng.gen_range(0..=2);
        if !live.is_empty() && rng.gen_bool(params.free_probability) {
            let (id, alloc_ts, size) = live.swap_remove(rng.gen_range(0..live.len()));
            ts = ts.max(alloc_ts + 1);
            events.push(event(ts, EventKind::Free, id, size));
        } else {
            let size = (lo * (hi / lo).powf(rng.gen::<f64>())).round().clamp(lo, hi) as u64;
            events.push(event(ts, EventKind::Alloc, next_id, size));
            live.push((next_id, ts, size));
            next_id += 1;
        }
    }

    let capacity = rng.gen_range(64 * MIB..=4 * GIB);
    FuzzCase {
        seed,
        sequence: OrchestratedSequence::from_events(events, TimeWindow::new(0, ts)),
        config: SimConfig::with_capacity(capacity),
    }
}

fn event(ts_us: i64, kind: EventKind, block_id: usize, size_bytes: u64) -> OrchestratedEvent {
    OrchestratedEvent {
        ts_us,
        kind,
        block_id,
        size_bytes,
        class: LifecycleClass::Other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_valid_and_reproducible() {
        for seed in 0..20 {
            let a = random_case(seed, &FuzzParams::default());
            a.sequence.validate().unwrap();
            assert!(a.sequence.events.len() <= 1000);
            let b = random_case(seed, &FuzzParams::default());
            assert_eq!(a.sequence, b.sequence);
            assert_eq!(a.config, b.config);
        }
    }

    #[test]
    fn sizes_stay_in_range() {
        let params = FuzzParams::default();
        let case = random_case(3, &params);
        assert!(case
            .sequence
            .events
            .iter()
            .all(|e| (params.min_size..=params.max_size).contains(&e.size_bytes)));
    }
}
