use proptest::prelude::*;

use gpumem_core::analyzer::{
    filter_relevant, reconstruct_blocks, Attribution, AttributionCondition, LifecycleClass, MemoryBlock,
};
use gpumem_core::metrics::{mre, RunRecord};
use gpumem_core::sim::fuzz::{random_case, FuzzParams};
use gpumem_core::sim::{simulate, SimConfig};
use gpumem_core::trace::{EventCategory, MemArgs, TraceEvent};
use gpumem_core::Exact;

/// Turns a list of (address slot, size, free?) steps into a well-formed
/// instant stream: each step allocates at its slot, frees the slot's open
/// block first when asked.
fn instant_stream(steps: &[(u8, u32, bool)]) -> Vec<TraceEvent> {
    let mut open: Vec<Option<i64>> = vec![None; 16];
    let mut events = Vec::new();
    let push = |bytes: i64, slot: u8, events: &mut Vec<TraceEvent>| {
        let n = events.len();
        events.push(TraceEvent {
            category: EventCategory::CpuInstant,
            name: "[memory]".into(),
            start_us: n as i64,
            duration_us: None,
            thread_id: 1,
            seq_no: None,
            mem: Some(MemArgs {
                address: 0x1000 * (slot as u64 + 1),
                bytes,
                device_id: 0,
                total_allocated: None,
            }),
            file_order: n,
        });
    };
    for &(slot, size, free_first) in steps {
        let slot = slot % 16;
        if let Some(bytes) = open[slot as usize] {
            if free_first {
                push(-bytes, slot, &mut events);
                open[slot as usize] = None;
            }
        }
        let bytes = size as i64 + 1;
        if open[slot as usize].is_none() {
            push(bytes, slot, &mut events);
            open[slot as usize] = Some(bytes);
        }
    }
    events
}

fn block(id: usize, attributed: bool) -> MemoryBlock {
    MemoryBlock {
        block_id: id,
        address: id as u64,
        size_bytes: 512,
        alloc_us: id as i64,
        dealloc_us: None,
        device_id: 0,
        thread_id: 1,
        alloc_event: id,
        dealloc_event: None,
        attribution: attributed.then_some(Attribution {
            op: 0,
            component: 0,
            condition: AttributionCondition::WithinOp,
        }),
        lifecycle: LifecycleClass::Other,
    }
}

fn record() -> impl Strategy<Value = RunRecord> {
    (1u64..1 << 40, 1u64..1 << 40, 1u64..1 << 40, any::<bool>(), any::<bool>(), 1u64..1 << 40).prop_map(
        |(measured, estimated, m_max, oom_r1, oom_r2, measured_r2)| {
            let mut r = RunRecord {
                config_id: "c".into(),
                device: "d".into(),
                estimator: "e".into(),
                m_peak_measured: measured,
                m_peak_measured_r2: None,
                m_peak_estimated: estimated,
                oom_r1,
                oom_r2: None,
                m_init: 0,
                m_fm: 0,
                m_max,
            };
            if r.second_round_due() {
                r.oom_r2 = Some(oom_r2);
                r.m_peak_measured_r2 = (!oom_r2).then_some(measured_r2);
            }
            r
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn open_blocks_match_folded_stream(steps in prop::collection::vec((any::<u8>(), any::<u32>(), any::<bool>()), 0..200)) {
        let events = instant_stream(&steps);
        let r = reconstruct_blocks(&events);
        prop_assert_eq!(r.orphan_frees, 0);
        prop_assert_eq!(r.size_mismatches, 0);
        let mut folded = 0i64;
        for (i, e) in events.iter().enumerate() {
            folded += e.mem.unwrap().bytes;
            let open: i64 = r
                .blocks
                .iter()
                .filter(|b| b.alloc_event <= i && b.dealloc_event.map_or(true, |d| d > i))
                .map(|b| b.size_bytes as i64)
                .sum();
            prop_assert_eq!(folded, open, "event {}", i);
        }
    }

    #[test]
    fn replay_curve_follows_sorted_events(seed in any::<u64>()) {
        let case = random_case(seed, &FuzzParams { max_events: 300, ..FuzzParams::default() });
        let events = &case.sequence.events;
        prop_assert!(events.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        let outcome = simulate(&case.sequence, &SimConfig::default()).unwrap();
        prop_assert!(outcome.oom.is_none());
        prop_assert_eq!(outcome.curve.len(), events.len());
        for (p, e) in outcome.curve.iter().zip(events) {
            prop_assert_eq!(p.ts_us, e.ts_us);
            prop_assert!(p.allocated_bytes <= p.reserved_bytes);
        }
        // nothing is released without device pressure
        prop_assert!(outcome.curve.windows(2).all(|w| w[0].reserved_bytes <= w[1].reserved_bytes));
    }

    #[test]
    fn relevance_filter_is_idempotent(flags in prop::collection::vec(any::<bool>(), 1..60)) {
        prop_assume!(flags.iter().any(|&f| f));
        let blocks: Vec<MemoryBlock> = flags.iter().enumerate().map(|(i, &f)| block(i, f)).collect();
        let once = filter_relevant(blocks).unwrap();
        prop_assert_eq!(once.len(), flags.iter().filter(|&&f| f).count());
        let twice = filter_relevant(once.clone()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn mre_ignores_record_order(records in prop::collection::vec(record(), 1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let forward = mre::<Exact>(&records);
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let reordered = mre::<Exact>(&shuffled);
        prop_assert_eq!(forward.ok(), reordered.ok());
    }
}
