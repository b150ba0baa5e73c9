//! Synthetic training traces with a known block inventory.
//!
//! The generated trace mimics a profiled training loop: parameters moved to
//! the device before the first step, then per step a dataloader fetch,
//! a forward pass over linear layers, a loss computed at script level, a
//! backward pass on a separate thread and an optimizer step. Alongside the
//! trace the generator records every block it emitted, the class it should
//! be given and the lifetime it should have once re-timed into the analysis
//! iteration. Those expectations come from the construction itself, not from
//! running the pipeline.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analyzer::LifecycleClass;
use crate::orchestrator::{EventKind, OrchestratedEvent, OrchestratedSequence};
use crate::trace::TimeWindow;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
}

/// Where the gradient clear sits inside each training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroGradPlacement {
    /// After the forward pass, right before backward.
    BeforeBackward,
    StartOfIteration,
    /// Never cleared: gradients are created once and accumulated in place.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub iterations: usize,
    /// One linear layer per parameter; a layer's gradient has its
    /// parameter's size.
    pub parameter_bytes: Vec<u64>,
    /// Forward output kept for backward, one per layer.
    pub activation_bytes: Vec<u64>,
    /// Blocks produced by each dataloader fetch.
    pub batch_bytes: Vec<u64>,
    pub gradients: bool,
    /// Two optimizer-state blocks per parameter, created in the first step.
    pub optimizer_state: bool,
    pub zero_grad: ZeroGradPlacement,
    /// Temporary freed inside every forward and backward op; 0 disables it.
    pub scratch_bytes: u64,
    /// Temporary inside the optimizer step; 0 disables it.
    pub optimizer_temp_bytes: u64,
    /// Script-level temporary no operator owns; 0 disables it.
    pub script_temp_bytes: u64,
    /// 1-based iteration the inventory's orchestrated lifetimes refer to.
    pub analysis_iteration: usize,
    pub seed: u64,
    /// Base spacing between consecutive timestamps.
    pub step_us: u32,
    /// Extra random spacing, `0..=jitter_us`, added to every step.
    pub jitter_us: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::small()
    }
}

const MIB: u64 = 1 << 20;
const KIB: u64 = 1 << 10;

impl SynthSpec {
    /// The `synth_small` fixture configuration.
    pub fn small() -> Self {
        Self {
            iterations: 3,
            parameter_bytes: vec![4 * MIB, 256 * KIB, 12 * MIB],
            activation_bytes: vec![3 * MIB, 512 * KIB + 100, 24 * MIB],
            batch_bytes: vec![6 * MIB, 2 * KIB],
            gradients: true,
            optimizer_state: true,
            zero_grad: ZeroGradPlacement::BeforeBackward,
            scratch_bytes: 700 * KIB,
            optimizer_temp_bytes: 3000,
            script_temp_bytes: 64 * KIB,
            analysis_iteration: 2,
            seed: 7,
            step_us: 10,
            jitter_us: 3,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.iterations < 2 {
            return bad(format!("need at least 2 iterations, got {}", self.iterations));
        }
        if self.parameter_bytes.is_empty() {
            return bad("need at least one parameter".into());
        }
        if self.activation_bytes.len() != self.parameter_bytes.len() {
            return bad("activation_bytes must list one size per parameter".into());
        }
        let sizes = self
            .parameter_bytes
            .iter()
            .chain(&self.activation_bytes)
            .chain(&self.batch_bytes);
        if sizes.into_iter().any(|&s| s == 0) {
            return bad("all block sizes must be at least 1 byte".into());
        }
        if self.analysis_iteration == 0 || self.analysis_iteration > self.iterations {
            return bad(format!(
                "analysis_iteration {} is outside 1..={}",
                self.analysis_iteration, self.iterations
            ));
        }
        if self.optimizer_temp_bytes != 0 && self.parameter_bytes.contains(&self.optimizer_temp_bytes) {
            // it would be indistinguishable from an optimizer state
            return bad("optimizer_temp_bytes must differ from every parameter size".into());
        }
        if self.step_us == 0 {
            return bad("step_us must be positive".into());
        }
        Ok(())
    }
}

/// One block the generator emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedBlock {
    pub label: String,
    /// 0-based training step, `None` before the first step.
    pub iteration: Option<usize>,
    pub size_bytes: u64,
    /// `None` for blocks no operator can be credited with.
    pub class: Option<LifecycleClass>,
    pub alloc_us: i64,
    pub dealloc_us: Option<i64>,
    /// Re-timed `(alloc, free)` inside the analysis iteration, or `None`
    /// when the block takes no part in it.
    pub orchestrated: Option<(i64, Option<i64>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    pub blocks: Vec<ExpectedBlock>,
    pub analysis_window: TimeWindow,
    /// `(start, end)` of every iteration window.
    pub iteration_windows: Vec<TimeWindow>,
    /// `(start, end)` of every zero_grad window.
    pub zero_grad_windows: Vec<TimeWindow>,
}

impl Inventory {
    /// Count of blocks per class (`None` = unattributed).
    pub fn count(&self, class: Option<LifecycleClass>) -> usize {
        self.blocks.iter().filter(|b| b.class == class).count()
    }

    /// The analysis-iteration event sequence the pipeline should produce.
    /// Block ids are inventory positions, which is allocation order.
    pub fn expected_sequence(&self) -> OrchestratedSequence {
        let mut events = Vec::new();
        for (id, b) in self.blocks.iter().enumerate() {
            if let (Some(class), Some((alloc, free))) = (b.class, b.orchestrated) {
                events.push(OrchestratedEvent {
                    ts_us: alloc,
                    kind: EventKind::Alloc,
                    block_id: id,
                    size_bytes: b.size_bytes,
                    class,
                });
                if let Some(ts_us) = free {
                    events.push(OrchestratedEvent {
                        ts_us,
                        kind: EventKind::Free,
                        block_id: id,
                        size_bytes: b.size_bytes,
                        class,
                    });
                }
            }
        }
        OrchestratedSequence::from_events(events, self.analysis_window)
    }

    /// CSV sidecar, one row per block.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        #[derive(Serialize)]
        struct Row<'a> {
            label: &'a str,
            iteration: Option<usize>,
            size_bytes: u64,
            class: &'a str,
            alloc_us: i64,
            dealloc_us: Option<i64>,
            orch_alloc_us: Option<i64>,
            orch_free_us: Option<i64>,
        }
        let mut csv = csv::Writer::from_writer(writer);
        for b in &self.blocks {
            csv.serialize(Row {
                label: &b.label,
                iteration: b.iteration,
                size_bytes: b.size_bytes,
                class: b.class.map_or("unattributed", LifecycleClass::as_str),
                alloc_us: b.alloc_us,
                dealloc_us: b.dealloc_us,
                orch_alloc_us: b.orchestrated.map(|o| o.0),
                orch_free_us: b.orchestrated.and_then(|o| o.1),
            })?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub trace: Vec<u8>,
    pub inventory: Inventory,
    pub record_count: usize,
}

const MAIN: i64 = 1;
const BACKWARD: i64 = 2;

struct Emitter {
    rng: ChaCha8Rng,
    now: i64,
    step: i64,
    jitter: i64,
    records: Vec<(i64, Value)>,
    next_addr: u64,
    total_allocated: u64,
    blocks: Vec<ExpectedBlock>,
    addresses: Vec<u64>,
}

impl Emitter {
    fn tick(&mut self) -> i64 {
        let extra = if self.jitter > 0 { self.rng.gen_range(0..=self.jitter) } else { 0 };
        self.now += self.step + extra;
        self.now
    }

    fn window(&mut self, cat: &str, name: &str, tid: i64, start: i64, end: i64, seq: Option<i64>) {
        let mut record = json!({
            "ph": "X", "cat": cat, "name": name, "pid": 1, "tid": tid,
            "ts": start, "dur": end - start,
        });
        if let Some(seq) = seq {
            record["args"] = json!({ "Sequence number": seq });
        }
        self.records.push((start, record));
    }

    fn memory(&mut self, tid: i64, ts: i64, addr: u64, bytes: i64) {
        self.total_allocated = self.total_allocated.wrapping_add_signed(bytes);
        self.records.push((
            ts,
            json!({
                "ph": "i", "s": "t", "cat": "cpu_instant_event", "name": "[memory]",
                "pid": 1, "tid": tid, "ts": ts,
                "args": {
                    "Addr": addr, "Bytes": bytes, "Total Allocated": self.total_allocated,
                    "Device Id": 0, "Device Type": 1,
                },
            }),
        ));
    }

    fn alloc(&mut self, tid: i64, label: String, iteration: Option<usize>, size: u64, class: Option<LifecycleClass>) -> usize {
        let ts = self.tick();
        let addr = self.next_addr;
        // keep addresses 512-aligned and distinct
        self.next_addr += size.div_ceil(512) * 512 + 512;
        self.memory(tid, ts, addr, size as i64);
        self.blocks.push(ExpectedBlock {
            label,
            iteration,
            size_bytes: size,
            class,
            alloc_us: ts,
            dealloc_us: None,
            orchestrated: None,
        });
        self.addresses.push(addr);
        self.blocks.len() - 1
    }

    fn free(&mut self, tid: i64, block: usize) {
        let ts = self.tick();
        let (addr, size) = (self.addresses[block], self.blocks[block].size_bytes);
        self.memory(tid, ts, addr, -(size as i64));
        self.blocks[block].dealloc_us = Some(ts);
    }

    /// Opens a window; the returned start is closed by [`Emitter::close`].
    fn open(&mut self) -> i64 {
        self.tick()
    }

    fn close(&mut self, cat: &str, name: &str, tid: i64, start: i64, seq: Option<i64>) -> i64 {
        let end = self.tick();
        self.window(cat, name, tid, start, end, seq);
        end
    }
}

#[derive(Clone, Copy)]
enum Role {
    Parameter,
    OptimizerState,
    Gradient(usize),
    Transient,
    Unattributed,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut e = Emitter {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        now: 0,
        step: i64::from(spec.step_us),
        jitter: i64::from(spec.jitter_us),
        records: Vec::new(),
        next_addr: 0x7f00_0000_0000,
        total_allocated: 0,
        blocks: Vec::new(),
        addresses: Vec::new(),
    };
    let layers = spec.parameter_bytes.len();
    let mut roles: Vec<Role> = Vec::new();
    let mut iteration_windows = Vec::new();
    let mut zero_grad_windows: Vec<(usize, TimeWindow)> = Vec::new();
    let scratch = spec.scratch_bytes;

    // parameters are moved to the device before training starts
    let to_start = e.open();
    for (p, &size) in spec.parameter_bytes.iter().enumerate() {
        let op = e.open();
        e.alloc(MAIN, format!("param[{p}]"), None, size, Some(LifecycleClass::Parameter));
        roles.push(Role::Parameter);
        e.close("cpu_op", "aten::empty_strided", MAIN, op, None);
    }
    e.close("python_function", "nn.Module: Model.to", MAIN, to_start, None);

    let mut live_grads: Vec<usize> = Vec::new();
    for k in 0..spec.iterations {
        let step_start = e.open();
        let zero_grad = |e: &mut Emitter, live: &mut Vec<usize>, windows: &mut Vec<(usize, TimeWindow)>| {
            let zs = e.open();
            let py = e.open();
            for g in live.drain(..) {
                e.free(MAIN, g);
            }
            e.close("python_function", "torch/optim/optimizer.py: zero_grad", MAIN, py, None);
            let ze = e.close("user_annotation", "Optimizer.zero_grad#Adam.zero_grad", MAIN, zs, None);
            windows.push((k, TimeWindow::new(zs, ze)));
        };
        if spec.zero_grad == ZeroGradPlacement::StartOfIteration {
            zero_grad(&mut e, &mut live_grads, &mut zero_grad_windows);
        }

        let dl = e.open();
        let collate = e.open();
        let stack = e.open();
        let mut batch = Vec::new();
        for (i, &size) in spec.batch_bytes.iter().enumerate() {
            batch.push(e.alloc(MAIN, format!("batch[{k}][{i}]"), Some(k), size, Some(LifecycleClass::BatchData)));
            roles.push(Role::Transient);
        }
        e.close("cpu_op", "aten::stack", MAIN, stack, None);
        e.close("python_function", "torch/utils/data/_utils/collate.py: default_collate", MAIN, collate, None);
        e.close(
            "user_annotation",
            "enumerate(DataLoader)#_SingleProcessDataLoaderIter.__next__",
            MAIN,
            dl,
            None,
        );

        let mut acts = Vec::new();
        for (l, &size) in spec.activation_bytes.iter().enumerate() {
            let module = e.open();
            let op = e.open();
            acts.push(e.alloc(MAIN, format!("act[{k}][{l}]"), Some(k), size, Some(LifecycleClass::Activation)));
            roles.push(Role::Transient);
            if scratch > 0 {
                let s = e.alloc(MAIN, format!("fwd_scratch[{k}][{l}]"), Some(k), scratch, Some(LifecycleClass::Activation));
                roles.push(Role::Transient);
                e.free(MAIN, s);
            }
            e.close("cpu_op", "aten::linear", MAIN, op, Some(seq_no(k, l, layers)));
            e.close("python_function", &format!("nn.Module: Linear_{l}"), MAIN, module, None);
        }

        if spec.script_temp_bytes > 0 {
            let loss = e.open();
            let t = e.alloc(MAIN, format!("script_temp[{k}]"), Some(k), spec.script_temp_bytes, None);
            roles.push(Role::Unattributed);
            e.free(MAIN, t);
            e.close("python_function", "train.py: compute_loss", MAIN, loss, None);
        }

        if spec.zero_grad == ZeroGradPlacement::BeforeBackward {
            zero_grad(&mut e, &mut live_grads, &mut zero_grad_windows);
        }

        let makes_grads = spec.gradients && (spec.zero_grad != ZeroGradPlacement::Absent || k == 0);
        for l in (0..layers).rev() {
            let eval = e.open();
            let mm = e.open();
            if makes_grads {
                let g = e.alloc(
                    BACKWARD,
                    format!("grad[{k}][{l}]"),
                    Some(k),
                    spec.parameter_bytes[l],
                    Some(LifecycleClass::Gradient),
                );
                roles.push(Role::Gradient(k));
                live_grads.push(g);
            }
            if scratch > 0 {
                let s = e.alloc(BACKWARD, format!("bwd_scratch[{k}][{l}]"), Some(k), scratch, Some(LifecycleClass::Activation));
                roles.push(Role::Transient);
                e.free(BACKWARD, s);
            }
            e.close("cpu_op", "aten::mm", BACKWARD, mm, None);
            e.free(BACKWARD, acts[l]);
            e.close(
                "cpu_op",
                "autograd::engine::evaluate_function: AddmmBackward0",
                BACKWARD,
                eval,
                Some(seq_no(k, l, layers)),
            );
        }

        let opt = e.open();
        let py = e.open();
        if spec.optimizer_state && k == 0 {
            for (p, &size) in spec.parameter_bytes.iter().enumerate() {
                for which in ["exp_avg", "exp_avg_sq"] {
                    let op = e.open();
                    e.alloc(MAIN, format!("{which}[{p}]"), Some(k), size, Some(LifecycleClass::OptimizerState));
                    roles.push(Role::OptimizerState);
                    e.close("cpu_op", "aten::zeros_like", MAIN, op, None);
                }
            }
        }
        if spec.optimizer_temp_bytes > 0 {
            let op = e.open();
            let t = e.alloc(MAIN, format!("opt_temp[{k}]"), Some(k), spec.optimizer_temp_bytes, Some(LifecycleClass::Other));
            roles.push(Role::Transient);
            e.free(MAIN, t);
            e.close("cpu_op", "aten::add", MAIN, op, None);
        }
        e.close("python_function", "torch/optim/adam.py: _single_tensor_adam", MAIN, py, None);
        e.close("user_annotation", "Optimizer.step#Adam.step", MAIN, opt, None);

        for b in batch {
            e.free(MAIN, b);
        }
        let step_end = e.close("user_annotation", &format!("ProfilerStep#{k}"), MAIN, step_start, None);
        iteration_windows.push(TimeWindow::new(step_start, step_end));
        // leave a gap so consecutive steps never share a boundary
        e.tick();
    }

    let a = spec.analysis_iteration - 1;
    let window = iteration_windows[a];
    let zero_grad_end = zero_grad_windows
        .iter()
        .find(|(k, _)| *k == a)
        .map(|(_, w)| w.end_us);
    let next_zero_grad_end = zero_grad_windows
        .iter()
        .find(|(k, _)| *k == a + 1)
        .map(|(_, w)| w.end_us);
    for (block, role) in e.blocks.iter_mut().zip(&roles) {
        block.orchestrated = match *role {
            Role::Parameter => Some((window.start_us, None)),
            Role::OptimizerState if block.iteration == Some(a) => Some((block.alloc_us, None)),
            Role::OptimizerState => Some((window.start_us, None)),
            Role::Gradient(k) => match spec.zero_grad {
                // created once in step 0, never cleared
                ZeroGradPlacement::Absent => Some((block.alloc_us.max(window.start_us), Some(window.end_us))),
                _ if k + 1 == a => Some((window.start_us, Some(zero_grad_end.expect("zero_grad in every step")))),
                // the clear in this step ran before backward produced them,
                // so the next step's clear releases them
                _ if k == a => Some((block.alloc_us, Some(next_zero_grad_end.unwrap_or(window.end_us)))),
                _ => None,
            },
            Role::Transient if block.iteration == Some(a) => Some((block.alloc_us, block.dealloc_us)),
            Role::Transient | Role::Unattributed => None,
        };
    }

    let mut records = e.records;
    records.sort_by_key(|(ts, _)| *ts);
    let record_count = records.len();
    let events: Vec<Value> = records.into_iter().map(|(_, v)| v).collect();
    let trace = serde_json::to_vec(&json!({
        "schemaVersion": 1,
        "deviceProperties": [],
        "traceEvents": events,
    }))
    .expect("trace JSON serializes");

    Ok(SynthOutput {
        trace,
        inventory: Inventory {
            blocks: e.blocks,
            analysis_window: window,
            iteration_windows,
            zero_grad_windows: zero_grad_windows.into_iter().map(|(_, w)| w).collect(),
        },
        record_count,
    })
}

fn seq_no(iteration: usize, layer: usize, layers: usize) -> i64 {
    (iteration * layers + layer) as i64 + 1
}

/// Spec whose trace has roughly `target_records` records, for load tests.
pub fn scaled_spec(target_records: usize, seed: u64) -> SynthSpec {
    let layers = 40usize;
    let base = SynthSpec {
        parameter_bytes: (0..layers).map(|l| (l as u64 + 1) * 64 * KIB).collect(),
        activation_bytes: (0..layers).map(|l| (l as u64 % 7 + 1) * 512 * KIB).collect(),
        seed,
        jitter_us: 0,
        iterations: 2,
        ..SynthSpec::small()
    };
    let per_iteration = {
        let two = generate(&base).expect("base spec is valid").record_count;
        let three = generate(&SynthSpec { iterations: 3, ..base.clone() })
            .expect("base spec is valid")
            .record_count;
        three - two
    };
    SynthSpec {
        iterations: (target_records / per_iteration.max(1)).max(2),
        ..base
    }
}
