//! Profiler trace ingestion.
//!
//! Reads trace-event JSON (plain or gzip-compressed), keeps the four record
//! categories the estimator understands and normalizes them into
//! [`TraceEvent`]s sorted by `(start_us, file_order)`.

mod annotations;
mod mapping;
mod windows;

pub use annotations::{index_annotations, AnnotatedWindow, AnnotationIndex, Placement, TimeWindow};
pub use mapping::{CategoryNames, FieldMapping};
pub use windows::{build_windows, WindowForest, WindowKind, WindowNode};

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Read;

use rayon::prelude::*;
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed trace at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("trace contains no recognized events ({dropped} records dropped, {rejected} rejected)")]
    EmptyTrace { dropped: usize, rejected: usize },
    #[error("invalid field mapping: {0}")]
    Mapping(String),
    #[error("partially overlapping windows on one thread: {}", format_pairs(.offenders))]
    Structure { offenders: Vec<(usize, usize)> },
    #[error("at least 2 iteration windows are required, found {found}")]
    InsufficientIterations { found: usize },
    #[error("iteration windows overlap: event {first} and event {second}")]
    OverlappingIterations { first: usize, second: usize },
    #[error("failed to read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to build ingest thread pool: {0}")]
    ThreadPool(String),
}

fn format_pairs(pairs: &[(usize, usize)]) -> String {
    let shown: Vec<String> = pairs
        .iter()
        .take(8)
        .map(|(a, b)| format!("events {a}/{b}"))
        .collect();
    let mut text = shown.join(", ");
    if pairs.len() > 8 {
        text.push_str(&format!(" (+{} more)", pairs.len() - 8));
    }
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventCategory {
    PythonFunction,
    UserAnnotation,
    CpuOp,
    CpuInstant,
}

impl EventCategory {
    /// Windowed categories carry a duration; instants carry memory arguments.
    pub fn is_windowed(self) -> bool {
        !matches!(self, EventCategory::CpuInstant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemArgs {
    pub address: u64,
    /// Positive for an allocation, negative for a deallocation.
    pub bytes: i64,
    pub device_id: i64,
    pub total_allocated: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub category: EventCategory,
    pub name: String,
    pub start_us: i64,
    pub duration_us: Option<i64>,
    pub thread_id: i64,
    pub seq_no: Option<i64>,
    pub mem: Option<MemArgs>,
    pub file_order: usize,
}

impl TraceEvent {
    /// End of the event's window; instants end where they start.
    pub fn end_us(&self) -> i64 {
        self.start_us + self.duration_us.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    /// Worker threads used to normalize records. `0` uses the global pool.
    pub threads: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { threads: 0 }
    }
}

/// Normalized event stream plus the tallies of what was left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub events: Vec<TraceEvent>,
    /// Records with a category outside the four recognized ones.
    pub dropped_unrecognized: usize,
    /// Memory instants for a device other than the target device.
    pub dropped_other_device: usize,
    /// Recognized records that violate an event invariant (zero bytes,
    /// missing duration, negative timestamp, ...).
    pub rejected: usize,
    pub target_device: Option<i64>,
}

impl ParsedTrace {
    pub fn dropped(&self) -> usize {
        self.dropped_unrecognized + self.dropped_other_device
    }
}

enum RecordOutcome {
    Keep(TraceEvent),
    Unrecognized,
    Rejected,
}

/// Parses a trace file. Gzip input is detected from its magic bytes.
pub fn parse_trace(
    source: &[u8],
    mapping: &FieldMapping,
    options: IngestOptions,
) -> Result<ParsedTrace, IngestError> {
    mapping.validate().map_err(IngestError::Mapping)?;
    if source.starts_with(&[0x1f, 0x8b]) {
        let mut plain = Vec::new();
        flate2::read::GzDecoder::new(source).read_to_end(&mut plain)?;
        return parse_plain(&plain, mapping, options);
    }
    parse_plain(source, mapping, options)
}

fn parse_plain(
    source: &[u8],
    mapping: &FieldMapping,
    options: IngestOptions,
) -> Result<ParsedTrace, IngestError> {
    let records = split_records(source, mapping)?;

    let normalize = || -> Result<Vec<RecordOutcome>, IngestError> {
        records
            .par_iter()
            .enumerate()
            .map(|(order, raw)| normalize_record(source, raw, order, mapping))
            .collect()
    };
    let outcomes = if options.threads == 0 {
        normalize()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| IngestError::ThreadPool(e.to_string()))?
            .install(normalize)?
    };

    let mut dropped_unrecognized = 0;
    let mut rejected = 0;
    let mut kept = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        match outcome {
            RecordOutcome::Keep(event) => kept.push(event),
            RecordOutcome::Unrecognized => dropped_unrecognized += 1,
            RecordOutcome::Rejected => rejected += 1,
        }
    }

    let target_device = mapping.target_device.or_else(|| {
        kept.iter()
            .find_map(|e| e.mem.as_ref().map(|m| m.device_id))
    });
    let before = kept.len();
    if let Some(device) = target_device {
        kept.retain(|e| e.mem.map_or(true, |m| m.device_id == device));
    }
    let dropped_other_device = before - kept.len();

    if kept.is_empty() {
        return Err(IngestError::EmptyTrace {
            dropped: dropped_unrecognized + dropped_other_device,
            rejected,
        });
    }
    kept.sort_by_key(|e| (e.start_us, e.file_order));

    Ok(ParsedTrace {
        events: kept,
        dropped_unrecognized,
        dropped_other_device,
        rejected,
        target_device,
    })
}

/// Splits the top-level document into raw per-record slices. Accepts both the
/// object form (`{"traceEvents": [...]}`) and a bare array.
fn split_records<'a>(
    source: &'a [u8],
    mapping: &FieldMapping,
) -> Result<Vec<&'a RawValue>, IngestError> {
    let text = std::str::from_utf8(source).map_err(|e| IngestError::Parse {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".to_string(),
    })?;
    let first = text.trim_start().as_bytes().first().copied();
    if first == Some(b'[') {
        return serde_json::from_str::<Vec<&RawValue>>(text)
            .map_err(|e| json_error(text, &e));
    }
    let top: HashMap<String, &RawValue> =
        serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
    let events = top.get(&mapping.events_key).ok_or_else(|| IngestError::Parse {
        offset: 0,
        message: format!("missing top-level \"{}\" array", mapping.events_key),
    })?;
    serde_json::from_str::<Vec<&RawValue>>(events.get()).map_err(|e| {
        let base = offset_in(source, events.get());
        let inner = json_error(events.get(), &e);
        match inner {
            IngestError::Parse { offset, message } => IngestError::Parse {
                offset: base + offset,
                message,
            },
            other => other,
        }
    })
}

fn offset_in(source: &[u8], part: &str) -> usize {
    (part.as_ptr() as usize).saturating_sub(source.as_ptr() as usize)
}

fn json_error(text: &str, err: &serde_json::Error) -> IngestError {
    let offset = if err.line() == 0 {
        0
    } else {
        let line_start: usize = text
            .split_inclusive('\n')
            .take(err.line() - 1)
            .map(str::len)
            .sum();
        line_start + err.column().saturating_sub(1)
    };
    IngestError::Parse {
        offset: offset.min(text.len()),
        message: err.to_string(),
    }
}

fn normalize_record(
    source: &[u8],
    raw: &RawValue,
    file_order: usize,
    mapping: &FieldMapping,
) -> Result<RecordOutcome, IngestError> {
    let value: Value = serde_json::from_str(raw.get()).map_err(|e| IngestError::Parse {
        offset: offset_in(source, raw.get()),
        message: e.to_string(),
    })?;
    let Some(object) = value.as_object() else {
        return Err(IngestError::Parse {
            offset: offset_in(source, raw.get()),
            message: "trace record is not an object".to_string(),
        });
    };

    let Some(category) = object
        .get(&mapping.category_key)
        .and_then(Value::as_str)
        .and_then(|c| mapping.categories.classify(c))
    else {
        return Ok(RecordOutcome::Unrecognized);
    };

    let name = object
        .get(&mapping.name_key)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let Some(start_us) = object.get(&mapping.timestamp_key).and_then(as_micros) else {
        return Ok(RecordOutcome::Rejected);
    };
    if start_us < 0 {
        return Ok(RecordOutcome::Rejected);
    }
    let thread_id = object
        .get(&mapping.thread_key)
        .map(thread_id_of)
        .unwrap_or(0);
    let args = object.get(&mapping.args_key).and_then(Value::as_object);

    let mut event = TraceEvent {
        category,
        name,
        start_us,
        duration_us: None,
        thread_id,
        seq_no: None,
        mem: None,
        file_order,
    };

    if category.is_windowed() {
        // floor(ts + dur) keeps containment relations between floored stamps
        let Some(end_us) = object
            .get(&mapping.duration_key)
            .and_then(Value::as_f64)
            .zip(object.get(&mapping.timestamp_key).and_then(Value::as_f64))
            .map(|(dur, ts)| (ts + dur).floor() as i64)
        else {
            return Ok(RecordOutcome::Rejected);
        };
        if end_us < start_us {
            return Ok(RecordOutcome::Rejected);
        }
        event.duration_us = Some(end_us - start_us);
        if category == EventCategory::CpuOp {
            event.seq_no = args
                .and_then(|a| a.get(&mapping.sequence_key))
                .and_then(Value::as_i64);
        }
    } else {
        let Some(args) = args else {
            return Ok(RecordOutcome::Rejected);
        };
        let address = args.get(&mapping.address_key).and_then(as_address);
        let bytes = args.get(&mapping.bytes_key).and_then(Value::as_i64);
        let (Some(address), Some(bytes)) = (address, bytes) else {
            return Ok(RecordOutcome::Rejected);
        };
        if address == 0 || bytes == 0 {
            return Ok(RecordOutcome::Rejected);
        }
        event.mem = Some(MemArgs {
            address,
            bytes,
            device_id: args
                .get(&mapping.device_key)
                .and_then(Value::as_i64)
                .unwrap_or(0),
            total_allocated: args
                .get(&mapping.total_allocated_key)
                .and_then(Value::as_u64),
        });
    }
    Ok(RecordOutcome::Keep(event))
}

fn as_micros(value: &Value) -> Option<i64> {
    if let Some(v) = value.as_i64() {
        return Some(v);
    }
    value
        .as_f64()
        .filter(|v| v.is_finite())
        .map(|v| v.floor() as i64)
}

fn as_address(value: &Value) -> Option<u64> {
    match value {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => {
            let s = s.trim();
            match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                Some(hex) => u64::from_str_radix(hex, 16).ok(),
                None => s.parse().ok(),
            }
        }
        _ => None,
    }
}

fn thread_id_of(value: &Value) -> i64 {
    match value {
        Value::Number(n) => n.as_i64().unwrap_or(0),
        Value::String(s) => s.parse().unwrap_or_else(|_| {
            let mut hasher = DefaultHasher::new();
            s.hash(&mut hasher);
            (hasher.finish() >> 1) as i64
        }),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedTrace, IngestError> {
        parse_trace(text.as_bytes(), &FieldMapping::default(), IngestOptions::default())
    }

    #[test]
    fn op_sorts_before_later_instant() {
        let trace = r#"{"traceEvents": [
            {"ph": "i", "cat": "cpu_instant_event", "name": "[memory]", "ts": 12, "tid": 1,
             "args": {"Addr": 10, "Bytes": 1024, "Device Id": 0}},
            {"ph": "X", "cat": "cpu_op", "name": "aten::empty", "ts": 10, "dur": 5, "tid": 1}
        ]}"#;
        let parsed = parse(trace).unwrap();
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.events[0].category, EventCategory::CpuOp);
        assert_eq!(parsed.events[1].category, EventCategory::CpuInstant);
        assert_eq!(parsed.events[1].mem.unwrap().bytes, 1024);
        assert_eq!(parsed.events[1].file_order, 0);
    }

    #[test]
    fn zero_byte_instant_is_rejected() {
        let trace = r#"{"traceEvents": [
            {"ph": "X", "cat": "cpu_op", "name": "aten::empty", "ts": 10, "dur": 5, "tid": 1},
            {"ph": "i", "cat": "cpu_instant_event", "name": "[memory]", "ts": 12, "tid": 1,
             "args": {"Addr": 10, "Bytes": 0, "Device Id": 0}}
        ]}"#;
        let parsed = parse(trace).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.rejected, 1);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let trace = r#"{"traceEvents": [{"ph": "X", "cat": "cpu_op", "ts": 1"#;
        match parse(trace) {
            Err(IngestError::Parse { offset, .. }) => {
                assert!(offset > 0 && offset <= trace.len(), "offset {offset}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_categories_are_counted() {
        let trace = r#"[
            {"ph": "X", "cat": "kernel", "name": "k", "ts": 1, "dur": 1},
            {"ph": "M", "name": "process_name"},
            {"ph": "X", "cat": "user_annotation", "name": "ProfilerStep#0", "ts": 0, "dur": 9}
        ]"#;
        let parsed = parse(trace).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.dropped_unrecognized, 2);
    }

    #[test]
    fn nothing_recognized_is_empty_trace() {
        let err = parse(r#"{"traceEvents": [{"cat": "kernel", "ts": 1}]}"#).unwrap_err();
        assert!(matches!(err, IngestError::EmptyTrace { dropped: 1, .. }));
    }

    #[test]
    fn only_target_device_instants_survive() {
        let trace = r#"{"traceEvents": [
            {"cat": "cpu_instant_event", "ts": 1, "args": {"Addr": 1, "Bytes": 8, "Device Id": 0}},
            {"cat": "cpu_instant_event", "ts": 2, "args": {"Addr": 2, "Bytes": 8, "Device Id": 1}},
            {"cat": "cpu_instant_event", "ts": 3, "args": {"Addr": 3, "Bytes": 8, "Device Id": 0}}
        ]}"#;
        let parsed = parse(trace).unwrap();
        assert_eq!(parsed.target_device, Some(0));
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.dropped_other_device, 1);

        let mapping = FieldMapping {
            target_device: Some(1),
            ..FieldMapping::default()
        };
        let parsed = parse_trace(trace.as_bytes(), &mapping, IngestOptions::default()).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.events[0].mem.unwrap().address, 2);
    }

    #[test]
    fn fractional_timestamps_are_floored() {
        let trace = r#"[{"cat": "cpu_op", "name": "a", "ts": 10.7, "dur": 0.5, "tid": "7"}]"#;
        let parsed = parse(trace).unwrap();
        let e = &parsed.events[0];
        assert_eq!((e.start_us, e.end_us(), e.thread_id), (10, 11, 7));
    }

    #[test]
    fn gzip_input_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let trace = r#"{"traceEvents": [{"cat": "cpu_op", "name": "a", "ts": 3, "dur": 2}]}"#;
        let mut encoder = GzEncoder::new(Vec::new(), flate2::Compression::default());
        encoder.write_all(trace.as_bytes()).unwrap();
        let compressed = encoder.finish().unwrap();
        let parsed = parse_trace(&compressed, &FieldMapping::default(), IngestOptions::default())
            .unwrap();
        assert_eq!(parsed, parse(trace).unwrap());
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let trace = r#"[
            {"cat": "cpu_instant_event", "ts": 5, "args": {"Addr": 1, "Bytes": 8}},
            {"cat": "cpu_instant_event", "ts": 5, "args": {"Addr": 1, "Bytes": -8}},
            {"cat": "cpu_instant_event", "ts": 4, "args": {"Addr": "0x2", "Bytes": 8}}
        ]"#;
        let parsed = parse(trace).unwrap();
        let orders: Vec<usize> = parsed.events.iter().map(|e| e.file_order).collect();
        assert_eq!(orders, vec![2, 0, 1]);
        assert_eq!(parsed.events[0].mem.unwrap().address, 2);
    }
}
