//! Evaluation metrics over recorded runs: relative error, median relative
//! error (MRE), probability of estimation failure (PEF) and memory
//! conservation potential (MCP).
//!
//! Every function is generic over [`Scalar`], so the same table can be
//! evaluated in `f32`, `f64` or exactly in `Ratio<i128>`.

use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("relative error is undefined for a measured peak of 0")]
    UndefinedError,
    #[error("no records to aggregate")]
    NoData,
    #[error("line {line}: {message}")]
    Invalid { line: u64, message: String },
    #[error("failed to read run records: {0}")]
    Csv(#[from] csv::Error),
}

/// One estimator run on one configuration and device, both validation
/// rounds folded together. Byte quantities are non-negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub config_id: String,
    pub device: String,
    pub estimator: String,
    /// Peak observed when running with the full device (round 1).
    pub m_peak_measured: u64,
    /// Peak observed in the round-2 run, when that round happened.
    pub m_peak_measured_r2: Option<u64>,
    pub m_peak_estimated: u64,
    pub oom_r1: bool,
    pub oom_r2: Option<bool>,
    pub m_init: u64,
    pub m_fm: u64,
    pub m_max: u64,
}

impl RunRecord {
    pub fn predicted_oom(&self) -> bool {
        self.m_peak_estimated > self.m_max
    }

    pub fn c1(&self) -> bool {
        correctness1(self.predicted_oom(), self.oom_r1)
    }

    pub fn c2(&self) -> bool {
        correctness2(self.c1(), self.oom_r2, self.oom_r1)
    }

    /// Whether the second validation round applies to this run.
    pub fn second_round_due(&self) -> bool {
        self.c1() && !self.oom_r1
    }

    fn validate(&self) -> Result<(), String> {
        let has_r2 = self.oom_r2.is_some();
        if has_r2 != self.second_round_due() {
            return Err(if has_r2 {
                "round-2 fields present but round 2 only runs when C1 = 1 and oom_r1 = false".into()
            } else {
                "round-2 fields missing although C1 = 1 and oom_r1 = false".into()
            });
        }
        if self.m_peak_measured_r2.is_some() && !has_r2 {
            return Err("m_peak_measured_r2 given without oom_r2".into());
        }
        Ok(())
    }
}

pub fn relative_error<S: Scalar>(estimated: u64, measured: u64) -> Result<S, MetricsError> {
    if measured == 0 {
        return Err(MetricsError::UndefinedError);
    }
    let diff = (i128::from(estimated) - i128::from(measured)).abs();
    Ok(S::from_i128(diff) / S::from_i128(i128::from(measured)))
}

/// Median; an even count averages the two central values.
pub fn median<S: Scalar>(values: &[S]) -> Result<S, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoData);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        Ok(v[mid].clone())
    } else {
        Ok((v[mid - 1].clone() + v[mid].clone()) / S::from_i128(2))
    }
}

/// Error that enters the median for `r`, or `None` when the run is excluded
/// (a real OOM in round 1 leaves no ground truth).
pub fn selected_error<S: Scalar>(r: &RunRecord) -> Result<Option<S>, MetricsError> {
    if r.oom_r1 {
        return Ok(None);
    }
    let measured = match r.oom_r2 {
        Some(false) => r.m_peak_measured_r2.unwrap_or(r.m_peak_measured),
        _ => r.m_peak_measured,
    };
    relative_error(r.m_peak_estimated, measured).map(Some)
}

pub fn mre<S: Scalar>(records: &[RunRecord]) -> Result<S, MetricsError> {
    let mut errors = Vec::new();
    for r in records {
        if let Some(e) = selected_error(r)? {
            errors.push(e);
        }
    }
    median(&errors)
}

pub fn correctness1(predicted_oom: bool, oom_r1: bool) -> bool {
    predicted_oom == oom_r1
}

pub fn correctness2(c1: bool, oom_r2: Option<bool>, oom_r1: bool) -> bool {
    c1 && (oom_r2 == Some(false) || oom_r1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Round {
    First,
    Second,
}

pub fn pef<S: Scalar>(records: &[RunRecord], round: Round) -> Result<S, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoData);
    }
    let passed = records
        .iter()
        .filter(|r| match round {
            Round::First => r.c1(),
            Round::Second => r.c2(),
        })
        .count();
    let n = records.len() as i128;
    Ok(S::from_i128(n - passed as i128) / S::from_i128(n))
}

/// Signed bytes saved by trusting the estimate for this run.
pub fn memory_saving(r: &RunRecord) -> i128 {
    let max = i128::from(r.m_max);
    if r.c1() && r.oom_r2 == Some(false) {
        max - i128::from(r.m_peak_estimated)
    } else if r.c1() && r.oom_r1 {
        max
    } else {
        -max
    }
}

pub fn mcp<S: Scalar>(records: &[RunRecord]) -> Result<S, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoData);
    }
    let total: i128 = records.iter().map(memory_saving).sum();
    Ok(S::from_i128(total) / S::from_i128(records.len() as i128))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics<S> {
    pub config_id: String,
    pub c1: bool,
    pub c2: bool,
    pub error: Option<S>,
    pub saving_bytes: i128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<S> {
    pub n: usize,
    /// `None` when every run hit a real OOM in round 1.
    pub mre: Option<S>,
    pub pef_r1: S,
    pub pef_r2: S,
    pub mcp_bytes: S,
    pub runs: Vec<RunMetrics<S>>,
}

impl<S: Scalar> MetricsReport<S> {
    pub fn compute(records: &[RunRecord]) -> Result<Self, MetricsError> {
        let runs = records
            .iter()
            .map(|r| {
                Ok(RunMetrics {
                    config_id: r.config_id.clone(),
                    c1: r.c1(),
                    c2: r.c2(),
                    error: selected_error(r)?,
                    saving_bytes: memory_saving(r),
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let mre = match mre(records) {
            Ok(v) => Some(v),
            Err(MetricsError::NoData) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n: records.len(),
            mre,
            pef_r1: pef(records, Round::First)?,
            pef_r2: pef(records, Round::Second)?,
            mcp_bytes: mcp(records)?,
            runs,
        })
    }

    /// Plain-text summary, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = format!("n = {}\n", self.n);
        match &self.mre {
            Some(m) => out.push_str(&format!("mre = {m}\n")),
            None => out.push_str("mre = none\n"),
        }
        out.push_str(&format!("pef_r1 = {}\n", self.pef_r1));
        out.push_str(&format!("pef_r2 = {}\n", self.pef_r2));
        out.push_str(&format!("mcp_bytes = {}\n", self.mcp_bytes));
        out
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    config_id: String,
    #[serde(default)]
    device: String,
    #[serde(default)]
    estimator: String,
    m_peak_measured: String,
    #[serde(default)]
    m_peak_measured_r2: String,
    m_peak_estimated: String,
    oom_r1: String,
    #[serde(default)]
    oom_r2: String,
    m_init: String,
    m_fm: String,
    m_max: String,
}

fn parse_bytes(field: &str, v: &str) -> Result<u64, String> {
    v.trim()
        .parse::<u64>()
        .map_err(|_| format!("{field}: expected a non-negative byte count, got {v:?}"))
}

fn parse_bool(field: &str, v: &str) -> Result<bool, String> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(format!("{field}: expected a boolean, got {v:?}")),
    }
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, String> {
    let v = v.trim();
    if v.is_empty() || v == "-" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl RawRecord {
    fn into_record(self) -> Result<RunRecord, String> {
        Ok(RunRecord {
            m_peak_measured: parse_bytes("m_peak_measured", &self.m_peak_measured)?,
            m_peak_measured_r2: optional(&self.m_peak_measured_r2, |v| {
                parse_bytes("m_peak_measured_r2", v)
            })?,
            m_peak_estimated: parse_bytes("m_peak_estimated", &self.m_peak_estimated)?,
            oom_r1: parse_bool("oom_r1", &self.oom_r1)?,
            oom_r2: optional(&self.oom_r2, |v| parse_bool("oom_r2", v))?,
            m_init: parse_bytes("m_init", &self.m_init)?,
            m_fm: parse_bytes("m_fm", &self.m_fm)?,
            m_max: parse_bytes("m_max", &self.m_max)?,
            config_id: self.config_id,
            device: self.device,
            estimator: self.estimator,
        })
    }
}

/// Loads a CSV run-record table with a header row. Records that break the
/// round-2 gating rule are rejected with their line number.
pub fn read_run_records<R: Read>(reader: R) -> Result<Vec<RunRecord>, MetricsError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut out = Vec::new();
    let mut row = csv::StringRecord::new();
    while csv.read_record(&mut row)? {
        let line = row.position().map_or(0, |p| p.line());
        let record = row
            .deserialize::<RawRecord>(Some(&headers))
            .map_err(|e| e.to_string())
            .and_then(RawRecord::into_record)
            .and_then(|r| r.validate().map(|()| r))
            .map_err(|message| MetricsError::Invalid { line, message })?;
        out.push(record);
    }
    Ok(out)
}
