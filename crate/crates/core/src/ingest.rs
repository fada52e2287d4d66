//! Raw-trace windowing, fixed-length resampling, context selection and CSV
//! cohort loading.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::num::Real;
use crate::types::{
    Cohort, CohortLabel, DirectionCode, Protocol, Provenance, SpeedTrace, SubjectRecord, Trial,
    TypeError, N_DIRECTIONS, TRACE_LEN,
};

/// Lead time kept before TARGET_ON in every window.
pub const PRE_TARGET_MS: f64 = 200.0;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 1000.0;

/// Expected raw CSV header; an optional trailing `sample_rate_hz` column is accepted.
pub const RAW_HEADER: [&str; 10] = [
    "subject_id",
    "cohort",
    "protocol",
    "sequence_index",
    "direction",
    "is_catch",
    "target_on_ms",
    "reaction_time_ms",
    "total_movement_time_ms",
    "speed_samples",
];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("degenerate window: stop {stop_ms} ms <= start {start_ms} ms")]
    DegenerateWindow { start_ms: f64, stop_ms: f64 },
    #[error("input has {0} samples, need at least 2")]
    TooShort(usize),
    #[error("output length {0} must be at least 2")]
    InvalidLength(usize),
    #[error("invalid raw record: {0}")]
    InvalidRecord(String),
    #[error("context size {0} must be a positive multiple of 8")]
    InvalidContextSize(usize),
    #[error("direction {0} has fewer valid trials than the context requires")]
    MissingDirection(DirectionCode),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// One acquisition trial before windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrialRecord {
    pub speed_samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub target_on_ms: f64,
    pub reaction_time_ms: Option<f64>,
    pub total_movement_time_ms: Option<f64>,
    pub direction: DirectionCode,
    pub is_catch: bool,
}

impl RawTrialRecord {
    /// Time of the last sample.
    pub fn record_end_ms(&self) -> f64 {
        (self.speed_samples.len().saturating_sub(1)) as f64 * 1000.0 / self.sample_rate_hz
    }

    fn check(&self) -> Result<(), IngestError> {
        if self.speed_samples.len() < 2 {
            return Err(IngestError::TooShort(self.speed_samples.len()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(IngestError::InvalidRecord(format!(
                "sample rate {}",
                self.sample_rate_hz
            )));
        }
        if !(self.target_on_ms >= 0.0 && self.target_on_ms <= self.record_end_ms()) {
            return Err(IngestError::InvalidRecord(format!(
                "target_on_ms {} outside record span",
                self.target_on_ms
            )));
        }
        Ok(())
    }
}

/// Trial window in record time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start_ms: f64,
    pub stop_ms: f64,
    /// TARGET_ON relative to `start_ms`.
    pub target_on_offset_ms: f64,
}

impl Window {
    pub fn duration_ms(&self) -> f64 {
        self.stop_ms - self.start_ms
    }
}

/// Window from 200 ms before TARGET_ON to TARGET_ON + RT + TMT, or to the end
/// of the record when either time is missing.
pub fn extract_window(raw: &RawTrialRecord) -> Result<Window, IngestError> {
    raw.check()?;
    let end = raw.record_end_ms();
    let (start_ms, target_on_offset_ms) = if raw.target_on_ms >= PRE_TARGET_MS {
        (raw.target_on_ms - PRE_TARGET_MS, PRE_TARGET_MS)
    } else {
        (0.0, raw.target_on_ms)
    };
    let stop_ms = match (raw.reaction_time_ms, raw.total_movement_time_ms) {
        (Some(rt), Some(tmt)) => (raw.target_on_ms + rt + tmt).min(end),
        _ => end,
    };
    if !(stop_ms > start_ms) {
        return Err(IngestError::DegenerateWindow { start_ms, stop_ms });
    }
    Ok(Window {
        start_ms,
        stop_ms,
        target_on_offset_ms,
    })
}

/// Linear resampling to `len` points; sample `i` reads source position
/// `i * (n - 1) / (len - 1)`.
pub fn resample_linear<T: Real>(samples: &[T], len: usize) -> Result<Vec<T>, IngestError> {
    let n = samples.len();
    if n < 2 {
        return Err(IngestError::TooShort(n));
    }
    if len < 2 {
        return Err(IngestError::InvalidLength(len));
    }
    let denom = T::from_usize_lossy(len - 1);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let num = i * (n - 1);
        let j = num / (len - 1);
        let rem = num % (len - 1);
        if rem == 0 {
            out.push(samples[j]);
            continue;
        }
        let frac = T::from_usize_lossy(rem) / denom;
        let (a, b) = (samples[j], samples[j + 1]);
        let v = a + (b - a) * frac;
        out.push(v.max(a.min(b)).min(a.max(b)));
    }
    Ok(out)
}

/// Windows and resamples a raw record into a recorded trial.
pub fn raw_to_trial(raw: &RawTrialRecord, sequence_index: u32) -> Result<Trial, IngestError> {
    let w = extract_window(raw)?;
    let to_index = |ms: f64| (ms * raw.sample_rate_hz / 1000.0).round() as usize;
    let last = raw.speed_samples.len() - 1;
    let i0 = to_index(w.start_ms).min(last);
    let i1 = to_index(w.stop_ms).min(last);
    if i1 < i0 + 1 {
        return Err(IngestError::TooShort(i1.saturating_sub(i0) + 1));
    }
    let samples = resample_linear(&raw.speed_samples[i0..=i1], TRACE_LEN)?;
    let trace = SpeedTrace::new(
        samples,
        w.duration_ms(),
        w.target_on_offset_ms,
        Provenance::Recorded,
    )
    .map_err(|e| match e {
        TypeError::BadTargetOffset { .. } => IngestError::DegenerateWindow {
            start_ms: w.start_ms,
            stop_ms: w.stop_ms,
        },
        other => IngestError::Type(other),
    })?;
    let (rt, mt) = if raw.is_catch {
        (None, None)
    } else {
        (raw.reaction_time_ms, raw.total_movement_time_ms)
    };
    Ok(Trial::new(
        trace,
        raw.direction,
        sequence_index,
        raw.is_catch,
        rt,
        mt,
    )?)
}

// ---------------------------------------------------------------------------
// Context selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSplit {
    /// Selected context trials in sequence order.
    pub context: Vec<Trial>,
    /// All other valid non-catch trials in sequence order.
    pub remainder: Vec<Trial>,
}

/// Picks the first `c / 8` valid presentations of every direction code.
pub fn select_context(record: &SubjectRecord, c: usize) -> Result<ContextSplit, IngestError> {
    if c == 0 || !c.is_multiple_of(N_DIRECTIONS as usize) {
        return Err(IngestError::InvalidContextSize(c));
    }
    let per_direction = c / N_DIRECTIONS as usize;
    let mut taken = [0usize; N_DIRECTIONS as usize];
    let mut context = Vec::with_capacity(c);
    let mut remainder = Vec::new();
    for t in record.valid_trials() {
        let slot = &mut taken[t.direction.code() as usize];
        if *slot < per_direction {
            *slot += 1;
            context.push(t.clone());
        } else {
            remainder.push(t.clone());
        }
    }
    if let Some(d) = DirectionCode::all().find(|d| taken[d.code() as usize] < per_direction) {
        return Err(IngestError::MissingDirection(d));
    }
    Ok(ContextSplit { context, remainder })
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// A dropped row or trial during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestOutput {
    pub cohort: Cohort,
    pub warnings: Vec<IngestWarning>,
}

struct RawRow {
    subject_id: String,
    cohort: CohortLabel,
    protocol: Protocol,
    sequence_index: u32,
    raw: RawTrialRecord,
}

fn parse_opt(s: &str, field: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| format!("{field}: {e}"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("is_catch: {other:?} is not a boolean")),
    }
}

fn parse_row(rec: &csv::StringRecord, has_rate: bool) -> Result<RawRow, String> {
    let field = |i: usize| rec.get(i).unwrap_or("");
    let subject_id = field(0).trim().to_string();
    if subject_id.is_empty() {
        return Err("subject_id is empty".into());
    }
    let cohort: CohortLabel = field(1).parse()?;
    let protocol: Protocol = field(2).parse().map_err(|e: TypeError| e.to_string())?;
    let sequence_index: u32 = field(3)
        .trim()
        .parse()
        .map_err(|e| format!("sequence_index: {e}"))?;
    let direction: u8 = field(4)
        .trim()
        .parse()
        .map_err(|e| format!("direction: {e}"))?;
    let direction = DirectionCode::new(direction).map_err(|e| e.to_string())?;
    let is_catch = parse_bool(field(5))?;
    let target_on_ms = parse_opt(field(6), "target_on_ms")?.ok_or("target_on_ms is empty")?;
    let reaction_time_ms = parse_opt(field(7), "reaction_time_ms")?;
    let total_movement_time_ms = parse_opt(field(8), "total_movement_time_ms")?;
    let speed_samples = field(9)
        .split(';')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("speed_samples: {e}"))?;
    if let Some(v) = speed_samples.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("speed_samples: invalid speed {v}"));
    }
    let sample_rate_hz = if has_rate {
        parse_opt(field(10), "sample_rate_hz")?.unwrap_or(DEFAULT_SAMPLE_RATE_HZ)
    } else {
        DEFAULT_SAMPLE_RATE_HZ
    };
    Ok(RawRow {
        subject_id,
        cohort,
        protocol,
        sequence_index,
        raw: RawTrialRecord {
            speed_samples,
            sample_rate_hz,
            target_on_ms,
            reaction_time_ms,
            total_movement_time_ms,
            direction,
            is_catch,
        },
    })
}

/// Reads raw trial rows from CSV and builds a cohort.
///
/// Malformed rows and degenerate windows are dropped with a warning; a
/// missing or wrong header, or no data rows, is an error.
pub fn ingest_reader<R: Read>(reader: R, label: &str) -> Result<IngestOutput, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| IngestError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_rate =
        names.len() == RAW_HEADER.len() + 1 && names[RAW_HEADER.len()] == "sample_rate_hz";
    if names.len() < RAW_HEADER.len() || names[..RAW_HEADER.len()] != RAW_HEADER {
        return Err(IngestError::Parse {
            line: 1,
            message: format!("expected header {}", RAW_HEADER.join(",")),
        });
    }

    let mut warnings = Vec::new();
    let mut n_rows = 0usize;
    // subject id -> (cohort, protocol, trials), in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (CohortLabel, Protocol, Vec<Trial>)> = BTreeMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        n_rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                warnings.push(IngestWarning {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let row = match parse_row(&rec, has_rate) {
            Ok(r) => r,
            Err(message) => {
                warnings.push(IngestWarning { line, message });
                continue;
            }
        };
        let trial = match raw_to_trial(&row.raw, row.sequence_index) {
            Ok(t) => t,
            Err(e) => {
                warnings.push(IngestWarning {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match groups.get_mut(&row.subject_id) {
            Some((cohort, protocol, trials)) => {
                if *cohort != row.cohort || *protocol != row.protocol {
                    warnings.push(IngestWarning {
                        line,
                        message: format!(
                            "subject {} changes cohort/protocol mid-file",
                            row.subject_id
                        ),
                    });
                    continue;
                }
                trials.push(trial);
            }
            None => {
                order.push(row.subject_id.clone());
                groups.insert(row.subject_id, (row.cohort, row.protocol, vec![trial]));
            }
        }
    }
    if n_rows == 0 {
        return Err(IngestError::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    for w in &warnings {
        warn!("line {}: dropped trial: {}", w.line, w.message);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let (cohort, protocol, trials) = groups.remove(&id).expect("grouped subject");
        subjects.push(SubjectRecord::new(id, cohort, protocol, trials)?);
    }
    Ok(IngestOutput {
        cohort: Cohort::new(label, subjects)?,
        warnings,
    })
}

/// Loads a raw CSV file; the cohort label is the file stem.
pub fn ingest_raw(path: &Path) -> Result<IngestOutput, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Parse {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cohort");
    ingest_reader(file, label)
}
