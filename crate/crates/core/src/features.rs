//! Per-trial kinematic parameters, subject-level aggregation and session-time
//! accounting.
//!
//! Movement onset and offset are found with a persistence threshold detector
//! on the resampled trace: the threshold is `max(floor, fraction * peak)`
//! where `peak` is the largest post-TARGET_ON speed. Onset is the first
//! post-TARGET_ON sample that starts a run of `persistence` samples at or
//! above threshold. Offset is the first sample after the post-onset peak that
//! starts a run of `persistence` samples below threshold, or the last sample
//! if the speed never drops back.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;
use crate::types::{
    Aggregation, Cohort, KstParameter, ParameterAggregation, SpeedTrace, SubjectRecord, Trial,
    TRACE_LEN,
};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("no sample reaches the movement threshold")]
    NoMovement,
    #[error("no sample precedes TARGET_ON")]
    NoPostureSegment,
    #[error("no sample follows TARGET_ON")]
    NoPostTarget,
    #[error("metadata mode needs reaction and movement times")]
    MissingMetadata,
    #[error("empty input")]
    EmptyInput,
}

/// Threshold detector constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub floor_mps: f64,
    pub peak_fraction: f64,
    pub persistence: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            floor_mps: 0.05,
            peak_fraction: 0.10,
            persistence: 3,
        }
    }
}

/// Where RT/MT come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Threshold detector on the trace.
    #[default]
    Trace,
    /// Acquisition-log reaction and movement times.
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KstFeatures {
    pub posture_speed_mps: f64,
    pub reaction_time_ms: f64,
    pub movement_time_ms: f64,
    pub max_speed_mps: f64,
    pub onset_ms: f64,
    pub offset_ms: f64,
    pub detector_used: FeatureMode,
}

impl KstFeatures {
    pub fn get(&self, p: KstParameter) -> f64 {
        match p {
            KstParameter::PostureSpeed => self.posture_speed_mps,
            KstParameter::ReactionTime => self.reaction_time_ms,
            KstParameter::MovementTime => self.movement_time_ms,
            KstParameter::MaxSpeed => self.max_speed_mps,
        }
    }
}

/// Features of one trial; trials without a detectable movement still
/// contribute a posture speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureRow {
    Full(KstFeatures),
    PostureOnly { posture_speed_mps: f64 },
}

impl FeatureRow {
    pub fn get(&self, p: KstParameter) -> Option<f64> {
        match (self, p) {
            (FeatureRow::Full(f), _) => Some(f.get(p)),
            (FeatureRow::PostureOnly { posture_speed_mps }, KstParameter::PostureSpeed) => {
                Some(*posture_speed_mps)
            }
            (FeatureRow::PostureOnly { .. }, _) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubjectSummary {
    pub posture_speed_mps: Option<f64>,
    pub reaction_time_ms: Option<f64>,
    pub movement_time_ms: Option<f64>,
    pub max_speed_mps: Option<f64>,
    pub n_trials_used: usize,
    pub aggregation: ParameterAggregation,
}

impl SubjectSummary {
    pub fn get(&self, p: KstParameter) -> Option<f64> {
        match p {
            KstParameter::PostureSpeed => self.posture_speed_mps,
            KstParameter::ReactionTime => self.reaction_time_ms,
            KstParameter::MovementTime => self.movement_time_ms,
            KstParameter::MaxSpeed => self.max_speed_mps,
        }
    }
}

fn first_post_target(trace: &SpeedTrace) -> Option<usize> {
    (0..TRACE_LEN).find(|&j| trace.time_of(j) >= trace.target_on_offset_ms())
}

fn run_from(samples: &[f64], start: usize, len: usize, pred: impl Fn(f64) -> bool) -> bool {
    start + len <= samples.len() && samples[start..start + len].iter().all(|&v| pred(v))
}

/// Onset and offset sample indices.
pub fn detect_indices(
    trace: &SpeedTrace,
    cfg: &DetectorConfig,
) -> Result<(usize, usize), FeatureError> {
    let s = trace.samples();
    let first = first_post_target(trace).ok_or(FeatureError::NoPostTarget)?;
    let peak = s[first..].iter().cloned().fold(0.0, f64::max);
    let theta = cfg.floor_mps.max(cfg.peak_fraction * peak);
    let persist = cfg.persistence.max(1);
    let onset = (first..TRACE_LEN)
        .find(|&j| run_from(s, j, persist, |v| v >= theta))
        .ok_or(FeatureError::NoMovement)?;
    let mut peak_idx = onset;
    for j in onset..TRACE_LEN {
        if s[j] > s[peak_idx] {
            peak_idx = j;
        }
    }
    let offset = ((peak_idx + 1)..TRACE_LEN)
        .find(|&j| run_from(s, j, persist, |v| v < theta))
        .unwrap_or(TRACE_LEN - 1);
    Ok((onset, offset))
}

/// Movement onset and offset in ms from window start.
pub fn detect_onset_offset(
    trace: &SpeedTrace,
    cfg: &DetectorConfig,
) -> Result<(f64, f64), FeatureError> {
    let (on, off) = detect_indices(trace, cfg)?;
    Ok((trace.time_of(on), trace.time_of(off)))
}

/// Median speed over the samples before TARGET_ON.
pub fn posture_speed(trace: &SpeedTrace) -> Result<f64, FeatureError> {
    let hold: Vec<f64> = (0..TRACE_LEN)
        .take_while(|&j| trace.time_of(j) < trace.target_on_offset_ms())
        .map(|j| trace.samples()[j])
        .collect();
    stats::median(&hold).ok_or(FeatureError::NoPostureSegment)
}

/// All four parameters of one trial.
pub fn compute_features(
    trial: &Trial,
    mode: FeatureMode,
    cfg: &DetectorConfig,
) -> Result<KstFeatures, FeatureError> {
    let trace = &trial.trace;
    let posture = posture_speed(trace)?;
    let t0 = trace.target_on_offset_ms();
    match mode {
        FeatureMode::Trace => {
            let (on, off) = detect_indices(trace, cfg)?;
            let onset_ms = trace.time_of(on);
            let offset_ms = trace.time_of(off);
            let max_speed = trace.samples()[on..=off]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(KstFeatures {
                posture_speed_mps: posture,
                reaction_time_ms: onset_ms - t0,
                movement_time_ms: offset_ms - onset_ms,
                max_speed_mps: max_speed,
                onset_ms,
                offset_ms,
                detector_used: FeatureMode::Trace,
            })
        }
        FeatureMode::Metadata => {
            let (rt, mt) = match (trial.metadata_rt_ms, trial.metadata_mt_ms) {
                (Some(rt), Some(mt)) => (rt, mt),
                _ => return Err(FeatureError::MissingMetadata),
            };
            let onset_ms = t0 + rt;
            let offset_ms = onset_ms + mt;
            let w = trace.sample_width_ms();
            let lo = ((onset_ms / w).ceil().max(0.0) as usize).min(TRACE_LEN - 1);
            let hi = ((offset_ms / w).floor().max(0.0) as usize).min(TRACE_LEN - 1);
            let max_speed = if lo <= hi {
                trace.samples()[lo..=hi]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                let mid = (((onset_ms + offset_ms) / 2.0 / w).round() as usize).min(TRACE_LEN - 1);
                trace.samples()[mid]
            };
            Ok(KstFeatures {
                posture_speed_mps: posture,
                reaction_time_ms: rt,
                movement_time_ms: mt,
                max_speed_mps: max_speed,
                onset_ms,
                offset_ms,
                detector_used: FeatureMode::Metadata,
            })
        }
    }
}

/// Like [`compute_features`] but keeps the posture speed of trials with no
/// detectable movement.
pub fn feature_row(
    trial: &Trial,
    mode: FeatureMode,
    cfg: &DetectorConfig,
) -> Result<FeatureRow, FeatureError> {
    match compute_features(trial, mode, cfg) {
        Ok(f) => Ok(FeatureRow::Full(f)),
        Err(FeatureError::NoMovement) => Ok(FeatureRow::PostureOnly {
            posture_speed_mps: posture_speed(&trial.trace)?,
        }),
        Err(e) => Err(e),
    }
}

pub fn parameter_values(rows: &[FeatureRow], p: KstParameter) -> Vec<f64> {
    rows.iter().filter_map(|r| r.get(p)).collect()
}

/// Aggregated value of one parameter; `None` if no row carries it.
pub fn subject_metric(rows: &[FeatureRow], p: KstParameter, agg: Aggregation) -> Option<f64> {
    stats::aggregate(&parameter_values(rows, p), agg)
}

pub fn summarize_subject(
    rows: &[FeatureRow],
    agg: &ParameterAggregation,
) -> Result<SubjectSummary, FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let m = |p| subject_metric(rows, p, agg.get(p));
    Ok(SubjectSummary {
        posture_speed_mps: m(KstParameter::PostureSpeed),
        reaction_time_ms: m(KstParameter::ReactionTime),
        movement_time_ms: m(KstParameter::MovementTime),
        max_speed_mps: m(KstParameter::MaxSpeed),
        n_trials_used: rows.len(),
        aggregation: *agg,
    })
}

/// Sum of recorded trial durations in seconds, catch trials included,
/// optionally restricted to the first `first_n` trials.
pub fn session_time(record: &SubjectRecord, first_n: Option<usize>) -> Result<f64, FeatureError> {
    if record.trials().is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let take = first_n.unwrap_or(usize::MAX);
    let ms: f64 = record
        .trials()
        .iter()
        .filter(|t| t.trace.provenance().is_recorded())
        .take(take)
        .map(|t| t.trace.duration_ms())
        .sum();
    Ok(ms / 1000.0)
}

pub const FEATURE_TABLE_HEADER: [&str; 12] = [
    "subject_id",
    "cohort",
    "protocol",
    "sequence_index",
    "provenance",
    "posture_speed",
    "reaction_time_ms",
    "movement_time_ms",
    "max_speed",
    "onset_ms",
    "offset_ms",
    "flags",
];

/// Writes one row per trial of the cohort.
pub fn write_feature_table<W: Write>(
    cohort: &Cohort,
    mode: FeatureMode,
    cfg: &DetectorConfig,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FEATURE_TABLE_HEADER)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in cohort.subjects() {
        for t in s.trials() {
            let (row, flag) = if t.is_catch {
                (
                    posture_speed(&t.trace)
                        .ok()
                        .map(|p| FeatureRow::PostureOnly {
                            posture_speed_mps: p,
                        }),
                    "catch",
                )
            } else {
                match feature_row(t, mode, cfg) {
                    Ok(r @ FeatureRow::Full(_)) => (Some(r), ""),
                    Ok(r) => (Some(r), "no_movement"),
                    Err(FeatureError::NoPostureSegment) => (None, "no_posture"),
                    Err(FeatureError::MissingMetadata) => (None, "missing_metadata"),
                    Err(_) => (None, "error"),
                }
            };
            let full = match row {
                Some(FeatureRow::Full(f)) => Some(f),
                _ => None,
            };
            w.write_record([
                s.subject_id().to_string(),
                s.cohort().to_string(),
                s.protocol().to_string(),
                t.sequence_index.to_string(),
                t.trace.provenance().to_string(),
                fmt(row.and_then(|r| r.get(KstParameter::PostureSpeed))),
                fmt(full.map(|f| f.reaction_time_ms)),
                fmt(full.map(|f| f.movement_time_ms)),
                fmt(full.map(|f| f.max_speed_mps)),
                fmt(full.map(|f| f.onset_ms)),
                fmt(full.map(|f| f.offset_ms)),
                flag.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
