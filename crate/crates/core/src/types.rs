//! Shared domain types: traces, trials, subjects, cohorts and evaluation config.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DetectorConfig, FeatureMode};
use crate::forecast::SamplingMode;
use crate::reliability::{TrialCount, UncertaintyMode};

/// Number of samples in every resampled trace.
pub const TRACE_LEN: usize = 64;

/// Number of direction codes used by every protocol.
pub const N_DIRECTIONS: u8 = 8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TypeError {
    #[error("direction code {0} outside 0..=7")]
    DirectionOutOfRange(u8),
    #[error("trace has {0} samples, expected {TRACE_LEN}")]
    TraceLength(usize),
    #[error("trace sample {index} is {value}, expected a finite non-negative speed")]
    BadSample { index: usize, value: f64 },
    #[error("duration_ms {0} must be positive and finite")]
    BadDuration(f64),
    #[error("target_on_offset_ms {offset} must lie in [0, {duration})")]
    BadTargetOffset { offset: f64, duration: f64 },
    #[error("forecasted trial carries acquisition metadata")]
    MetadataOnForecast,
    #[error("metadata time {0} must be positive and finite")]
    BadMetadata(f64),
    #[error("subject {subject}: {count} trials exceeds protocol {protocol} maximum of {max}")]
    TooManyTrials {
        subject: String,
        protocol: Protocol,
        count: usize,
        max: usize,
    },
    #[error("subject {0}: trials not strictly ordered by sequence_index")]
    UnorderedTrials(String),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("unknown provenance {0:?}")]
    BadProvenance(String),
    #[error("unknown protocol {0:?}")]
    BadProtocol(String),
}

#[derive(Debug, Error)]
pub enum CohortIoError {
    #[error("cohort json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cohort io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Directions
// ---------------------------------------------------------------------------

/// Movement phase for the 4-target in-and-out protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Out = 0,
    Return = 1,
}

/// Target direction code in `0..=7`.
///
/// 8-target protocols use the code as the target index. The 4-target protocol
/// flattens `(target, phase)` as `target * 2 + phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DirectionCode(u8);

impl DirectionCode {
    pub fn new(code: u8) -> Result<Self, TypeError> {
        if code < N_DIRECTIONS {
            Ok(Self(code))
        } else {
            Err(TypeError::DirectionOutOfRange(code))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Flattens a 4-target `(target, phase)` pair.
    pub fn flatten(target: u8, phase: Phase) -> Result<Self, TypeError> {
        if target >= 4 {
            return Err(TypeError::DirectionOutOfRange(target * 2 + phase as u8));
        }
        Self::new(target * 2 + phase as u8)
    }

    pub fn unflatten(self) -> (u8, Phase) {
        let phase = if self.0.is_multiple_of(2) {
            Phase::Out
        } else {
            Phase::Return
        };
        (self.0 / 2, phase)
    }

    pub fn all() -> impl Iterator<Item = DirectionCode> {
        (0..N_DIRECTIONS).map(DirectionCode)
    }
}

impl TryFrom<u8> for DirectionCode {
    type Error = TypeError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<DirectionCode> for u8 {
    fn from(d: DirectionCode) -> u8 {
        d.0
    }
}

impl fmt::Display for DirectionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

// ---------------------------------------------------------------------------
// Traces and trials
// ---------------------------------------------------------------------------

/// Where a trace came from. Serialized as `"recorded"` or `"forecasted:<model>"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Recorded,
    Forecasted(String),
}

impl Provenance {
    pub fn is_recorded(&self) -> bool {
        matches!(self, Provenance::Recorded)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Recorded => f.write_str("recorded"),
            Provenance::Forecasted(m) => write!(f, "forecasted:{m}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = TypeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "recorded" {
            Ok(Provenance::Recorded)
        } else if let Some(model) = s.strip_prefix("forecasted:") {
            Ok(Provenance::Forecasted(model.to_string()))
        } else {
            Err(TypeError::BadProvenance(s.to_string()))
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A resampled hand-speed trial of exactly [`TRACE_LEN`] samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTrace {
    samples: Vec<f64>,
    duration_ms: f64,
    target_on_offset_ms: f64,
    provenance: Provenance,
}

impl SpeedTrace {
    pub fn new(
        samples: Vec<f64>,
        duration_ms: f64,
        target_on_offset_ms: f64,
        provenance: Provenance,
    ) -> Result<Self, TypeError> {
        if samples.len() != TRACE_LEN {
            return Err(TypeError::TraceLength(samples.len()));
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(TypeError::BadSample { index, value });
        }
        if !(duration_ms.is_finite() && duration_ms > 0.0) {
            return Err(TypeError::BadDuration(duration_ms));
        }
        if !(target_on_offset_ms >= 0.0 && target_on_offset_ms < duration_ms) {
            return Err(TypeError::BadTargetOffset {
                offset: target_on_offset_ms,
                duration: duration_ms,
            });
        }
        Ok(Self {
            samples,
            duration_ms,
            target_on_offset_ms,
            provenance,
        })
    }

    /// Builds a trace from raw forecaster output, clamping negative speeds to 0.
    pub fn from_forecast(
        mut samples: Vec<f64>,
        duration_ms: f64,
        target_on_offset_ms: f64,
        model_id: &str,
    ) -> Result<Self, TypeError> {
        for v in samples.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Self::new(
            samples,
            duration_ms,
            target_on_offset_ms,
            Provenance::Forecasted(model_id.to_string()),
        )
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_ms
    }

    pub fn target_on_offset_ms(&self) -> f64 {
        self.target_on_offset_ms
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Spacing between consecutive resampled samples in ms.
    pub fn sample_width_ms(&self) -> f64 {
        self.duration_ms / (TRACE_LEN - 1) as f64
    }

    /// Time of sample `index` relative to window start.
    pub fn time_of(&self, index: usize) -> f64 {
        index as f64 * self.duration_ms / (TRACE_LEN - 1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// One trial in a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TrialRepr", try_from = "TrialRepr")]
pub struct Trial {
    pub trace: SpeedTrace,
    pub direction: DirectionCode,
    pub sequence_index: u32,
    pub is_catch: bool,
    pub metadata_rt_ms: Option<f64>,
    pub metadata_mt_ms: Option<f64>,
}

impl Trial {
    pub fn new(
        trace: SpeedTrace,
        direction: DirectionCode,
        sequence_index: u32,
        is_catch: bool,
        metadata_rt_ms: Option<f64>,
        metadata_mt_ms: Option<f64>,
    ) -> Result<Self, TypeError> {
        let forecasted = !trace.provenance().is_recorded();
        if forecasted && (metadata_rt_ms.is_some() || metadata_mt_ms.is_some()) {
            return Err(TypeError::MetadataOnForecast);
        }
        for m in [metadata_rt_ms, metadata_mt_ms].into_iter().flatten() {
            if !(m.is_finite() && m > 0.0) {
                return Err(TypeError::BadMetadata(m));
            }
        }
        Ok(Self {
            trace,
            direction,
            sequence_index,
            is_catch,
            metadata_rt_ms,
            metadata_mt_ms,
        })
    }

    /// A forecasted trial; never carries acquisition metadata.
    pub fn forecasted(trace: SpeedTrace, direction: DirectionCode, sequence_index: u32) -> Self {
        Self {
            trace,
            direction,
            sequence_index,
            is_catch: false,
            metadata_rt_ms: None,
            metadata_mt_ms: None,
        }
    }

    /// Non-catch, finite samples, positive duration.
    pub fn is_valid(&self) -> bool {
        !self.is_catch && self.trace.is_finite() && self.trace.duration_ms() > 0.0
    }
}

#[derive(Serialize, Deserialize)]
struct TrialRepr {
    direction: DirectionCode,
    sequence_index: u32,
    is_catch: bool,
    duration_ms: f64,
    target_on_offset_ms: f64,
    provenance: Provenance,
    samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata_rt_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata_mt_ms: Option<f64>,
}

impl From<Trial> for TrialRepr {
    fn from(t: Trial) -> Self {
        TrialRepr {
            direction: t.direction,
            sequence_index: t.sequence_index,
            is_catch: t.is_catch,
            duration_ms: t.trace.duration_ms,
            target_on_offset_ms: t.trace.target_on_offset_ms,
            provenance: t.trace.provenance,
            samples: t.trace.samples,
            metadata_rt_ms: t.metadata_rt_ms,
            metadata_mt_ms: t.metadata_mt_ms,
        }
    }
}

impl TryFrom<TrialRepr> for Trial {
    type Error = TypeError;
    fn try_from(r: TrialRepr) -> Result<Self, Self::Error> {
        let trace = SpeedTrace::new(
            r.samples,
            r.duration_ms,
            r.target_on_offset_ms,
            r.provenance,
        )?;
        Trial::new(
            trace,
            r.direction,
            r.sequence_index,
            r.is_catch,
            r.metadata_rt_ms,
            r.metadata_mt_ms,
        )
    }
}

// ---------------------------------------------------------------------------
// Subjects and cohorts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortLabel {
    Control,
    Stroke,
}

impl CohortLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CohortLabel::Control => "control",
            CohortLabel::Stroke => "stroke",
        }
    }
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CohortLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(CohortLabel::Control),
            "stroke" => Ok(CohortLabel::Stroke),
            other => Err(format!("unknown cohort {other:?}")),
        }
    }
}

/// VGR task layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    /// 8-target, original timing.
    P1,
    /// 8-target, updated hold times.
    P2,
    /// 4-target in-and-out.
    P3,
}

impl Protocol {
    pub fn max_trials(self) -> usize {
        match self {
            Protocol::P1 | Protocol::P2 => 64,
            Protocol::P3 => 40,
        }
    }

    pub fn n_targets(self) -> u8 {
        match self {
            Protocol::P1 | Protocol::P2 => 8,
            Protocol::P3 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::P1 => "P1",
            Protocol::P2 => "P2",
            Protocol::P3 => "P3",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = TypeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(Protocol::P1),
            "P2" => Ok(Protocol::P2),
            "P3" => Ok(Protocol::P3),
            _ => Err(TypeError::BadProtocol(s.to_string())),
        }
    }
}

/// One participant's session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SubjectRepr")]
pub struct SubjectRecord {
    subject_id: String,
    cohort: CohortLabel,
    protocol: Protocol,
    trials: Vec<Trial>,
}

#[derive(Deserialize)]
struct SubjectRepr {
    subject_id: String,
    cohort: CohortLabel,
    protocol: Protocol,
    trials: Vec<Trial>,
}

impl TryFrom<SubjectRepr> for SubjectRecord {
    type Error = TypeError;
    fn try_from(r: SubjectRepr) -> Result<Self, Self::Error> {
        let ordered = r
            .trials
            .windows(2)
            .all(|w| w[0].sequence_index < w[1].sequence_index);
        if !ordered {
            return Err(TypeError::UnorderedTrials(r.subject_id));
        }
        SubjectRecord::new(r.subject_id, r.cohort, r.protocol, r.trials)
    }
}

impl SubjectRecord {
    /// Sorts trials by `sequence_index` and enforces the protocol trial cap.
    pub fn new(
        subject_id: impl Into<String>,
        cohort: CohortLabel,
        protocol: Protocol,
        mut trials: Vec<Trial>,
    ) -> Result<Self, TypeError> {
        let subject_id = subject_id.into();
        trials.sort_by_key(|t| t.sequence_index);
        if trials
            .windows(2)
            .any(|w| w[0].sequence_index == w[1].sequence_index)
        {
            return Err(TypeError::UnorderedTrials(subject_id));
        }
        if trials.len() > protocol.max_trials() {
            return Err(TypeError::TooManyTrials {
                subject: subject_id,
                protocol,
                count: trials.len(),
                max: protocol.max_trials(),
            });
        }
        Ok(Self {
            subject_id,
            cohort,
            protocol,
            trials,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn cohort(&self) -> CohortLabel {
        self.cohort
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    /// Valid non-catch trials in sequence order.
    pub fn valid_trials(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.is_valid())
    }

    pub fn n_valid(&self) -> usize {
        self.valid_trials().count()
    }
}

/// A labelled collection of subjects with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CohortRepr")]
pub struct Cohort {
    label: String,
    subjects: Vec<SubjectRecord>,
}

#[derive(Deserialize)]
struct CohortRepr {
    label: String,
    subjects: Vec<SubjectRecord>,
}

impl TryFrom<CohortRepr> for Cohort {
    type Error = TypeError;
    fn try_from(r: CohortRepr) -> Result<Self, Self::Error> {
        Cohort::new(r.label, r.subjects)
    }
}

impl Cohort {
    pub fn new(label: impl Into<String>, subjects: Vec<SubjectRecord>) -> Result<Self, TypeError> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(TypeError::DuplicateSubject(s.subject_id.clone()));
            }
        }
        Ok(Self {
            label: label.into(),
            subjects,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn to_json(&self) -> Result<String, CohortIoError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CohortIoError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<(), CohortIoError> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, CohortIoError> {
        Ok(serde_json::from_reader(std::io::BufReader::new(r))?)
    }
}

// ---------------------------------------------------------------------------
// Parameters and evaluation config
// ---------------------------------------------------------------------------

/// The four kinematic parameters evaluated for reliability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KstParameter {
    PostureSpeed,
    ReactionTime,
    MovementTime,
    MaxSpeed,
}

impl KstParameter {
    pub const ALL: [KstParameter; 4] = [
        KstParameter::PostureSpeed,
        KstParameter::ReactionTime,
        KstParameter::MovementTime,
        KstParameter::MaxSpeed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KstParameter::PostureSpeed => "posture_speed",
            KstParameter::ReactionTime => "reaction_time",
            KstParameter::MovementTime => "movement_time",
            KstParameter::MaxSpeed => "max_speed",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            KstParameter::PostureSpeed | KstParameter::MaxSpeed => "m/s",
            KstParameter::ReactionTime | KstParameter::MovementTime => "ms",
        }
    }
}

impl fmt::Display for KstParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    #[default]
    Median,
}

/// Aggregator choice per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ParameterAggregation {
    pub posture_speed: Aggregation,
    pub reaction_time: Aggregation,
    pub movement_time: Aggregation,
    pub max_speed: Aggregation,
}

impl ParameterAggregation {
    pub fn uniform(agg: Aggregation) -> Self {
        Self {
            posture_speed: agg,
            reaction_time: agg,
            movement_time: agg,
            max_speed: agg,
        }
    }

    pub fn get(&self, p: KstParameter) -> Aggregation {
        match p {
            KstParameter::PostureSpeed => self.posture_speed,
            KstParameter::ReactionTime => self.reaction_time,
            KstParameter::MovementTime => self.movement_time,
            KstParameter::MaxSpeed => self.max_speed,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("context size {0} must be 8 or 16")]
    ContextSize(usize),
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("baseline counts must be at least 2, got {0}")]
    BaselineCount(usize),
}

/// Evaluation settings for a reliability run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub context_size: usize,
    pub forecast_counts: Vec<usize>,
    pub baseline_counts: Vec<TrialCount>,
    pub bootstrap_b: usize,
    pub repeats_r: usize,
    pub pool_size_m: usize,
    pub seed: u64,
    pub aggregation: ParameterAggregation,
    pub sampling: SamplingMode,
    pub uncertainty: UncertaintyMode,
    pub feature_mode: FeatureMode,
    pub detector: DetectorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_size: 8,
            forecast_counts: (0..=56).step_by(8).collect(),
            baseline_counts: [2, 4, 8, 16, 24, 32, 40, 48, 56]
                .into_iter()
                .map(TrialCount::Count)
                .chain(std::iter::once(TrialCount::Full))
                .collect(),
            bootstrap_b: 1000,
            repeats_r: 50,
            pool_size_m: 64,
            seed: 0,
            aggregation: ParameterAggregation::default(),
            sampling: SamplingMode::default(),
            uncertainty: UncertaintyMode::default(),
            feature_mode: FeatureMode::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.context_size != 8 && self.context_size != 16 {
            return Err(ConfigError::ContextSize(self.context_size));
        }
        if self.bootstrap_b == 0 {
            return Err(ConfigError::NonPositive("bootstrap_b"));
        }
        if self.repeats_r == 0 {
            return Err(ConfigError::NonPositive("repeats_r"));
        }
        if self.pool_size_m == 0 {
            return Err(ConfigError::NonPositive("pool_size_m"));
        }
        for c in &self.baseline_counts {
            if let TrialCount::Count(n) = c {
                if *n < 2 {
                    return Err(ConfigError::BaselineCount(*n));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Admission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationResult {
    Admitted,
    Excluded(String),
}

impl ValidationResult {
    pub fn is_admitted(&self) -> bool {
        matches!(self, ValidationResult::Admitted)
    }
}

/// Admits a subject iff it has at least `min_trials` valid trials.
pub fn validate_subject(record: &SubjectRecord, min_trials: usize) -> ValidationResult {
    if record.n_valid() >= min_trials {
        ValidationResult::Admitted
    } else {
        ValidationResult::Excluded("insufficient_trials".to_string())
    }
}
