//! ICC(2,1) reliability, recorded-only baseline curves with a subject
//! bootstrap, forecast-augmented evaluation and ΔICC summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::features::{feature_row, FeatureRow};
use crate::forecast::{
    self, sample_indices, targets_for_schedule, ForecastError, ForecastRequest, Forecaster,
};
use crate::ingest::select_context;
use crate::num::Real;
use crate::rng::{derive_seed, stream, substream};
use crate::stats;
use crate::types::{
    validate_subject, Cohort, CohortLabel, ConfigError, DirectionCode, EvalConfig, KstParameter,
    Protocol, SubjectRecord, Trial,
};

#[derive(Debug, Error)]
pub enum ReliabilityError {
    #[error("ICC needs at least 3 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("degenerate measurement matrix: {0}")]
    DegenerateMatrix(String),
    #[error("{group}: only {n} subjects usable, need at least 3")]
    InsufficientSubjects { group: String, n: usize },
    #[error("baseline has no point at X = {0}")]
    MissingBaselinePoint(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration enums
// ---------------------------------------------------------------------------

/// A number of trials, or every valid trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialCount {
    Count(usize),
    Full,
}

impl fmt::Display for TrialCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialCount::Count(n) => write!(f, "{n}"),
            TrialCount::Full => f.write_str("full"),
        }
    }
}

impl Serialize for TrialCount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TrialCount::Count(n) => s.serialize_u64(*n as u64),
            TrialCount::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for TrialCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = TrialCount;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a trial count or \"full\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<TrialCount, E> {
                usize::try_from(v).map(TrialCount::Count).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<TrialCount, E> {
                usize::try_from(v).map(TrialCount::Count).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<TrialCount, E> {
                if v.eq_ignore_ascii_case("full") {
                    Ok(TrialCount::Full)
                } else {
                    v.parse().map(TrialCount::Count).map_err(E::custom)
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// How augmented points report spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// SD of the ICC across forecast-selection repeats.
    #[default]
    RepeatSd,
    /// Repeat variance plus the mean within-repeat subject-bootstrap variance.
    Combined,
}

// ---------------------------------------------------------------------------
// ICC(2,1)
// ---------------------------------------------------------------------------

/// `n` subjects by `k` measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedMeasurements<T> {
    rows: Vec<Vec<T>>,
    pub parameter: String,
    pub units: String,
}

impl<T: Real> PairedMeasurements<T> {
    pub fn new(
        rows: Vec<Vec<T>>,
        parameter: impl Into<String>,
        units: impl Into<String>,
    ) -> Result<Self, ReliabilityError> {
        if rows.len() < 3 {
            return Err(ReliabilityError::TooFewSubjects(rows.len()));
        }
        let k = rows[0].len();
        if k < 2 {
            return Err(ReliabilityError::DegenerateMatrix(format!(
                "{k} measurement column(s)"
            )));
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(ReliabilityError::DegenerateMatrix("ragged rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ReliabilityError::DegenerateMatrix("non-finite cell".into()));
        }
        Ok(Self {
            rows,
            parameter: parameter.into(),
            units: units.into(),
        })
    }

    /// Two-column matrix from (reduced, reference) pairs.
    pub fn from_pairs(
        pairs: &[(T, T)],
        parameter: impl Into<String>,
        units: impl Into<String>,
    ) -> Result<Self, ReliabilityError> {
        Self::new(
            pairs.iter().map(|(a, b)| vec![*a, *b]).collect(),
            parameter,
            units,
        )
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }
}

fn icc_core<T: Real>(n: usize, k: usize, get: impl Fn(usize, usize) -> T) -> T {
    let nf = T::from_usize_lossy(n);
    let kf = T::from_usize_lossy(k);
    let row_means: Vec<T> = (0..n)
        .map(|i| (0..k).map(|j| get(i, j)).sum::<T>() / kf)
        .collect();
    let col_means: Vec<T> = (0..k)
        .map(|j| (0..n).map(|i| get(i, j)).sum::<T>() / nf)
        .collect();
    let gm = col_means.iter().copied().sum::<T>() / kf;
    let ssr = kf * row_means.iter().map(|r| (*r - gm) * (*r - gm)).sum::<T>();
    let ssc = nf * col_means.iter().map(|c| (*c - gm) * (*c - gm)).sum::<T>();
    let mut sse = T::zero();
    for (i, rm) in row_means.iter().enumerate() {
        for (j, cm) in col_means.iter().enumerate() {
            let e = get(i, j) - *rm - *cm + gm;
            sse += e * e;
        }
    }
    let one = T::one();
    let msr = ssr / (nf - one);
    let msc = ssc / (kf - one);
    let mse = sse / ((nf - one) * (kf - one));
    let denom = msr + (kf - one) * mse + kf / nf * (msc - mse);
    if denom == T::zero() || !denom.is_finite() {
        return T::zero();
    }
    (msr - mse) / denom
}

/// Two-way random-effects, absolute-agreement, single-measure ICC.
/// A zero denominator gives 0.
pub fn icc_2_1<T: Real>(m: &PairedMeasurements<T>) -> T {
    icc_core(m.n(), m.k(), |i, j| m.rows[i][j])
}

/// [`icc_2_1`] on (reduced, reference) pairs.
pub fn icc_pairs<T: Real>(pairs: &[(T, T)]) -> Result<T, ReliabilityError> {
    let m = PairedMeasurements::from_pairs(pairs, "", "")?;
    Ok(icc_2_1(&m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IccClass {
    Poor,
    Moderate,
    Good,
    Excellent,
}

/// Bands `[.50, .75)`, `[.75, .90)`, `[.90, ∞)`; below .50 is poor.
pub fn classify_icc(v: f64) -> IccClass {
    if v < 0.50 {
        IccClass::Poor
    } else if v < 0.75 {
        IccClass::Moderate
    } else if v < 0.90 {
        IccClass::Good
    } else {
        IccClass::Excellent
    }
}

/// Subject bootstrap percentile interval (2.5th, 97.5th). Replicate `i`
/// resamples from substream `(seed, BOOTSTRAP, i)`.
pub fn bootstrap_ci(
    pairs: &[(f64, f64)],
    b: usize,
    seed: u64,
) -> Result<(f64, f64), ReliabilityError> {
    let reps = bootstrap_replicates(pairs, b, seed)?;
    let sorted = stats::sorted(&reps);
    let lo = stats::percentile_sorted(&sorted, 0.025).expect("b >= 1");
    let hi = stats::percentile_sorted(&sorted, 0.975).expect("b >= 1");
    Ok((lo, hi))
}

/// The `b` bootstrap ICC replicates in replicate order.
pub fn bootstrap_replicates(
    pairs: &[(f64, f64)],
    b: usize,
    seed: u64,
) -> Result<Vec<f64>, ReliabilityError> {
    if pairs.len() < 3 {
        return Err(ReliabilityError::TooFewSubjects(pairs.len()));
    }
    if b == 0 {
        return Err(ConfigError::NonPositive("bootstrap_b").into());
    }
    PairedMeasurements::from_pairs(pairs, "", "")?;
    let n = pairs.len();
    Ok((0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &[stream::BOOTSTRAP, i as u64]);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            icc_core(n, 2, |r, j| {
                let p = pairs[idx[r]];
                if j == 0 {
                    p.0
                } else {
                    p.1
                }
            })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Subject features and groups
// ---------------------------------------------------------------------------

/// Stable 64-bit tag of a string (FNV-1a).
pub fn tag_of(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn param_index(p: KstParameter) -> u64 {
    KstParameter::ALL
        .iter()
        .position(|x| *x == p)
        .expect("listed") as u64
}

fn row_for(trial: &Trial, config: &EvalConfig) -> Option<FeatureRow> {
    match feature_row(trial, config.feature_mode, &config.detector) {
        Ok(r) => Some(r),
        Err(e) => {
            log::debug!("trial {} skipped: {e}", trial.sequence_index);
            None
        }
    }
}

fn metric_of<'a>(
    rows: impl Iterator<Item = &'a FeatureRow>,
    p: KstParameter,
    config: &EvalConfig,
) -> Option<f64> {
    let values: Vec<f64> = rows.filter_map(|r| r.get(p)).collect();
    stats::aggregate(&values, config.aggregation.get(p))
}

/// Feature rows of a subject's valid trials in sequence order; `None` marks
/// trials whose features could not be computed.
#[derive(Debug, Clone)]
pub struct SubjectFeatures<'a> {
    pub record: &'a SubjectRecord,
    pub rows: Vec<Option<FeatureRow>>,
}

impl<'a> SubjectFeatures<'a> {
    pub fn new(record: &'a SubjectRecord, config: &EvalConfig) -> Self {
        Self {
            record,
            rows: record.valid_trials().map(|t| row_for(t, config)).collect(),
        }
    }

    /// Aggregate over the first `count` valid trials.
    pub fn metric(&self, p: KstParameter, count: TrialCount, config: &EvalConfig) -> Option<f64> {
        let take = match count {
            TrialCount::Count(n) => n,
            TrialCount::Full => usize::MAX,
        };
        metric_of(self.rows.iter().take(take).flatten(), p, config)
    }

    pub fn reference(&self, p: KstParameter, config: &EvalConfig) -> Option<f64> {
        self.metric(p, TrialCount::Full, config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub cohort: CohortLabel,
    pub protocol: Protocol,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.cohort, self.protocol)
    }
}

impl GroupKey {
    fn tag(&self) -> u64 {
        tag_of(&self.to_string())
    }
}

/// Admitted subjects of one cohort label and protocol, in cohort order.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub key: GroupKey,
    pub subjects: Vec<SubjectFeatures<'a>>,
    /// Subjects excluded at admission, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl Group<'_> {
    /// Smallest valid-trial count among admitted subjects.
    pub fn min_valid(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.rows.len())
            .min()
            .unwrap_or(0)
    }

    pub fn max_valid(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.rows.len())
            .max()
            .unwrap_or(0)
    }
}

/// Splits `cohort` by (label, protocol) and admits subjects with at least
/// `config.context_size` valid trials.
pub fn prepare_groups<'a>(cohort: &'a Cohort, config: &EvalConfig) -> Vec<Group<'a>> {
    let mut by_key: BTreeMap<GroupKey, Vec<&'a SubjectRecord>> = BTreeMap::new();
    for s in cohort.subjects() {
        by_key
            .entry(GroupKey {
                cohort: s.cohort(),
                protocol: s.protocol(),
            })
            .or_default()
            .push(s);
    }
    by_key
        .into_iter()
        .map(|(key, records)| {
            let mut excluded = Vec::new();
            let admitted: Vec<&SubjectRecord> = records
                .into_iter()
                .filter(|r| match validate_subject(r, config.context_size) {
                    crate::types::ValidationResult::Admitted => true,
                    crate::types::ValidationResult::Excluded(reason) => {
                        excluded.push((r.subject_id().to_string(), reason));
                        false
                    }
                })
                .collect();
            let subjects = admitted
                .par_iter()
                .map(|r| SubjectFeatures::new(r, config))
                .collect();
            Group {
                key,
                subjects,
                excluded,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Baseline curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub count: TrialCount,
    /// Numeric trial count; the group's largest valid-trial count for `Full`.
    pub x: usize,
    pub icc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityCurve {
    pub parameter: KstParameter,
    pub cohort: CohortLabel,
    pub protocol: Protocol,
    pub points: Vec<CurvePoint>,
}

impl ReliabilityCurve {
    pub fn at(&self, count: TrialCount) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.count == count)
    }
}

fn paired<'a>(subjects: impl Iterator<Item = (Option<f64>, Option<f64>)> + 'a) -> Vec<(f64, f64)> {
    subjects.filter_map(|(a, b)| Some((a?, b?))).collect()
}

/// ICC between the first-X-trial metric and the all-trial reference for each
/// count. Counts above the group's smallest valid-trial count are skipped.
pub fn baseline_curve(
    group: &Group<'_>,
    parameter: KstParameter,
    counts: &[TrialCount],
    config: &EvalConfig,
) -> Result<ReliabilityCurve, ReliabilityError> {
    config.validate()?;
    if group.subjects.len() < 3 {
        return Err(ReliabilityError::InsufficientSubjects {
            group: group.key.to_string(),
            n: group.subjects.len(),
        });
    }
    let mut counts: Vec<TrialCount> = counts.to_vec();
    counts.sort();
    counts.dedup();
    let min_valid = group.min_valid();
    let mut points = Vec::new();
    for count in counts {
        let x = match count {
            TrialCount::Count(n) if n > min_valid => {
                log::warn!(
                    "{}: X = {n} exceeds the smallest trial count {min_valid}, skipped",
                    group.key
                );
                continue;
            }
            TrialCount::Count(n) => n,
            TrialCount::Full => group.max_valid(),
        };
        let pairs = paired(group.subjects.iter().map(|s| {
            (
                s.metric(parameter, count, config),
                s.reference(parameter, config),
            )
        }));
        if pairs.len() < 3 {
            log::warn!(
                "{} {parameter} X = {count}: {} usable subjects, skipped",
                group.key,
                pairs.len()
            );
            continue;
        }
        let icc = icc_pairs(&pairs)?;
        let x_tag = match count {
            TrialCount::Count(n) => n as u64,
            TrialCount::Full => u64::MAX,
        };
        let seed = derive_seed(
            config.seed,
            &[
                stream::BOOTSTRAP,
                group.key.tag(),
                param_index(parameter),
                x_tag,
            ],
        );
        let (lo, hi) = bootstrap_ci(&pairs, config.bootstrap_b, seed)?;
        points.push(CurvePoint {
            count,
            x,
            icc,
            ci_low: lo.min(icc),
            ci_high: hi.max(icc),
            n_subjects: pairs.len(),
        });
    }
    Ok(ReliabilityCurve {
        parameter,
        cohort: group.key.cohort,
        protocol: group.key.protocol,
        points,
    })
}

// ---------------------------------------------------------------------------
// Augmented evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedPoint {
    pub parameter: KstParameter,
    pub cohort: CohortLabel,
    pub protocol: Protocol,
    pub context: usize,
    pub k: usize,
    pub mean_icc: f64,
    pub sd_icc: f64,
    pub forecaster: String,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentedOutcome {
    pub points: Vec<AugmentedPoint>,
    /// Subjects dropped during forecasting, with the reason.
    pub dropped: Vec<(String, String)>,
}

/// Metrics of one subject: `[k index][repeat][parameter]`, plus references.
struct SubjectRepeats {
    metrics: Vec<Vec<[Option<f64>; 4]>>,
    reference: [Option<f64>; 4],
}

fn subject_repeats(
    subject: &SubjectFeatures<'_>,
    forecaster: &dyn Forecaster,
    config: &EvalConfig,
) -> Result<SubjectRepeats, String> {
    let record = subject.record;
    let split = select_context(record, config.context_size).map_err(|e| e.to_string())?;
    let schedule: Vec<DirectionCode> = split.remainder.iter().map(|t| t.direction).collect();
    let k_max = config.forecast_counts.iter().copied().max().unwrap_or(0);
    let sid_tag = tag_of(record.subject_id());

    let context_rows: Vec<FeatureRow> = split
        .context
        .iter()
        .filter_map(|t| row_for(t, config))
        .collect();
    let reference = KstParameter::ALL.map(|p| subject.reference(p, config));

    let (pool_rows, sizes) = if k_max > 0 {
        if schedule.is_empty() {
            return Err("no remaining trials to define a direction schedule".into());
        }
        let targets = targets_for_schedule(&schedule, k_max);
        let request = ForecastRequest::new(
            record.subject_id(),
            &split.context,
            targets,
            config.pool_size_m,
            derive_seed(config.seed, &[stream::FORECAST, sid_tag]),
        )
        .map_err(|e| e.to_string())?;
        let pool = forecast::forecast(forecaster, &request).map_err(|e| e.to_string())?;
        let rows: BTreeMap<DirectionCode, Vec<Option<FeatureRow>>> = pool
            .pools
            .iter()
            .map(|(d, traces)| {
                let rows = traces
                    .iter()
                    .map(|tr| {
                        row_for(
                            &Trial::forecasted(tr.clone(), *d, forecast::FORECAST_SEQUENCE_BASE),
                            config,
                        )
                    })
                    .collect();
                (*d, rows)
            })
            .collect();
        (rows, pool.sizes())
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };

    let mut metrics = Vec::with_capacity(config.forecast_counts.len());
    for &k in &config.forecast_counts {
        let mut per_repeat = Vec::with_capacity(config.repeats_r);
        for r in 0..config.repeats_r {
            let mut rng = substream(config.seed, &[stream::REPEAT, sid_tag, k as u64, r as u64]);
            let picks = sample_indices(&sizes, k, &schedule, config.sampling, &mut rng)
                .map_err(|e| e.to_string())?;
            let sampled = picks.iter().filter_map(|(d, i)| pool_rows[d][*i].as_ref());
            let all: Vec<&FeatureRow> = context_rows.iter().chain(sampled).collect();
            per_repeat.push(KstParameter::ALL.map(|p| metric_of(all.iter().copied(), p, config)));
        }
        metrics.push(per_repeat);
    }
    Ok(SubjectRepeats { metrics, reference })
}

/// Forecast-augmented ICC for every parameter and every configured `k` in
/// one group. Subjects whose forecast fails are dropped with a warning.
pub fn augmented_eval_group(
    group: &Group<'_>,
    forecaster: &dyn Forecaster,
    config: &EvalConfig,
) -> Result<AugmentedOutcome, ReliabilityError> {
    config.validate()?;
    let results: Vec<Result<SubjectRepeats, String>> = group
        .subjects
        .par_iter()
        .map(|s| subject_repeats(s, forecaster, config))
        .collect();
    let mut outcome = AugmentedOutcome::default();
    let mut kept = Vec::new();
    for (s, r) in group.subjects.iter().zip(results) {
        match r {
            Ok(v) => kept.push(v),
            Err(e) => {
                log::warn!(
                    "{}: subject {} dropped: {e}",
                    group.key,
                    s.record.subject_id()
                );
                outcome.dropped.push((s.record.subject_id().to_string(), e));
            }
        }
    }
    if kept.len() < 3 {
        return Err(ReliabilityError::InsufficientSubjects {
            group: group.key.to_string(),
            n: kept.len(),
        });
    }

    for (pi, p) in KstParameter::ALL.into_iter().enumerate() {
        for (ki, &k) in config.forecast_counts.iter().enumerate() {
            let per_repeat: Vec<Vec<(f64, f64)>> = (0..config.repeats_r)
                .map(|r| paired(kept.iter().map(|s| (s.metrics[ki][r][pi], s.reference[pi]))))
                .collect();
            let n_subjects = per_repeat[0].len();
            if per_repeat.iter().any(|v| v.len() < 3) {
                log::warn!(
                    "{} {p} k = {k}: fewer than 3 usable subjects, skipped",
                    group.key
                );
                continue;
            }
            let iccs: Vec<f64> = per_repeat
                .iter()
                .map(|pairs| icc_pairs(pairs))
                .collect::<Result<_, _>>()?;
            let (mean, repeat_sd) = stats::mean_sd(&iccs).expect("repeats_r >= 1");
            let sd = match config.uncertainty {
                UncertaintyMode::RepeatSd => repeat_sd,
                UncertaintyMode::Combined => {
                    let boot_vars: Vec<f64> = per_repeat
                        .iter()
                        .enumerate()
                        .map(|(r, pairs)| {
                            let seed = derive_seed(
                                config.seed,
                                &[
                                    stream::BOOTSTRAP,
                                    group.key.tag(),
                                    pi as u64,
                                    k as u64,
                                    r as u64,
                                ],
                            );
                            let reps = bootstrap_replicates(pairs, config.bootstrap_b, seed)?;
                            Ok(stats::mean_sd(&reps).map_or(0.0, |(_, s)| s * s))
                        })
                        .collect::<Result<_, ReliabilityError>>()?;
                    let mean_boot = stats::mean(&boot_vars).unwrap_or(0.0);
                    (repeat_sd * repeat_sd + mean_boot).sqrt()
                }
            };
            outcome.points.push(AugmentedPoint {
                parameter: p,
                cohort: group.key.cohort,
                protocol: group.key.protocol,
                context: config.context_size,
                k,
                mean_icc: mean,
                sd_icc: sd,
                forecaster: forecaster.id().to_string(),
                n_subjects,
            });
        }
    }
    Ok(outcome)
}

/// [`augmented_eval_group`] over every group of `cohort`.
pub fn augmented_eval(
    cohort: &Cohort,
    forecaster: &dyn Forecaster,
    config: &EvalConfig,
) -> Result<AugmentedOutcome, ReliabilityError> {
    let mut out = AugmentedOutcome::default();
    for g in prepare_groups(cohort, config) {
        match augmented_eval_group(&g, forecaster, config) {
            Ok(o) => {
                out.points.extend(o.points);
                out.dropped.extend(o.dropped);
            }
            Err(ReliabilityError::InsufficientSubjects { group, n }) => {
                log::warn!("{group}: {n} usable subjects, group skipped");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Baseline curves for every parameter and group of `cohort`.
pub fn baseline_curves(
    cohort: &Cohort,
    config: &EvalConfig,
) -> Result<Vec<ReliabilityCurve>, ReliabilityError> {
    let mut out = Vec::new();
    for g in prepare_groups(cohort, config) {
        for p in KstParameter::ALL {
            match baseline_curve(&g, p, &config.baseline_counts, config) {
                Ok(c) => out.push(c),
                Err(ReliabilityError::InsufficientSubjects { group, n }) => {
                    log::warn!("{group}: {n} admitted subjects, group skipped");
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Summaries and export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub parameter: KstParameter,
    pub cohort: CohortLabel,
    pub protocol: Protocol,
    pub forecaster: String,
    pub context: usize,
    pub icc_at_c: f64,
    pub best: f64,
    pub best_k: usize,
    pub delta: f64,
    /// `100 * delta / |icc_at_c|`, signed like `delta`; `None` when the
    /// baseline ICC is 0.
    pub percent_change: Option<f64>,
}

/// Two-decimal rendering without a negative zero.
pub fn format_2dp(v: f64) -> String {
    fixed(v, 2)
}

fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

impl ReportRow {
    /// Columns `ICC@c`, `Best` and `Δ` as printed in a report table.
    pub fn table_cells(&self) -> [String; 3] {
        [
            format_2dp(self.icc_at_c),
            format_2dp(self.best),
            format_2dp(self.delta),
        ]
    }
}

/// ΔICC of the best augmented point over the baseline at `X = c`.
pub fn delta_summary(
    baseline: &ReliabilityCurve,
    points: &[AugmentedPoint],
) -> Result<ReportRow, ReliabilityError> {
    let first = points
        .first()
        .ok_or_else(|| ReliabilityError::DegenerateMatrix("no augmented points".into()))?;
    let c = first.context;
    let base = baseline
        .at(TrialCount::Count(c))
        .ok_or(ReliabilityError::MissingBaselinePoint(c))?;
    let best = points
        .iter()
        .fold(first, |b, p| if p.mean_icc > b.mean_icc { p } else { b });
    let delta = best.mean_icc - base.icc;
    Ok(ReportRow {
        parameter: baseline.parameter,
        cohort: baseline.cohort,
        protocol: baseline.protocol,
        forecaster: first.forecaster.clone(),
        context: c,
        icc_at_c: base.icc,
        best: best.mean_icc,
        best_k: best.k,
        delta,
        percent_change: (base.icc != 0.0).then(|| 100.0 * delta / base.icc.abs()),
    })
}

pub const CURVE_HEADER: [&str; 9] = [
    "parameter",
    "cohort",
    "protocol",
    "x_or_k",
    "kind",
    "icc",
    "lo_or_sd",
    "hi",
    "forecaster",
];

pub fn write_curves<W: Write>(w: W, curves: &[ReliabilityCurve]) -> Result<(), ReliabilityError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for c in curves {
        for p in &c.points {
            out.write_record([
                c.parameter.as_str().to_string(),
                c.cohort.to_string(),
                c.protocol.to_string(),
                p.count.to_string(),
                "recorded".to_string(),
                p.icc.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
                String::new(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_points<W: Write>(w: W, points: &[AugmentedPoint]) -> Result<(), ReliabilityError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for p in points {
        out.write_record([
            p.parameter.as_str().to_string(),
            p.cohort.to_string(),
            p.protocol.to_string(),
            p.k.to_string(),
            "augmented".to_string(),
            p.mean_icc.to_string(),
            p.sd_icc.to_string(),
            String::new(),
            p.forecaster.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn report_header(context: usize) -> [String; 9] {
    [
        "parameter".into(),
        "cohort".into(),
        "protocol".into(),
        "forecaster".into(),
        format!("ICC@{context}"),
        "Best".into(),
        "Δ".into(),
        "percent_change".into(),
        "best_k".into(),
    ]
}

pub fn write_report<W: Write>(
    w: W,
    context: usize,
    rows: &[ReportRow],
) -> Result<(), ReliabilityError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(report_header(context))?;
    for r in rows {
        let [icc, best, delta] = r.table_cells();
        out.write_record([
            r.parameter.as_str().to_string(),
            r.cohort.to_string(),
            r.protocol.to_string(),
            r.forecaster.clone(),
            icc,
            best,
            delta,
            r.percent_change.map(|v| fixed(v, 1)).unwrap_or_default(),
            r.best_k.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[[f64; 2]]) -> PairedMeasurements<f64> {
        PairedMeasurements::new(rows.iter().map(|r| r.to_vec()).collect(), "x", "u").unwrap()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(icc_2_1(&m(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])), 1.0);
        assert_eq!(icc_2_1(&m(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])), 0.0);
        assert_abs_diff_eq!(
            icc_2_1(&m(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])),
            8.0 / 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn guards() {
        assert!(matches!(
            PairedMeasurements::<f64>::new(vec![vec![1.0, 2.0]; 2], "x", "u"),
            Err(ReliabilityError::TooFewSubjects(2))
        ));
        assert!(matches!(
            PairedMeasurements::new(vec![vec![1.0, f64::NAN]; 3], "x", "u"),
            Err(ReliabilityError::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn classification_bands() {
        assert_eq!(classify_icc(0.49), IccClass::Poor);
        assert_eq!(classify_icc(0.50), IccClass::Moderate);
        assert_eq!(classify_icc(0.75), IccClass::Good);
        assert_eq!(classify_icc(0.90), IccClass::Excellent);
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let pairs = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (5.0, 5.0)];
        // every replicate is either perfect agreement or all-identical rows
        let reps = bootstrap_replicates(&pairs, 200, 4).unwrap();
        assert!(reps.iter().all(|v| *v == 1.0 || *v == 0.0));
        let (lo, hi) = bootstrap_ci(&[(1.0, 2.0), (1.0, 2.0), (1.0, 2.0)], 50, 1).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        let pairs = [(1.0, 1.5), (2.0, 1.7), (3.0, 3.9), (4.0, 3.0)];
        let single = bootstrap_replicates(&pairs, 1, 3).unwrap()[0];
        assert_eq!(bootstrap_ci(&pairs, 1, 3).unwrap(), (single, single));
    }

    #[test]
    fn trial_count_serde() {
        let v: Vec<TrialCount> = serde_json::from_str(r#"[8, "full", "16"]"#).unwrap();
        assert_eq!(
            v,
            vec![
                TrialCount::Count(8),
                TrialCount::Full,
                TrialCount::Count(16)
            ]
        );
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[8,"full",16]"#);
        assert!(TrialCount::Count(56) < TrialCount::Full);
    }

    fn curve(icc_c: f64) -> ReliabilityCurve {
        ReliabilityCurve {
            parameter: KstParameter::ReactionTime,
            cohort: CohortLabel::Control,
            protocol: Protocol::P1,
            points: vec![CurvePoint {
                count: TrialCount::Count(8),
                x: 8,
                icc: icc_c,
                ci_low: icc_c,
                ci_high: icc_c,
                n_subjects: 10,
            }],
        }
    }

    fn point(k: usize, v: f64) -> AugmentedPoint {
        AugmentedPoint {
            parameter: KstParameter::ReactionTime,
            cohort: CohortLabel::Control,
            protocol: Protocol::P1,
            context: 8,
            k,
            mean_icc: v,
            sd_icc: 0.0,
            forecaster: "chronos".into(),
            n_subjects: 10,
        }
    }

    #[test]
    fn delta_no_gain_and_missing_point() {
        let row = delta_summary(&curve(0.8), &[point(0, 0.8), point(8, 0.7)]).unwrap();
        assert_eq!(row.delta, 0.0);
        assert_eq!(row.best_k, 0);
        let mut p = point(0, 0.5);
        p.context = 16;
        assert!(matches!(
            delta_summary(&curve(0.8), &[p]),
            Err(ReliabilityError::MissingBaselinePoint(16))
        ));
    }

    #[test]
    fn two_decimal_format() {
        assert_eq!(format_2dp(-0.001), "0.00");
        assert_eq!(format_2dp(0.97 - 0.88), "0.09");
        assert_eq!(format_2dp(0.92 - 0.94), "-0.02");
        assert_eq!(fixed(-0.04, 1), "0.0");
        assert_eq!(fixed(-12.34, 1), "-12.3");
    }

    #[test]
    fn percent_change_follows_delta_sign() {
        let row = delta_summary(&curve(-0.2), &[point(0, -0.2), point(8, 0.3)]).unwrap();
        assert!((row.percent_change.unwrap() - 250.0).abs() < 1e-9);
        let row = delta_summary(&curve(0.0), &[point(0, 0.0), point(8, 0.3)]).unwrap();
        assert_eq!(row.percent_change, None);
    }
}
