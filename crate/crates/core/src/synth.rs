//! Deterministic synthetic reaching cohorts.
//!
//! Each reach is a minimum-jerk speed pulse preceded by a noisy postural hold
//! and a reaction delay. Impaired subjects get inflated reaction and movement
//! times, more trial-to-trial jitter, and occasional corrective sub-movements
//! (a second, smaller pulse appended to the first).
//!
//! The generator records the latent reaction and movement times as trial
//! metadata. They are defined at the detection threshold of the default
//! onset detector: the pulse is shifted so that its rising edge crosses the
//! threshold exactly `rt` ms after TARGET_ON, and the movement ends where the
//! falling edge of the last pulse crosses it again.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DetectorConfig;
use crate::ingest::{raw_to_trial, IngestError, RawTrialRecord};
use crate::num::Real;
use crate::rng::{derive_seed, stream, substream, StreamRng};
use crate::types::{
    Cohort, CohortLabel, DirectionCode, Phase, Protocol, SubjectRecord, Trial, TypeError,
};

const SAMPLE_RATE_HZ: f64 = 1000.0;
/// Hold recorded before TARGET_ON in the raw signal.
const RAW_LEAD_MS: usize = 400;
/// Hold recorded after the movement ends.
const RAW_TAIL_MS: usize = 300;
const CATCH_DURATION_MS: usize = 1500;
const MIN_PEAK_MPS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("{requested} trials exceeds protocol {protocol} maximum of {max}")]
    TooManyTrials {
        requested: usize,
        protocol: Protocol,
        max: usize,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Normalized minimum-jerk speed shape `30 t^2 (1 - t)^2` on `[0, 1]`.
pub fn minjerk_shape<T: Real>(t: T) -> T {
    let one = T::one();
    if t <= T::zero() || t >= one {
        return T::zero();
    }
    T::lit(30.0) * t * t * (one - t) * (one - t)
}

/// Speed at normalized time `t` of a reach of `distance_m` over `duration_s`.
pub fn minjerk_speed<T: Real>(t: T, distance_m: T, duration_s: T) -> T {
    distance_m / duration_s * minjerk_shape(t)
}

/// Normalized time at which the rising edge of a min-jerk pulse with peak
/// speed `peak` reaches `theta`; `None` if the pulse never reaches it.
pub fn minjerk_crossing(peak: f64, theta: f64) -> Option<f64> {
    if theta <= 0.0 {
        return Some(0.0);
    }
    // 30 u^2 (1-u)^2 / 1.875 = theta / peak  =>  u (1 - u) = sqrt(theta / peak / 16)
    let s = (theta / peak / 16.0).sqrt();
    if 4.0 * s >= 1.0 {
        return None;
    }
    Some((1.0 - (1.0 - 4.0 * s).sqrt()) / 2.0)
}

/// Per-subject generating parameters. Timing values describe the unimpaired
/// subject; `impairment` inflates them inside [`gen_subject`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub rt_mean_ms: f64,
    pub rt_sd_ms: f64,
    pub move_duration_mean_ms: f64,
    pub move_duration_sd_ms: f64,
    pub amplitude_m: f64,
    pub posture_noise_sd: f64,
    pub impairment: f64,
    pub per_direction_gain: [f64; 8],
}

impl Default for SubjectProfile {
    fn default() -> Self {
        Self {
            rt_mean_ms: 300.0,
            rt_sd_ms: 40.0,
            move_duration_mean_ms: 700.0,
            move_duration_sd_ms: 80.0,
            amplitude_m: 0.1,
            posture_noise_sd: 0.003,
            impairment: 0.0,
            per_direction_gain: [1.0; 8],
        }
    }
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("rt_mean_ms", self.rt_mean_ms),
            ("rt_sd_ms", self.rt_sd_ms),
            ("move_duration_mean_ms", self.move_duration_mean_ms),
            ("move_duration_sd_ms", self.move_duration_sd_ms),
            ("amplitude_m", self.amplitude_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::Profile(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        if !(self.posture_noise_sd.is_finite() && self.posture_noise_sd >= 0.0) {
            return Err(SynthError::Profile("posture_noise_sd must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.impairment) {
            return Err(SynthError::Profile("impairment must lie in [0, 1]".into()));
        }
        if self
            .per_direction_gain
            .iter()
            .any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(SynthError::Profile(
                "direction gains must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Session layout for one generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpec {
    pub subject_id: String,
    pub cohort: CohortLabel,
    pub protocol: Protocol,
    pub n_trials: usize,
    pub catch_per_block: usize,
}

/// Latent timing of one generated reach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachLatents {
    pub rt_ms: f64,
    pub mt_ms: f64,
    pub corrective: bool,
}

/// Trial schedule: `Some(direction)` for reaches, `None` for catch trials.
pub fn direction_schedule(
    protocol: Protocol,
    n_trials: usize,
    catch_per_block: usize,
    rng: &mut StreamRng,
) -> Vec<Option<DirectionCode>> {
    let mut out = Vec::with_capacity(n_trials);
    while out.len() < n_trials {
        let mut block: Vec<Option<DirectionCode>> = match protocol {
            Protocol::P1 | Protocol::P2 => {
                let mut d: Vec<_> = DirectionCode::all().map(Some).collect();
                d.shuffle(rng);
                d
            }
            Protocol::P3 => {
                let mut targets: Vec<u8> = (0..4).collect();
                targets.shuffle(rng);
                targets
                    .into_iter()
                    .flat_map(|t| {
                        [Phase::Out, Phase::Return]
                            .map(|p| Some(DirectionCode::flatten(t, p).expect("target < 4")))
                    })
                    .collect()
            }
        };
        for _ in 0..catch_per_block {
            // catch trials never split an out/return pair
            let step = if protocol == Protocol::P3 { 2 } else { 1 };
            let slots = block.len() / step + 1;
            let at = rng.random_range(0..slots) * step;
            block.insert(at.min(block.len()), None);
        }
        out.extend(block);
    }
    out.truncate(n_trials);
    out
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

struct Pulse {
    start_ms: f64,
    duration_ms: f64,
    distance_m: f64,
}

impl Pulse {
    fn peak(&self) -> f64 {
        1.875 * self.distance_m / (self.duration_ms / 1000.0)
    }

    fn speed_at(&self, t_ms: f64) -> f64 {
        let u = (t_ms - self.start_ms) / self.duration_ms;
        minjerk_speed(u, self.distance_m, self.duration_ms / 1000.0)
    }
}

/// Raw 1 kHz record and latents for one reach.
fn gen_reach(
    profile: &SubjectProfile,
    direction: DirectionCode,
    detector: &DetectorConfig,
    rng: &mut StreamRng,
) -> (RawTrialRecord, ReachLatents) {
    let imp = profile.impairment;
    let rt_mean = profile.rt_mean_ms * (1.0 + 0.8 * imp);
    let rt_sd = profile.rt_sd_ms * (1.0 + imp);
    let mt_mean = profile.move_duration_mean_ms * (1.0 + 0.8 * imp);
    let mt_sd = profile.move_duration_sd_ms * (1.0 + imp);
    let jitter = 0.05 + 0.10 * imp;

    let gain = (profile.per_direction_gain[direction.code() as usize]
        * (1.0 + jitter * normal(rng)))
    .max(0.3);
    let distance = profile.amplitude_m * gain;
    let mut duration = (mt_mean + mt_sd * normal(rng)).max(250.0);
    // keep the pulse clearly detectable
    duration = duration.min(1.875 * distance / MIN_PEAK_MPS * 1000.0);
    let mut rt = (rt_mean + rt_sd * normal(rng)).max(120.0);

    let primary_peak = 1.875 * distance / (duration / 1000.0);
    let theta = detector
        .floor_mps
        .max(detector.peak_fraction * primary_peak);
    let u_on = minjerk_crossing(primary_peak, theta).unwrap_or(0.0);
    rt = rt.max(u_on * duration + 20.0);
    let target_on = RAW_LEAD_MS as f64;
    let primary = Pulse {
        start_ms: target_on + rt - u_on * duration,
        duration_ms: duration,
        distance_m: distance,
    };
    let mut offset_ms = primary.start_ms + (1.0 - u_on) * duration;

    let corrective = rng.random::<f64>() < 0.5 * imp;
    let mut pulses = vec![primary];
    if corrective {
        let second = Pulse {
            start_ms: pulses[0].start_ms + duration,
            duration_ms: duration * rng.random_range(0.35..0.6),
            distance_m: distance * rng.random_range(0.1..0.25),
        };
        if let Some(u2) = minjerk_crossing(second.peak(), theta) {
            offset_ms = second.start_ms + (1.0 - u2) * second.duration_ms;
        }
        pulses.push(second);
    }
    let mt = offset_ms - (target_on + rt);
    let end_ms = pulses
        .iter()
        .map(|p| p.start_ms + p.duration_ms)
        .fold(0.0, f64::max);
    let n = end_ms.ceil() as usize + RAW_TAIL_MS + 1;

    let noise = profile.posture_noise_sd * (1.0 + imp);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64;
            let v: f64 = pulses.iter().map(|p| p.speed_at(t)).sum();
            v + (noise * normal(rng)).abs()
        })
        .collect();
    let raw = RawTrialRecord {
        speed_samples: samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        target_on_ms: target_on,
        reaction_time_ms: Some(rt),
        total_movement_time_ms: Some(mt),
        direction,
        is_catch: false,
    };
    (
        raw,
        ReachLatents {
            rt_ms: rt,
            mt_ms: mt,
            corrective,
        },
    )
}

fn gen_catch(profile: &SubjectProfile, rng: &mut StreamRng) -> RawTrialRecord {
    let noise = profile.posture_noise_sd * (1.0 + profile.impairment);
    let n = RAW_LEAD_MS + CATCH_DURATION_MS + 1;
    RawTrialRecord {
        speed_samples: (0..n).map(|_| (noise * normal(rng)).abs()).collect(),
        sample_rate_hz: SAMPLE_RATE_HZ,
        target_on_ms: RAW_LEAD_MS as f64,
        reaction_time_ms: None,
        total_movement_time_ms: None,
        direction: DirectionCode::new(0).expect("valid code"),
        is_catch: true,
    }
}

/// Generates one subject's session from a seed.
pub fn gen_subject(
    profile: &SubjectProfile,
    session: &SessionSpec,
    rng_seed: u64,
) -> Result<SubjectRecord, SynthError> {
    profile.validate()?;
    let max = session.protocol.max_trials();
    if session.n_trials > max {
        return Err(SynthError::TooManyTrials {
            requested: session.n_trials,
            protocol: session.protocol,
            max,
        });
    }
    let detector = DetectorConfig::default();
    let mut rng = substream(rng_seed, &[stream::SUBJECT]);
    let schedule = direction_schedule(
        session.protocol,
        session.n_trials,
        session.catch_per_block,
        &mut rng,
    );
    let mut trials: Vec<Trial> = Vec::with_capacity(schedule.len());
    for (i, slot) in schedule.into_iter().enumerate() {
        let raw = match slot {
            Some(d) => gen_reach(profile, d, &detector, &mut rng).0,
            None => gen_catch(profile, &mut rng),
        };
        trials.push(raw_to_trial(&raw, i as u32)?);
    }
    Ok(SubjectRecord::new(
        session.subject_id.clone(),
        session.cohort,
        session.protocol,
        trials,
    )?)
}

/// Between-subject distributions used by [`gen_cohort`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationParams {
    pub rt_mean_ms: f64,
    pub rt_between_sd_ms: f64,
    pub rt_within_sd_ms: f64,
    pub move_duration_mean_ms: f64,
    pub move_between_sd_ms: f64,
    pub move_within_sd_ms: f64,
    pub amplitude_m: f64,
    pub posture_noise_min: f64,
    pub posture_noise_max: f64,
    pub gain_sd: f64,
    pub stroke_impairment_min: f64,
    pub stroke_impairment_max: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        Self {
            rt_mean_ms: 300.0,
            rt_between_sd_ms: 45.0,
            rt_within_sd_ms: 40.0,
            move_duration_mean_ms: 700.0,
            move_between_sd_ms: 110.0,
            move_within_sd_ms: 80.0,
            amplitude_m: 0.1,
            posture_noise_min: 0.001,
            posture_noise_max: 0.008,
            gain_sd: 0.08,
            stroke_impairment_min: 0.2,
            stroke_impairment_max: 1.0,
        }
    }
}

impl PopulationParams {
    /// Draws one subject profile.
    pub fn draw_profile(&self, impaired: bool, rng: &mut StreamRng) -> SubjectProfile {
        let mut gains = [1.0; 8];
        for g in gains.iter_mut() {
            *g = (1.0 + self.gain_sd * normal(rng)).clamp(0.7, 1.3);
        }
        let within = |sd: f64, rng: &mut StreamRng| sd * rng.random_range(0.6..1.4);
        let impairment = if impaired {
            rng.random_range(self.stroke_impairment_min..=self.stroke_impairment_max)
        } else {
            0.0
        };
        let rt_dist = Normal::new(self.rt_mean_ms, self.rt_between_sd_ms).expect("finite sd");
        let mt_dist =
            Normal::new(self.move_duration_mean_ms, self.move_between_sd_ms).expect("finite sd");
        SubjectProfile {
            rt_mean_ms: rt_dist.sample(rng).max(150.0),
            rt_sd_ms: within(self.rt_within_sd_ms, rng),
            move_duration_mean_ms: mt_dist.sample(rng).max(300.0),
            move_duration_sd_ms: within(self.move_within_sd_ms, rng),
            amplitude_m: self.amplitude_m,
            posture_noise_sd: rng.random_range(self.posture_noise_min..=self.posture_noise_max),
            impairment,
            per_direction_gain: gains,
        }
    }
}

/// Protocol assignment: one protocol, or a list cycled over subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProtocolMix {
    Single(Protocol),
    Cycle(Vec<Protocol>),
}

impl ProtocolMix {
    pub fn protocol_for(&self, index: usize) -> Protocol {
        match self {
            ProtocolMix::Single(p) => *p,
            ProtocolMix::Cycle(v) if v.is_empty() => Protocol::P2,
            ProtocolMix::Cycle(v) => v[index % v.len()],
        }
    }
}

/// Generator spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_control: usize,
    pub n_stroke: usize,
    pub protocol: ProtocolMix,
    pub seed: u64,
    #[serde(default)]
    pub profile_overrides: PopulationParams,
    #[serde(default)]
    pub label: Option<String>,
    /// Trials per subject; the protocol maximum when absent.
    #[serde(default)]
    pub n_trials: Option<usize>,
    #[serde(default)]
    pub catch_per_block: usize,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Cohort, SynthError> {
        gen_cohort_with(
            self.n_control,
            self.n_stroke,
            &self.protocol,
            self.seed,
            &self.profile_overrides,
            self.n_trials,
            self.catch_per_block,
            self.label.as_deref().unwrap_or("synthetic"),
        )
    }
}

/// Cohort of `n_control` unimpaired and `n_stroke` impaired subjects with
/// default population parameters and full-length sessions.
pub fn gen_cohort(
    n_control: usize,
    n_stroke: usize,
    protocol_mix: &ProtocolMix,
    seed: u64,
) -> Result<Cohort, SynthError> {
    gen_cohort_with(
        n_control,
        n_stroke,
        protocol_mix,
        seed,
        &PopulationParams::default(),
        None,
        0,
        "synthetic",
    )
}

#[allow(clippy::too_many_arguments)]
pub fn gen_cohort_with(
    n_control: usize,
    n_stroke: usize,
    protocol_mix: &ProtocolMix,
    seed: u64,
    population: &PopulationParams,
    n_trials: Option<usize>,
    catch_per_block: usize,
    label: &str,
) -> Result<Cohort, SynthError> {
    use rayon::prelude::*;

    let jobs: Vec<(usize, CohortLabel, usize)> = (0..n_control)
        .map(|i| (i, CohortLabel::Control, i))
        .chain((0..n_stroke).map(|i| (n_control + i, CohortLabel::Stroke, i)))
        .collect();
    let subjects = jobs
        .par_iter()
        .map(|&(global, cohort, within)| {
            let subject_seed = derive_seed(seed, &[stream::SUBJECT, global as u64]);
            let mut rng = substream(subject_seed, &[]);
            let profile = population.draw_profile(cohort == CohortLabel::Stroke, &mut rng);
            let protocol = protocol_mix.protocol_for(within);
            let session = SessionSpec {
                subject_id: format!(
                    "{}-{:03}-{:08x}",
                    cohort.as_str(),
                    within,
                    subject_seed as u32
                ),
                cohort,
                protocol,
                n_trials: n_trials
                    .unwrap_or(protocol.max_trials())
                    .min(protocol.max_trials()),
                catch_per_block,
            };
            gen_subject(&profile, &session, subject_seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort::new(label, subjects)?)
}

/// Latents of every reach in a session, regenerated from the same seed as
/// [`gen_subject`]; useful for checking detectors against ground truth.
pub fn reach_latents(
    profile: &SubjectProfile,
    session: &SessionSpec,
    rng_seed: u64,
) -> Vec<Option<ReachLatents>> {
    let detector = DetectorConfig::default();
    let mut rng = substream(rng_seed, &[stream::SUBJECT]);
    let schedule = direction_schedule(
        session.protocol,
        session.n_trials,
        session.catch_per_block,
        &mut rng,
    );
    schedule
        .into_iter()
        .map(|slot| match slot {
            Some(d) => Some(gen_reach(profile, d, &detector, &mut rng).1),
            None => {
                gen_catch(profile, &mut rng);
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn minjerk_endpoints_and_peak() {
        assert_eq!(minjerk_speed(0.0, 0.1, 0.8), 0.0);
        assert_eq!(minjerk_speed(1.0, 0.1, 0.8), 0.0);
        // analytic peak 1.875 * D / T
        assert_relative_eq!(
            minjerk_speed(0.5, 0.1, 0.8),
            1.875 * 0.1 / 0.8,
            epsilon = 1e-15
        );
        assert_relative_eq!(minjerk_speed(0.5f64, 0.1, 0.8), 0.234375, epsilon = 1e-15);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert_relative_eq!(
                minjerk_speed(t, 0.1, 0.8),
                minjerk_speed(1.0 - t, 0.1, 0.8),
                epsilon = 1e-15
            );
            assert!(minjerk_shape(t) <= minjerk_shape(0.5));
        }
        assert_relative_eq!(minjerk_shape(0.5f32), 1.875f32);
    }

    #[test]
    fn crossing_solves_threshold() {
        let peak = 0.25;
        let u = minjerk_crossing(peak, 0.05).unwrap();
        assert_relative_eq!(minjerk_shape(u) / 1.875 * peak, 0.05, epsilon = 1e-12);
        assert!(minjerk_crossing(0.04, 0.05).is_none());
    }

    #[test]
    fn p3_schedule_pairs_out_and_return() {
        let mut rng = substream(3, &[]);
        let s = direction_schedule(Protocol::P3, 40, 0, &mut rng);
        assert_eq!(s.len(), 40);
        for pair in s.chunks(2) {
            let (t0, p0) = pair[0].unwrap().unflatten();
            let (t1, p1) = pair[1].unwrap().unflatten();
            assert_eq!(t0, t1);
            assert_eq!((p0, p1), (Phase::Out, Phase::Return));
        }
    }

    #[test]
    fn p2_schedule_is_block_balanced() {
        let mut rng = substream(4, &[]);
        let s = direction_schedule(Protocol::P2, 64, 0, &mut rng);
        for block in s.chunks(8) {
            let mut codes: Vec<u8> = block.iter().map(|d| d.unwrap().code()).collect();
            codes.sort();
            assert_eq!(codes, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn catch_trials_are_inserted() {
        let mut rng = substream(5, &[]);
        let s = direction_schedule(Protocol::P1, 60, 2, &mut rng);
        assert_eq!(s.iter().filter(|d| d.is_none()).count(), 12);
    }

    #[test]
    fn profile_validation() {
        let p = SubjectProfile {
            impairment: 1.5,
            ..SubjectProfile::default()
        };
        assert!(p.validate().is_err());
        let p = SubjectProfile {
            rt_mean_ms: 0.0,
            ..SubjectProfile::default()
        };
        assert!(p.validate().is_err());
    }
}
