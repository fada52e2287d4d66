//! Forecast-augmented reaching assessment.
//!
//! Windows and resamples hand-speed trials, forecasts synthetic trials with
//! ARIMA or an external process, recomputes four kinematic parameters and
//! measures their reliability with ICC(2,1).
//!
//! Numeric kernels (resampling, statistics, the optimizer and ARIMA) are
//! generic over [`num::Real`]; the aliases below fix them to `f64`, the
//! precision used by the domain types.

pub mod arima;
pub mod features;
pub mod forecast;
pub mod ingest;
pub mod num;
pub mod optim;
pub mod reliability;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod types;

pub use num::Real;

pub type ArimaModel = arima::ArimaModel<f64>;
pub type Selection = arima::Selection<f64>;
pub type PairedMeasurements = reliability::PairedMeasurements<f64>;
pub type NelderMeadConfig = optim::NelderMeadConfig<f64>;

pub use arima::{ArimaError, ArimaOrder};
pub use features::{DetectorConfig, FeatureError, FeatureMode, KstFeatures};
pub use forecast::{
    ArimaForecaster, ExternalForecaster, ForecastError, ForecastPool, ForecastRequest, Forecaster,
    ReplayForecaster, SamplingMode,
};
pub use ingest::IngestError;
pub use reliability::{
    AugmentedPoint, ReliabilityCurve, ReliabilityError, ReportRow, TrialCount, UncertaintyMode,
};
pub use types::{
    Cohort, CohortLabel, DirectionCode, EvalConfig, KstParameter, Protocol, Provenance, SpeedTrace,
    SubjectRecord, Trial,
};
