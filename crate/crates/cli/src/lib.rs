//! Command implementations behind the `reachcast` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use reachcast::features::session_time;
use reachcast::forecast::{ArimaForecaster, ExternalForecaster, Forecaster, ReplayForecaster};
use reachcast::reliability::{self, delta_summary, ReliabilityError, ReportRow, TrialCount};
use reachcast::synth::GeneratorSpec;
use reachcast::types::{Cohort, CohortLabel, EvalConfig, Protocol};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_FORECASTER: u8 = 3;

pub const SESSION_HEADER: [&str; 6] = [
    "cohort",
    "protocol",
    "subject_id",
    "series",
    "session_time_s",
    "ecdf",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Forecaster(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Forecaster(_) => EXIT_FORECASTER,
            CliError::Output(_) => EXIT_FAILURE,
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load_cohort(path: &Path) -> Result<(Cohort, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::Input(format!("{}: not UTF-8: {e}", path.display())))?;
    let cohort =
        Cohort::from_json(text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((cohort, bytes))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub subjects: usize,
    pub trials: usize,
}

pub fn cmd_synth(spec_path: &Path, out_path: &Path) -> Result<SynthSummary, CliError> {
    let bytes = read_input(spec_path)?;
    let spec: GeneratorSpec = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let cohort = spec
        .generate()
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let json = cohort
        .to_json()
        .map_err(|e| CliError::Output(e.to_string()))?;
    write_output(out_path, json.as_bytes())?;
    Ok(SynthSummary {
        subjects: cohort.subjects().len(),
        trials: cohort.subjects().iter().map(|s| s.trials().len()).sum(),
    })
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ForecasterSpec {
    Arima,
    Replay,
    External { argv: Vec<String> },
}

impl ForecasterSpec {
    /// Parses `arima`, `replay`, `external` (with `external_cmd`) or
    /// `external:<command line>`.
    pub fn parse(name: &str, external_cmd: &[String]) -> Result<Self, CliError> {
        match name {
            "arima" => Ok(ForecasterSpec::Arima),
            "replay" => Ok(ForecasterSpec::Replay),
            "external" if external_cmd.is_empty() => Err(CliError::Input(
                "--forecaster external needs --external-cmd".into(),
            )),
            "external" => Ok(ForecasterSpec::External {
                argv: external_cmd.to_vec(),
            }),
            other => match other.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(ForecasterSpec::External {
                    argv: cmd.split_whitespace().map(str::to_string).collect(),
                }),
                _ => Err(CliError::Input(format!("unknown forecaster {other:?}"))),
            },
        }
    }

    fn build(&self, cohort: &Cohort, c: usize) -> Result<Box<dyn Forecaster>, CliError> {
        Ok(match self {
            ForecasterSpec::Arima => Box::new(ArimaForecaster::default()),
            ForecasterSpec::Replay => Box::new(ReplayForecaster::new(cohort, c)),
            ForecasterSpec::External { argv } => Box::new(
                ExternalForecaster::spawn(argv).map_err(|e| CliError::Forecaster(e.to_string()))?,
            ),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub cohort: PathBuf,
    pub config: PathBuf,
    pub forecaster: ForecasterSpec,
    pub out_dir: PathBuf,
    pub context: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    /// Hash of the tool version, input hashes, config snapshot and forecaster.
    pub run_hash: String,
    pub seed: u64,
    pub config: EvalConfig,
    pub forecaster: ForecasterSpec,
    pub inputs: BTreeMap<String, InputHash>,
    pub outputs: BTreeMap<String, String>,
    pub excluded_subjects: Vec<(String, String)>,
    pub dropped_subjects: Vec<(String, String)>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub stage_ms: BTreeMap<String, u128>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub report: Vec<ReportRow>,
    pub manifest: RunManifest,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn csv_bytes(
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), ReliabilityError>,
) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(buf)
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let started = unix_ms();
    let mut stage_ms = BTreeMap::new();
    let t = Instant::now();

    let (cohort, cohort_bytes) = load_cohort(&args.cohort)?;
    let config_bytes = read_input(&args.config)?;
    let mut config: EvalConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    if let Some(c) = args.context {
        config.context_size = c;
    }
    if !config
        .baseline_counts
        .contains(&TrialCount::Count(config.context_size))
    {
        config
            .baseline_counts
            .push(TrialCount::Count(config.context_size));
        config.baseline_counts.sort();
    }
    config
        .validate()
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    stage_ms.insert("load".to_string(), t.elapsed().as_millis());

    let t = Instant::now();
    let forecaster = args.forecaster.build(&cohort, config.context_size)?;
    stage_ms.insert("forecaster_start".to_string(), t.elapsed().as_millis());

    let t = Instant::now();
    let groups = reliability::prepare_groups(&cohort, &config);
    let excluded: Vec<(String, String)> = groups.iter().flat_map(|g| g.excluded.clone()).collect();
    let curves = reliability::baseline_curves(&cohort, &config)
        .map_err(|e| CliError::Input(e.to_string()))?;
    stage_ms.insert("baseline".to_string(), t.elapsed().as_millis());

    let t = Instant::now();
    let outcome = reliability::augmented_eval(&cohort, forecaster.as_ref(), &config).map_err(
        |e| match e {
            ReliabilityError::Forecast(f) => CliError::Forecaster(f.to_string()),
            other => CliError::Input(other.to_string()),
        },
    )?;
    stage_ms.insert("augmented".to_string(), t.elapsed().as_millis());
    if outcome.points.is_empty() && !outcome.dropped.is_empty() {
        let (id, why) = &outcome.dropped[0];
        return Err(CliError::Forecaster(format!(
            "forecasting failed for every group ({} subjects dropped; first: {id}: {why})",
            outcome.dropped.len()
        )));
    }

    let mut report = Vec::new();
    for curve in &curves {
        let points: Vec<_> = outcome
            .points
            .iter()
            .filter(|p| {
                p.parameter == curve.parameter
                    && p.cohort == curve.cohort
                    && p.protocol == curve.protocol
            })
            .cloned()
            .collect();
        if points.is_empty() {
            continue;
        }
        match delta_summary(curve, &points) {
            Ok(row) => report.push(row),
            Err(e) => log::warn!(
                "{} {}/{}: {e}",
                curve.parameter,
                curve.cohort,
                curve.protocol
            ),
        }
    }

    let t = Instant::now();
    let c = config.context_size;
    let files: [(&str, Vec<u8>); 3] = [
        (
            "curves.csv",
            csv_bytes(|b| reliability::write_curves(b, &curves))?,
        ),
        (
            "points.csv",
            csv_bytes(|b| reliability::write_points(b, &outcome.points))?,
        ),
        (
            "report.csv",
            csv_bytes(|b| reliability::write_report(b, c, &report))?,
        ),
    ];
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        write_output(&args.out_dir.join(name), bytes)?;
        outputs.insert(name.to_string(), sha256_hex(bytes));
    }
    stage_ms.insert("write".to_string(), t.elapsed().as_millis());

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "cohort".to_string(),
        InputHash {
            path: args.cohort.display().to_string(),
            sha256: sha256_hex(&cohort_bytes),
        },
    );
    inputs.insert(
        "config".to_string(),
        InputHash {
            path: args.config.display().to_string(),
            sha256: sha256_hex(&config_bytes),
        },
    );
    let snapshot = serde_json::to_string(&config).map_err(|e| CliError::Output(e.to_string()))?;
    let fc =
        serde_json::to_string(&args.forecaster).map_err(|e| CliError::Output(e.to_string()))?;
    let run_hash = sha256_hex(
        format!(
            "{}\n{}\n{}\n{}\n{}",
            env!("CARGO_PKG_VERSION"),
            inputs["cohort"].sha256,
            inputs["config"].sha256,
            snapshot,
            fc
        )
        .as_bytes(),
    );
    let manifest = RunManifest {
        tool: "reachcast".to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_hash,
        seed: config.seed,
        config,
        forecaster: args.forecaster.clone(),
        inputs,
        outputs,
        excluded_subjects: excluded,
        dropped_subjects: outcome.dropped,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        stage_ms,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Output(e.to_string()))?;
    write_output(&args.out_dir.join("manifest.json"), &json)?;
    Ok(RunSummary { report, manifest })
}

// ---------------------------------------------------------------------------
// session-times
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRow {
    pub cohort: CohortLabel,
    pub protocol: Protocol,
    pub subject_id: String,
    /// `all` or `first8`.
    pub series: &'static str,
    pub session_time_s: f64,
    /// Fraction of the group's subjects with a time at or below this one.
    pub ecdf: f64,
}

type SeriesKey = (CohortLabel, Protocol, &'static str);

/// Session times of every subject with ECDF positions within each
/// cohort × protocol × series group.
pub fn session_rows(cohort: &Cohort) -> Vec<SessionRow> {
    let mut groups: BTreeMap<SeriesKey, Vec<(String, f64)>> = BTreeMap::new();
    for s in cohort.subjects() {
        for (series, first_n) in [("all", None), ("first8", Some(8))] {
            match session_time(s, first_n) {
                Ok(t) => groups
                    .entry((s.cohort(), s.protocol(), series))
                    .or_default()
                    .push((s.subject_id().to_string(), t)),
                Err(e) => log::warn!("{}: {e}", s.subject_id()),
            }
        }
    }
    let mut rows = Vec::new();
    for ((cohort, protocol, series), mut times) in groups {
        times.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let n = times.len() as f64;
        for (subject_id, t) in &times {
            let at_or_below = times.iter().filter(|(_, u)| u <= t).count() as f64;
            rows.push(SessionRow {
                cohort,
                protocol,
                subject_id: subject_id.clone(),
                series,
                session_time_s: *t,
                ecdf: at_or_below / n,
            });
        }
    }
    rows
}

pub fn write_session_rows<W: Write>(w: W, rows: &[SessionRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SESSION_HEADER)?;
    for r in rows {
        out.write_record([
            r.cohort.to_string(),
            r.protocol.to_string(),
            r.subject_id.clone(),
            r.series.to_string(),
            r.session_time_s.to_string(),
            r.ecdf.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_session_times(cohort_path: &Path, out_path: &Path) -> Result<Vec<SessionRow>, CliError> {
    let (cohort, _) = load_cohort(cohort_path)?;
    if cohort.is_empty() {
        log::warn!("{}: cohort has no subjects", cohort_path.display());
    }
    let rows = session_rows(&cohort);
    let mut buf = Vec::new();
    write_session_rows(&mut buf, &rows).map_err(|e| CliError::Output(e.to_string()))?;
    write_output(out_path, &buf)?;
    Ok(rows)
}
