//! Forecaster abstraction and forecast pools.
//!
//! A forecaster turns a subject's context trials into a pool of synthetic
//! traces per requested direction. Built-in forecasters are ARIMA and a
//! replay oracle; [`ExternalForecaster`] talks to a child process over the
//! `reachcast/1` line protocol.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arima::{self, ArimaError, ArimaOrder};
use crate::ingest::select_context;
use crate::rng::StreamRng;
use crate::types::{Cohort, DirectionCode, Provenance, SpeedTrace, Trial, TypeError, TRACE_LEN};

pub const PROTOCOL_VERSION: &str = "reachcast/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
/// Sequence indices of sampled forecast trials start here.
pub const FORECAST_SEQUENCE_BASE: u32 = 1_000_000;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("forecaster unavailable: {0}")]
    ForecasterUnavailable(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("forecaster did not answer within {0:?}")]
    Timeout(Duration),
    #[error("forecaster process exited ({status}); stderr: {stderr}")]
    ChildExit { status: String, stderr: String },
    #[error("forecaster reported an error: {0}")]
    Remote(String),
    #[error("empty pool for direction {0}")]
    EmptyPool(DirectionCode),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Arima(#[from] ArimaError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Time scale given to a forecast trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceTiming {
    pub duration_ms: f64,
    pub target_on_offset_ms: f64,
}

/// Per-direction mean timing of context trials, with the overall context
/// mean as fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingTable {
    by_direction: BTreeMap<DirectionCode, TraceTiming>,
    overall: TraceTiming,
}

impl TimingTable {
    pub fn from_context(traces: &[SpeedTrace], dirs: &[DirectionCode]) -> Option<Self> {
        if traces.is_empty() || traces.len() != dirs.len() {
            return None;
        }
        let mean_of = |items: &[&SpeedTrace]| {
            let n = items.len() as f64;
            TraceTiming {
                duration_ms: items.iter().map(|t| t.duration_ms()).sum::<f64>() / n,
                target_on_offset_ms: items.iter().map(|t| t.target_on_offset_ms()).sum::<f64>() / n,
            }
        };
        let mut groups: BTreeMap<DirectionCode, Vec<&SpeedTrace>> = BTreeMap::new();
        for (t, d) in traces.iter().zip(dirs) {
            groups.entry(*d).or_default().push(t);
        }
        let all: Vec<&SpeedTrace> = traces.iter().collect();
        Some(Self {
            by_direction: groups.iter().map(|(d, g)| (*d, mean_of(g))).collect(),
            overall: mean_of(&all),
        })
    }

    pub fn get(&self, dir: DirectionCode) -> TraceTiming {
        self.by_direction.get(&dir).copied().unwrap_or(self.overall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCount {
    pub direction: DirectionCode,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRequest {
    pub subject_id: String,
    pub context: Vec<SpeedTrace>,
    pub context_dirs: Vec<DirectionCode>,
    pub targets: Vec<TargetCount>,
    pub pool_size: usize,
    pub seed: u64,
}

impl ForecastRequest {
    pub fn new(
        subject_id: impl Into<String>,
        context: &[Trial],
        targets: Vec<TargetCount>,
        pool_size: usize,
        seed: u64,
    ) -> Result<Self, ForecastError> {
        let req = Self {
            subject_id: subject_id.into(),
            context: context.iter().map(|t| t.trace.clone()).collect(),
            context_dirs: context.iter().map(|t| t.direction).collect(),
            targets,
            pool_size,
            seed,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: &str| Err(ForecastError::InvalidRequest(m.to_string()));
        if self.context.is_empty() {
            return bad("empty context");
        }
        if self.context.len() != self.context_dirs.len() {
            return bad("context and context_dirs differ in length");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1");
        }
        if self.targets.iter().any(|t| t.count == 0) {
            return bad("target counts must be at least 1");
        }
        Ok(())
    }

    /// Total number of requested trials.
    pub fn total_count(&self) -> usize {
        self.targets.iter().map(|t| t.count as usize).sum()
    }

    /// Requested directions interleaved one per target in turn, repeated
    /// until every count is used up.
    pub fn label_sequence(&self) -> Vec<DirectionCode> {
        let mut left: Vec<u32> = self.targets.iter().map(|t| t.count).collect();
        let mut out = Vec::with_capacity(self.total_count());
        while left.iter().any(|c| *c > 0) {
            for (t, l) in self.targets.iter().zip(left.iter_mut()) {
                if *l > 0 {
                    *l -= 1;
                    out.push(t.direction);
                }
            }
        }
        out
    }
}

/// Counts per direction over `schedule[..k]`, in first-appearance order.
pub fn targets_for_schedule(schedule: &[DirectionCode], k: usize) -> Vec<TargetCount> {
    let mut out: Vec<TargetCount> = Vec::new();
    for d in schedule
        .iter()
        .cycle()
        .take(if schedule.is_empty() { 0 } else { k })
    {
        match out.iter_mut().find(|t| t.direction == *d) {
            Some(t) => t.count += 1,
            None => out.push(TargetCount {
                direction: *d,
                count: 1,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPool {
    pub model_id: String,
    pub pools: BTreeMap<DirectionCode, Vec<SpeedTrace>>,
}

impl ForecastPool {
    pub fn get(&self, dir: DirectionCode) -> &[SpeedTrace] {
        self.pools.get(&dir).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sizes(&self) -> BTreeMap<DirectionCode, usize> {
        self.pools.iter().map(|(d, v)| (*d, v.len())).collect()
    }
}

pub trait Forecaster: Send + Sync {
    fn id(&self) -> &str;

    /// Produces the pool without the shared output checks; call
    /// [`forecast`] instead.
    fn forecast_unchecked(&self, request: &ForecastRequest) -> Result<ForecastPool, ForecastError>;
}

/// Runs `forecaster` and checks that every requested direction has a
/// non-empty pool of valid traces.
pub fn forecast(
    forecaster: &dyn Forecaster,
    request: &ForecastRequest,
) -> Result<ForecastPool, ForecastError> {
    request.validate()?;
    let pool = forecaster.forecast_unchecked(request)?;
    for t in &request.targets {
        let traces = pool.get(t.direction);
        if traces.is_empty() {
            return Err(ForecastError::EmptyPool(t.direction));
        }
        if let Some(bad) = traces
            .iter()
            .find(|s| s.samples().len() != TRACE_LEN || !s.is_finite())
        {
            return Err(ForecastError::MalformedOutput(format!(
                "invalid trace of length {} for direction {}",
                bad.samples().len(),
                t.direction
            )));
        }
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Pool sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Without replacement within a direction until its candidates run out,
    /// then with replacement.
    #[default]
    Hybrid,
    WithReplacement,
}

/// Picks `k` pool positions following `schedule` (cycled).
pub fn sample_indices(
    sizes: &BTreeMap<DirectionCode, usize>,
    k: usize,
    schedule: &[DirectionCode],
    mode: SamplingMode,
    rng: &mut StreamRng,
) -> Result<Vec<(DirectionCode, usize)>, ForecastError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if schedule.is_empty() {
        return Err(ForecastError::InvalidRequest(
            "empty direction schedule".into(),
        ));
    }
    let mut remaining: HashMap<DirectionCode, Vec<usize>> = HashMap::new();
    let mut out = Vec::with_capacity(k);
    for dir in schedule.iter().cycle().take(k) {
        let n = sizes.get(dir).copied().unwrap_or(0);
        if n == 0 {
            return Err(ForecastError::EmptyPool(*dir));
        }
        let idx = match mode {
            SamplingMode::WithReplacement => rng.random_range(0..n),
            SamplingMode::Hybrid => {
                let left = remaining.entry(*dir).or_insert_with(|| (0..n).collect());
                if left.is_empty() {
                    rng.random_range(0..n)
                } else {
                    let at = rng.random_range(0..left.len());
                    left.remove(at)
                }
            }
        };
        out.push((*dir, idx));
    }
    Ok(out)
}

/// Draws `k` forecast trials from `pool` following `schedule`.
pub fn sample_pool(
    pool: &ForecastPool,
    k: usize,
    schedule: &[DirectionCode],
    mode: SamplingMode,
    rng: &mut StreamRng,
) -> Result<Vec<Trial>, ForecastError> {
    let picks = sample_indices(&pool.sizes(), k, schedule, mode, rng)?;
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(i, (dir, idx))| {
            Trial::forecasted(
                pool.get(dir)[idx].clone(),
                dir,
                FORECAST_SEQUENCE_BASE + i as u32,
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// ARIMA
// ---------------------------------------------------------------------------

/// Direction-agnostic ARIMA forecaster on the concatenated context.
///
/// Each of the `M` simulated paths spans all requested trials; its
/// segments are labelled by [`ForecastRequest::label_sequence`], so a
/// direction requested `n` times receives `n * M` candidates.
#[derive(Debug, Clone)]
pub struct ArimaForecaster {
    pub grid: Vec<ArimaOrder>,
}

impl Default for ArimaForecaster {
    fn default() -> Self {
        Self {
            grid: ArimaOrder::grid(),
        }
    }
}

impl ArimaForecaster {
    pub const ID: &'static str = "arima";

    pub fn fit_context(
        &self,
        request: &ForecastRequest,
    ) -> Result<arima::Selection<f64>, ArimaError> {
        let series: Vec<f64> = request
            .context
            .iter()
            .flat_map(|t| t.samples().iter().copied())
            .collect();
        arima::select_order_in(&series, &self.grid)
    }
}

impl Forecaster for ArimaForecaster {
    fn id(&self) -> &str {
        Self::ID
    }

    fn forecast_unchecked(&self, request: &ForecastRequest) -> Result<ForecastPool, ForecastError> {
        let selection = self.fit_context(request)?;
        log::debug!(
            "{}: ARIMA{} aicc={:.3}",
            request.subject_id,
            selection.order,
            selection.model.aicc()
        );
        let labels = request.label_sequence();
        let k = labels.len();
        let timings = TimingTable::from_context(&request.context, &request.context_dirs)
            .ok_or_else(|| ForecastError::InvalidRequest("empty context".into()))?;
        let seg_timing: Vec<TraceTiming> = labels.iter().map(|d| timings.get(*d)).collect();
        let paths = selection
            .model
            .simulate_paths(TRACE_LEN * k, request.pool_size, request.seed);
        let mut pools: BTreeMap<DirectionCode, Vec<SpeedTrace>> = BTreeMap::new();
        for path in &paths {
            let traces = arima::paths_to_trials(path, k, &seg_timing, Self::ID)?;
            for (dir, trace) in labels.iter().zip(traces) {
                pools.entry(*dir).or_default().push(trace);
            }
        }
        Ok(ForecastPool {
            model_id: Self::ID.to_string(),
            pools,
        })
    }
}

// ---------------------------------------------------------------------------
// Replay oracle
// ---------------------------------------------------------------------------

/// Test oracle returning each subject's true held-out trials.
#[derive(Debug, Clone)]
pub struct ReplayForecaster {
    held_out: HashMap<String, Vec<Trial>>,
}

impl ReplayForecaster {
    pub const ID: &'static str = "replay";

    /// Held-out trials are everything outside the context of size `c`.
    pub fn new(cohort: &Cohort, c: usize) -> Self {
        let held_out = cohort
            .subjects()
            .iter()
            .filter_map(|s| {
                select_context(s, c)
                    .ok()
                    .map(|split| (s.subject_id().to_string(), split.remainder))
            })
            .collect();
        Self { held_out }
    }
}

impl Forecaster for ReplayForecaster {
    fn id(&self) -> &str {
        Self::ID
    }

    fn forecast_unchecked(&self, request: &ForecastRequest) -> Result<ForecastPool, ForecastError> {
        let held = self.held_out.get(&request.subject_id).ok_or_else(|| {
            ForecastError::ForecasterUnavailable(format!(
                "no held-out trials for {}",
                request.subject_id
            ))
        })?;
        let mut pools: BTreeMap<DirectionCode, Vec<SpeedTrace>> = BTreeMap::new();
        for t in held {
            if request.targets.iter().any(|x| x.direction == t.direction) {
                pools.entry(t.direction).or_default().push(
                    t.trace
                        .clone()
                        .with_provenance(Provenance::Forecasted(Self::ID.to_string())),
                );
            }
        }
        Ok(ForecastPool {
            model_id: Self::ID.to_string(),
            pools,
        })
    }
}

// ---------------------------------------------------------------------------
// External process
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WireTarget {
    dir: u8,
    count: u32,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    subject_id: &'a str,
    context: Vec<&'a [f64]>,
    context_dirs: Vec<u8>,
    targets: Vec<WireTarget>,
    pool_size: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
    #[serde(default)]
    capabilities: Vec<String>,
}

/// Encodes one request line (without the trailing newline).
pub fn encode_request(id: u64, request: &ForecastRequest) -> Result<String, ForecastError> {
    let wire = WireRequest {
        id,
        subject_id: &request.subject_id,
        context: request.context.iter().map(|t| t.samples()).collect(),
        context_dirs: request.context_dirs.iter().map(|d| d.code()).collect(),
        targets: request
            .targets
            .iter()
            .map(|t| WireTarget {
                dir: t.direction.code(),
                count: t.count,
            })
            .collect(),
        pool_size: u32::try_from(request.pool_size)
            .map_err(|_| ForecastError::InvalidRequest("pool_size exceeds u32".into()))?,
        seed: request.seed,
    };
    serde_json::to_string(&wire).map_err(|e| ForecastError::InvalidRequest(e.to_string()))
}

/// Decodes one response line into a pool of traces timed by `timings`.
pub fn decode_response(
    line: &str,
    expected_id: u64,
    request: &ForecastRequest,
    timings: &TimingTable,
    model_id: &str,
) -> Result<ForecastPool, ForecastError> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| ForecastError::ProtocolViolation(format!("response is not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ForecastError::ProtocolViolation("response is not an object".into()))?;
    let id = obj
        .get("id")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ForecastError::ProtocolViolation("response lacks a numeric id".into()))?;
    if id != expected_id {
        return Err(ForecastError::ProtocolViolation(format!(
            "response id {id} does not match request id {expected_id}"
        )));
    }
    if let Some(err) = obj.get("error") {
        let msg = err
            .as_str()
            .map(str::to_string)
            .unwrap_or_else(|| err.to_string());
        return Err(ForecastError::Remote(msg));
    }
    let pools_obj = obj
        .get("pools")
        .and_then(|v| v.as_object())
        .ok_or_else(|| ForecastError::ProtocolViolation("response lacks pools".into()))?;

    let mut pools = BTreeMap::new();
    for (key, arrays) in pools_obj {
        let dir = key
            .parse::<u8>()
            .ok()
            .and_then(|c| DirectionCode::new(c).ok())
            .ok_or_else(|| ForecastError::MalformedOutput(format!("bad direction key {key:?}")))?;
        let arrays = arrays
            .as_array()
            .ok_or_else(|| ForecastError::MalformedOutput(format!("pool {key} is not an array")))?;
        let timing = timings.get(dir);
        let mut traces = Vec::with_capacity(arrays.len());
        for a in arrays {
            let samples: Vec<f64> = a
                .as_array()
                .ok_or_else(|| {
                    ForecastError::MalformedOutput(format!("pool {key} entry is not an array"))
                })?
                .iter()
                .map(|v| v.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| {
                    ForecastError::MalformedOutput(format!("non-numeric sample in pool {key}"))
                })?;
            if samples.len() != TRACE_LEN {
                return Err(ForecastError::MalformedOutput(format!(
                    "trace of length {} in pool {key}",
                    samples.len()
                )));
            }
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(ForecastError::MalformedOutput(format!(
                    "non-finite sample in pool {key}"
                )));
            }
            traces.push(SpeedTrace::from_forecast(
                samples,
                timing.duration_ms,
                timing.target_on_offset_ms,
                model_id,
            )?);
        }
        pools.insert(dir, traces);
    }
    for t in &request.targets {
        let n = pools.get(&t.direction).map_or(0, Vec::len);
        if n != request.pool_size {
            return Err(ForecastError::MalformedOutput(format!(
                "direction {} has {n} traces, expected {}",
                t.direction, request.pool_size
            )));
        }
    }
    Ok(ForecastPool {
        model_id: model_id.to_string(),
        pools,
    })
}

struct ChildState {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Forecaster served by a child process speaking `reachcast/1` on its
/// standard streams. Requests are serialized, one in flight.
pub struct ExternalForecaster {
    id: String,
    capabilities: Vec<String>,
    timeout: Duration,
    state: Mutex<ChildState>,
    stderr: Arc<Mutex<String>>,
    stderr_thread: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for ExternalForecaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalForecaster")
            .field("id", &self.id)
            .field("capabilities", &self.capabilities)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalForecaster {
    pub const ID: &'static str = "external";

    /// Starts `argv` and reads its handshake.
    pub fn spawn(argv: &[String]) -> Result<Self, ForecastError> {
        Self::spawn_with_timeout(argv, DEFAULT_TIMEOUT)
    }

    pub fn spawn_with_timeout(argv: &[String], timeout: Duration) -> Result<Self, ForecastError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ForecastError::ForecasterUnavailable("empty command line".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| {
                ForecastError::ForecasterUnavailable(format!("cannot start {program}: {e}"))
            })?;

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let sink = Arc::clone(&stderr);
        let stderr_thread = std::thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                if let Ok(mut s) = sink.lock() {
                    s.push_str(&String::from_utf8_lossy(&buf[..n]));
                }
            }
        });

        let stdin = child.stdin.take();
        let mut fc = Self {
            id: Self::ID.to_string(),
            capabilities: Vec::new(),
            timeout,
            state: Mutex::new(ChildState {
                child,
                stdin,
                lines: rx,
                next_id: 1,
            }),
            stderr,
            stderr_thread: Mutex::new(Some(stderr_thread)),
        };
        let line = {
            let mut state = fc.state.lock().expect("fresh mutex");
            fc.read_line(&mut state)?
        };
        let hs: Handshake = serde_json::from_str(&line).map_err(|e| {
            ForecastError::ProtocolViolation(format!("bad handshake {line:?}: {e}"))
        })?;
        if hs.protocol != PROTOCOL_VERSION {
            return Err(ForecastError::ProtocolViolation(format!(
                "unsupported protocol {:?}",
                hs.protocol
            )));
        }
        fc.capabilities = hs.capabilities;
        Ok(fc)
    }

    pub fn capabilities(&self) -> &[String] {
        &self.capabilities
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Diagnostic output the child has written so far.
    pub fn stderr_output(&self) -> String {
        self.stderr.lock().map(|s| s.clone()).unwrap_or_default()
    }

    fn child_exit(&self, state: &mut ChildState) -> ForecastError {
        let status = match state.child.wait() {
            Ok(s) => s.to_string(),
            Err(e) => format!("unknown ({e})"),
        };
        if let Some(h) = self.stderr_thread.lock().ok().and_then(|mut h| h.take()) {
            let _ = h.join();
        }
        ForecastError::ChildExit {
            status,
            stderr: self.stderr_output(),
        }
    }

    fn read_line(&self, state: &mut ChildState) -> Result<String, ForecastError> {
        match state.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ForecastError::ProtocolViolation(format!(
                "unreadable output: {e}"
            ))),
            Err(RecvTimeoutError::Timeout) => Err(ForecastError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(self.child_exit(state)),
        }
    }

    /// Sends one request and waits for its response line.
    pub fn roundtrip(&self, request: &ForecastRequest) -> Result<ForecastPool, ForecastError> {
        let timings = TimingTable::from_context(&request.context, &request.context_dirs)
            .ok_or_else(|| ForecastError::InvalidRequest("empty context".into()))?;
        let mut state = self.state.lock().map_err(|_| {
            ForecastError::ForecasterUnavailable("forecaster state poisoned".into())
        })?;
        let id = state.next_id;
        state.next_id += 1;
        let line = encode_request(id, request)?;
        let sent = match state.stdin.as_mut() {
            Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()),
            None => Err(std::io::Error::from(std::io::ErrorKind::BrokenPipe)),
        };
        if sent.is_err() {
            return Err(self.child_exit(&mut state));
        }
        let response = self.read_line(&mut state)?;
        decode_response(&response, id, request, &timings, &self.id)
    }
}

impl Forecaster for ExternalForecaster {
    fn id(&self) -> &str {
        &self.id
    }

    fn forecast_unchecked(&self, request: &ForecastRequest) -> Result<ForecastPool, ForecastError> {
        self.roundtrip(request)
    }
}

impl Drop for ExternalForecaster {
    fn drop(&mut self) {
        if let Ok(state) = self.state.get_mut() {
            state.stdin.take();
            for _ in 0..50 {
                if let Ok(Some(_)) = state.child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = state.child.kill();
            let _ = state.child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn dir(c: u8) -> DirectionCode {
        DirectionCode::new(c).unwrap()
    }

    fn trace(v: f64, dur: f64) -> SpeedTrace {
        SpeedTrace::new(vec![v; TRACE_LEN], dur, 200.0, Provenance::Recorded).unwrap()
    }

    #[test]
    fn timing_table_falls_back_to_overall_mean() {
        let traces = [trace(0.1, 1000.0), trace(0.1, 1200.0), trace(0.1, 800.0)];
        let t = TimingTable::from_context(&traces, &[dir(0), dir(0), dir(1)]).unwrap();
        assert_eq!(t.get(dir(0)).duration_ms, 1100.0);
        assert_eq!(t.get(dir(1)).duration_ms, 800.0);
        assert_eq!(t.get(dir(5)).duration_ms, 1000.0);
    }

    #[test]
    fn label_sequence_interleaves_targets() {
        let req = ForecastRequest {
            subject_id: "s".into(),
            context: vec![trace(0.1, 1000.0)],
            context_dirs: vec![dir(0)],
            targets: vec![
                TargetCount {
                    direction: dir(2),
                    count: 2,
                },
                TargetCount {
                    direction: dir(5),
                    count: 1,
                },
            ],
            pool_size: 1,
            seed: 0,
        };
        assert_eq!(req.label_sequence(), vec![dir(2), dir(5), dir(2)]);
        assert_eq!(req.total_count(), 3);
    }

    #[test]
    fn targets_follow_schedule() {
        let sched = [dir(3), dir(1), dir(3)];
        let t = targets_for_schedule(&sched, 5);
        assert_eq!(
            t,
            vec![
                TargetCount {
                    direction: dir(3),
                    count: 3
                },
                TargetCount {
                    direction: dir(1),
                    count: 2
                },
            ]
        );
        assert!(targets_for_schedule(&sched, 0).is_empty());
    }

    fn pool_of(per_dir: usize) -> ForecastPool {
        let pools = DirectionCode::all()
            .map(|d| {
                let v = (0..per_dir)
                    .map(|i| {
                        SpeedTrace::from_forecast(
                            vec![d.code() as f64 + i as f64 / 100.0; TRACE_LEN],
                            1000.0,
                            200.0,
                            "t",
                        )
                        .unwrap()
                    })
                    .collect();
                (d, v)
            })
            .collect();
        ForecastPool {
            model_id: "t".into(),
            pools,
        }
    }

    #[test]
    fn one_trial_per_direction() {
        let pool = pool_of(8);
        let sched: Vec<_> = DirectionCode::all().collect();
        let mut rng = substream(1, &[]);
        let trials = sample_pool(&pool, 8, &sched, SamplingMode::Hybrid, &mut rng).unwrap();
        assert_eq!(trials.len(), 8);
        for (t, d) in trials.iter().zip(&sched) {
            assert_eq!(t.direction, *d);
        }
        assert!(
            sample_pool(&pool, 0, &sched, SamplingMode::Hybrid, &mut rng)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn exhaustion_returns_every_element_once() {
        let pool = pool_of(3);
        let sched: Vec<_> = DirectionCode::all().collect();
        let mut rng = substream(9, &[]);
        let picks =
            sample_indices(&pool.sizes(), 24, &sched, SamplingMode::Hybrid, &mut rng).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for p in &picks {
            assert!(seen.insert(*p));
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn missing_direction_is_empty_pool() {
        let mut pool = pool_of(2);
        pool.pools.remove(&dir(4));
        let mut rng = substream(0, &[]);
        let err = sample_pool(&pool, 8, &[dir(4)], SamplingMode::Hybrid, &mut rng).unwrap_err();
        assert!(matches!(err, ForecastError::EmptyPool(d) if d == dir(4)));
    }

    #[test]
    fn request_wire_format() {
        let req = ForecastRequest {
            subject_id: "s1".into(),
            context: vec![trace(0.5, 1000.0)],
            context_dirs: vec![dir(3)],
            targets: vec![TargetCount {
                direction: dir(3),
                count: 2,
            }],
            pool_size: 4,
            seed: 7,
        };
        let line = encode_request(12, &req).unwrap();
        let ctx = vec!["0.5"; TRACE_LEN].join(",");
        assert_eq!(
            line,
            format!(
                r#"{{"id":12,"subject_id":"s1","context":[[{ctx}]],"context_dirs":[3],"targets":[{{"dir":3,"count":2}}],"pool_size":4,"seed":7}}"#
            )
        );
    }

    #[test]
    fn response_decoding_guards() {
        let req = ForecastRequest {
            subject_id: "s1".into(),
            context: vec![trace(0.5, 900.0)],
            context_dirs: vec![dir(3)],
            targets: vec![TargetCount {
                direction: dir(3),
                count: 1,
            }],
            pool_size: 1,
            seed: 7,
        };
        let timings = TimingTable::from_context(&req.context, &req.context_dirs).unwrap();
        let arr = |n: usize, v: &str| format!("[{}]", vec![v; n].join(","));
        let ok = format!(r#"{{"id":1,"pools":{{"3":[{}]}}}}"#, arr(64, "-0.25"));
        let pool = decode_response(&ok, 1, &req, &timings, "ext").unwrap();
        assert_eq!(pool.get(dir(3))[0].samples()[0], 0.0);
        assert_eq!(pool.get(dir(3))[0].duration_ms(), 900.0);

        let short = format!(r#"{{"id":1,"pools":{{"3":[{}]}}}}"#, arr(63, "0.1"));
        assert!(matches!(
            decode_response(&short, 1, &req, &timings, "ext"),
            Err(ForecastError::MalformedOutput(_))
        ));
        assert!(matches!(
            decode_response(&ok, 2, &req, &timings, "ext"),
            Err(ForecastError::ProtocolViolation(_))
        ));
        assert!(matches!(
            decode_response(r#"{"id":1,"error":"boom"}"#, 1, &req, &timings, "ext"),
            Err(ForecastError::Remote(m)) if m == "boom"
        ));
        assert!(matches!(
            decode_response("not json", 1, &req, &timings, "ext"),
            Err(ForecastError::ProtocolViolation(_))
        ));
    }
}
