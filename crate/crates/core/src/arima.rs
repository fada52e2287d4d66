//! ARIMA(p, d, q) fitting, AICc order selection and stochastic path
//! simulation.
//!
//! The ARMA part is estimated by exact Gaussian maximum likelihood on the
//! `d`-times differenced, mean-adjusted series. The likelihood comes from a
//! Kalman filter on the Harvey state-space form with the innovation variance
//! concentrated out, and is maximized with Nelder–Mead. AR and MA
//! coefficients are optimized through the partial-autocorrelation transform,
//! so every candidate is stationary and invertible.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::TraceTiming;
use crate::num::Real;
use crate::optim::{nelder_mead, NelderMeadConfig};
use crate::rng::{stream, substream};
use crate::types::{SpeedTrace, TypeError, TRACE_LEN};

pub const MAX_P: usize = 3;
pub const MAX_D: usize = 1;
pub const MAX_Q: usize = 3;
/// AICc values closer than this are treated as tied.
pub const AICC_TIE_TOL: f64 = 1e-9;
/// Order selection skips fits with an AR or MA root of modulus below this.
pub const ROOT_MARGIN: f64 = 1.01;

/// Largest partial autocorrelation magnitude reachable by the transform.
const PACF_BOUND: f64 = 1.0 - 1e-7;
/// Relative change in the state covariance below which the filter gain is frozen.
const STEADY_STATE_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ArimaError {
    #[error("order ({p},{d},{q}) outside the search grid")]
    InvalidOrder { p: usize, d: usize, q: usize },
    #[error("series of length {n} too short, need more than {required}")]
    TooShort { n: usize, required: usize },
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("series has zero variance after differencing")]
    SingularSeries,
    #[error("optimizer did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("sample size {n} too small for {k} parameters")]
    DegenerateSampleSize { n: usize, k: usize },
    #[error("no order in the grid could be fitted")]
    AllFitsFailed,
    #[error("fitted polynomial has a root inside radius {ROOT_MARGIN}")]
    BoundaryFit,
    #[error("path length {got} is not {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Result<Self, ArimaError> {
        if p > MAX_P || d > MAX_D || q > MAX_Q {
            return Err(ArimaError::InvalidOrder { p, d, q });
        }
        Ok(Self { p, d, q })
    }

    /// All 32 orders with `p, q` in `0..=3` and `d` in `0..=1`.
    pub fn grid() -> Vec<ArimaOrder> {
        let mut v = Vec::with_capacity(32);
        for d in 0..=MAX_D {
            for p in 0..=MAX_P {
                for q in 0..=MAX_Q {
                    v.push(ArimaOrder { p, d, q });
                }
            }
        }
        v
    }

    /// Number of estimated parameters: coefficients, intercept and variance.
    pub fn n_params(&self) -> usize {
        self.p + self.q + 2
    }

    /// Tie-break key: total order, then `d`, then `p`.
    fn rank(&self) -> (usize, usize, usize) {
        (self.p + self.q + self.d, self.d, self.p)
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

/// Recursion state at the end of the training series.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalState<T> {
    /// Last observed level; used to integrate when `d == 1`.
    pub last_level: T,
    /// Last `p` mean-adjusted differenced values, most recent first.
    pub recent_values: Vec<T>,
    /// Last `q` innovations, most recent first.
    pub recent_innovations: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaModel<T> {
    pub order: ArimaOrder,
    pub ar: Vec<T>,
    pub ma: Vec<T>,
    /// Mean of the differenced series.
    pub intercept: T,
    pub sigma2: T,
    pub loglik: T,
    /// Observations entering the likelihood (after differencing).
    pub n_obs: usize,
    pub terminal: TerminalState<T>,
    /// One-step-ahead prediction errors on the training series.
    pub innovations: Vec<T>,
    pub iterations: usize,
}

/// Audit dump of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub order: ArimaOrder,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
    pub loglik: f64,
    pub n_obs: usize,
}

impl<T: Real> ArimaModel<T> {
    pub fn aicc(&self) -> T {
        aicc(self.loglik, self.order.n_params(), self.n_obs).unwrap_or_else(|_| T::infinity())
    }

    pub fn dump(&self) -> ModelDump {
        ModelDump {
            order: self.order,
            ar: self.ar.iter().map(|v| v.to_f64_lossy()).collect(),
            ma: self.ma.iter().map(|v| v.to_f64_lossy()).collect(),
            intercept: self.intercept.to_f64_lossy(),
            sigma2: self.sigma2.to_f64_lossy(),
            loglik: self.loglik.to_f64_lossy(),
            n_obs: self.n_obs,
        }
    }

    /// Continues the recursion with the given future innovations.
    fn propagate(&self, shocks: impl Iterator<Item = T>) -> Vec<T> {
        let mut values = self.terminal.recent_values.clone();
        let mut eps = self.terminal.recent_innovations.clone();
        let mut level = self.terminal.last_level;
        let mut out = Vec::new();
        for e in shocks {
            let mut y = e;
            for (phi, v) in self.ar.iter().zip(&values) {
                y += *phi * *v;
            }
            for (theta, past) in self.ma.iter().zip(&eps) {
                y += *theta * *past;
            }
            if !values.is_empty() {
                values.rotate_right(1);
                values[0] = y;
            }
            if !eps.is_empty() {
                eps.rotate_right(1);
                eps[0] = e;
            }
            let w = y + self.intercept;
            if self.order.d == 1 {
                level += w;
                out.push(level);
            } else {
                out.push(w);
            }
        }
        out
    }

    /// Zero-innovation forecast of `h` steps.
    pub fn point_forecast(&self, h: usize) -> Vec<T> {
        self.propagate(std::iter::repeat_n(T::zero(), h))
    }

    /// `m` independent paths of length `h`. Path `i` draws its innovations
    /// from substream `(seed, SIMULATION, i)`.
    pub fn simulate_paths(&self, h: usize, m: usize, seed: u64) -> Vec<Vec<T>> {
        let sd = self.sigma2.sqrt();
        (0..m)
            .map(|i| {
                let mut rng = substream(seed, &[stream::SIMULATION, i as u64]);
                let shocks = (0..h).map(move |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * T::lit(z)
                });
                self.propagate(shocks)
            })
            .collect()
    }
}

/// Free-function form of [`ArimaModel::simulate_paths`].
pub fn simulate_paths<T: Real>(
    model: &ArimaModel<T>,
    h: usize,
    m: usize,
    seed: u64,
) -> Vec<Vec<T>> {
    model.simulate_paths(h, m, seed)
}

/// `-2 loglik + 2k + 2k(k+1)/(n-k-1)`.
pub fn aicc<T: Real>(loglik: T, k: usize, n: usize) -> Result<T, ArimaError> {
    if n <= k + 1 {
        return Err(ArimaError::DegenerateSampleSize { n, k });
    }
    let kf = T::from_usize_lossy(k);
    let two = T::lit(2.0);
    Ok(-two * loglik + two * kf + two * kf * (kf + T::one()) / T::from_usize_lossy(n - k - 1))
}

// ---------------------------------------------------------------------------
// Differencing
// ---------------------------------------------------------------------------

pub fn difference<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut v = x.to_vec();
    for _ in 0..d {
        v = v.windows(2).map(|w| w[1] - w[0]).collect();
    }
    v
}

/// Inverse of a single difference given the value preceding the first step.
pub fn integrate<T: Real>(diffs: &[T], initial: T) -> Vec<T> {
    let mut out = Vec::with_capacity(diffs.len() + 1);
    out.push(initial);
    let mut level = initial;
    for d in diffs {
        level += *d;
        out.push(level);
    }
    out
}

// ---------------------------------------------------------------------------
// Partial autocorrelation parameterization
// ---------------------------------------------------------------------------

/// Partial autocorrelations in (-1, 1) to stationary AR coefficients
/// (Durbin–Levinson).
pub fn pacf_to_ar<T: Real>(pacf: &[T]) -> Vec<T> {
    let mut a: Vec<T> = Vec::with_capacity(pacf.len());
    for (k, &r) in pacf.iter().enumerate() {
        let prev = a.clone();
        for j in 0..k {
            a[j] = prev[j] - r * prev[k - 1 - j];
        }
        a.push(r);
    }
    a
}

/// Inverse of [`pacf_to_ar`]; `None` when the coefficients are not stationary.
pub fn ar_to_pacf<T: Real>(ar: &[T]) -> Option<Vec<T>> {
    let mut a = ar.to_vec();
    let mut pacf = vec![T::zero(); ar.len()];
    for k in (0..ar.len()).rev() {
        let r = a[k];
        if r.abs() >= T::one() {
            return None;
        }
        pacf[k] = r;
        let denom = T::one() - r * r;
        let prev = a.clone();
        for j in 0..k {
            a[j] = (prev[j] + r * prev[k - 1 - j]) / denom;
        }
        a.truncate(k);
    }
    Some(pacf)
}

fn unconstrained_to_pacf<T: Real>(x: T) -> T {
    let b = T::lit(PACF_BOUND);
    x.tanh().max(-b).min(b)
}

/// Maps unconstrained optimizer coordinates to `(ar, ma)` coefficients.
fn transform<T: Real>(x: &[T], p: usize, q: usize) -> (Vec<T>, Vec<T>) {
    let ar_pacf: Vec<T> = x[..p].iter().map(|v| unconstrained_to_pacf(*v)).collect();
    let ma_pacf: Vec<T> = x[p..p + q]
        .iter()
        .map(|v| unconstrained_to_pacf(*v))
        .collect();
    let ar = pacf_to_ar(&ar_pacf);
    // 1 + sum theta_j z^j invertible  <=>  theta = -a for a stationary AR vector a
    let ma = pacf_to_ar(&ma_pacf).into_iter().map(|v| -v).collect();
    (ar, ma)
}

// ---------------------------------------------------------------------------
// State space and Kalman filter
// ---------------------------------------------------------------------------

struct StateSpace<T> {
    r: usize,
    /// Row-major r x r transition.
    t: Vec<T>,
    /// First column of the transition, zero-padded to length r.
    phi: Vec<T>,
    /// Row-major r x r state noise covariance R R'.
    rrt: Vec<T>,
}

impl<T: Real> StateSpace<T> {
    fn new(ar: &[T], ma: &[T]) -> Self {
        let r = ar.len().max(ma.len() + 1);
        let mut t = vec![T::zero(); r * r];
        for (i, phi) in ar.iter().enumerate() {
            t[i * r] = *phi;
        }
        for i in 0..r - 1 {
            t[i * r + i + 1] = T::one();
        }
        let mut rv = vec![T::zero(); r];
        rv[0] = T::one();
        for (j, theta) in ma.iter().enumerate() {
            rv[j + 1] = *theta;
        }
        let mut rrt = vec![T::zero(); r * r];
        for i in 0..r {
            for j in 0..r {
                rrt[i * r + j] = rv[i] * rv[j];
            }
        }
        let mut phi = vec![T::zero(); r];
        phi[..ar.len()].copy_from_slice(ar);
        Self { r, t, phi, rrt }
    }

    /// Stationary state covariance: solves `P = T P T' + R R'`.
    fn initial_covariance(&self) -> Option<Vec<T>> {
        let r = self.r;
        let n = r * r;
        let mut a = vec![T::zero(); n * n];
        for i in 0..r {
            for j in 0..r {
                let row = i * r + j;
                for k in 0..r {
                    for l in 0..r {
                        let col = k * r + l;
                        a[row * n + col] = -(self.t[i * r + k] * self.t[j * r + l]);
                    }
                }
                a[row * n + row] += T::one();
            }
        }
        let p = solve_linear(a, self.rrt.clone(), n)?;
        if p.iter().any(|v| !v.is_finite()) || p[0] <= T::zero() {
            return None;
        }
        Some(p)
    }
}

/// Gaussian elimination with partial pivoting on a row-major `n x n` system.
fn solve_linear<T: Real>(mut a: Vec<T>, mut b: Vec<T>, n: usize) -> Option<Vec<T>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            a[x * n + col]
                .abs()
                .partial_cmp(&a[y * n + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot * n + col].abs() <= T::epsilon() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / d;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= factor * v;
            }
            let bv = b[col];
            b[row] -= factor * bv;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

struct FilterOutput<T> {
    sum_log_f: T,
    sum_v2_over_f: T,
    innovations: Vec<T>,
}

/// Kalman filter with unit innovation variance. The transition is a
/// companion matrix, `(T x)_i = phi_i x_0 + x_{i+1}`, which keeps every step
/// at O(r^2); once the covariance settles the gain is frozen.
fn kalman_filter<T: Real>(
    ss: &StateSpace<T>,
    y: &[T],
    keep_innovations: bool,
) -> Option<FilterOutput<T>> {
    let r = ss.r;
    let phi = &ss.phi;
    let mut p = ss.initial_covariance()?;
    let mut a = vec![T::zero(); r];
    let mut tp = vec![T::zero(); r * r];
    let mut k = vec![T::zero(); r];
    let mut steady = false;
    let mut f = T::one();

    let mut sum_log_f = T::zero();
    let mut sum_v2 = T::zero();
    let mut innovations = if keep_innovations {
        Vec::with_capacity(y.len())
    } else {
        Vec::new()
    };
    let tol = T::lit(STEADY_STATE_TOL);

    for &obs in y {
        let v = obs - a[0];
        if !steady {
            f = p[0];
            if !(f > T::zero()) || !f.is_finite() {
                return None;
            }
            // tp = T P
            for i in 0..r {
                for j in 0..r {
                    let below = if i + 1 < r {
                        p[(i + 1) * r + j]
                    } else {
                        T::zero()
                    };
                    tp[i * r + j] = phi[i] * p[j] + below;
                }
            }
            for i in 0..r {
                k[i] = tp[i * r] / f;
            }
            // P <- T P T' + R R' - f K K'
            let mut change = T::zero();
            for i in 0..r {
                for j in 0..r {
                    let right = if j + 1 < r {
                        tp[i * r + j + 1]
                    } else {
                        T::zero()
                    };
                    let val = phi[j] * tp[i * r] + right + ss.rrt[i * r + j] - f * k[i] * k[j];
                    change = change.max((val - p[i * r + j]).abs());
                    p[i * r + j] = val;
                }
            }
            if change <= tol * f {
                steady = true;
            }
        }
        sum_log_f += f.ln();
        sum_v2 += v * v / f;
        if keep_innovations {
            innovations.push(v);
        }
        let a0 = a[0];
        for i in 0..r {
            let next = if i + 1 < r { a[i + 1] } else { T::zero() };
            a[i] = phi[i] * a0 + next + k[i] * v;
        }
    }
    Some(FilterOutput {
        sum_log_f,
        sum_v2_over_f: sum_v2,
        innovations,
    })
}

/// Exact Gaussian log-likelihood with the variance concentrated out.
/// Returns `(loglik, sigma2)`.
fn concentrated_loglik<T: Real>(out: &FilterOutput<T>, n: usize) -> Option<(T, T)> {
    let nf = T::from_usize_lossy(n);
    let sigma2 = out.sum_v2_over_f / nf;
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return None;
    }
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    let half = T::lit(0.5);
    let ll = -half * nf * (two_pi.ln() + sigma2.ln() + T::one()) - half * out.sum_log_f;
    Some((ll, sigma2))
}

// ---------------------------------------------------------------------------
// Fitting and order selection
// ---------------------------------------------------------------------------

/// Minimum series length for `order`: more than `10 + p + q + d`.
pub fn required_length(order: ArimaOrder) -> usize {
    10 + order.p + order.q + order.d
}

/// Fits `order` to `series` by exact maximum likelihood.
pub fn fit<T: Real>(series: &[T], order: ArimaOrder) -> Result<ArimaModel<T>, ArimaError> {
    fit_with(series, order, &NelderMeadConfig::default())
}

pub fn fit_with<T: Real>(
    series: &[T],
    order: ArimaOrder,
    optim: &NelderMeadConfig<T>,
) -> Result<ArimaModel<T>, ArimaError> {
    let order = ArimaOrder::new(order.p, order.d, order.q)?;
    let required = required_length(order);
    if series.len() <= required {
        return Err(ArimaError::TooShort {
            n: series.len(),
            required,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ArimaError::NonFinite);
    }
    let w = difference(series, order.d);
    let n = w.len();
    let nf = T::from_usize_lossy(n);
    let mean = w.iter().cloned().sum::<T>() / nf;
    let y: Vec<T> = w.iter().map(|v| *v - mean).collect();
    let var = y.iter().map(|v| *v * *v).sum::<T>() / nf;
    let scale = w
        .iter()
        .fold(T::zero(), |m, v| m.max(v.abs()))
        .max(T::min_positive_value());
    if var <= (T::lit(100.0) * T::epsilon() * scale).powi(2) {
        return Err(ArimaError::SingularSeries);
    }

    let (p, q) = (order.p, order.q);
    let objective = |x: &[T]| -> T {
        let (ar, ma) = transform(x, p, q);
        let ss = StateSpace::new(&ar, &ma);
        kalman_filter(&ss, &y, false)
            .and_then(|out| concentrated_loglik(&out, n))
            .map(|(ll, _)| -ll)
            .unwrap_or_else(T::infinity)
    };
    let x0 = vec![T::zero(); p + q];
    let min = nelder_mead(objective, &x0, optim);
    if !min.converged {
        return Err(ArimaError::NonConvergence {
            iterations: min.iterations,
        });
    }
    let (ar, ma) = transform(&min.x, p, q);
    let ss = StateSpace::new(&ar, &ma);
    let out = kalman_filter(&ss, &y, true).ok_or(ArimaError::NonConvergence {
        iterations: min.iterations,
    })?;
    let (loglik, sigma2) = concentrated_loglik(&out, n).ok_or(ArimaError::SingularSeries)?;
    let recent_innovations = out.innovations.iter().rev().take(q).cloned().collect();
    let recent_values = y.iter().rev().take(p).cloned().collect();
    let last_level = *series.last().expect("non-empty series");
    Ok(ArimaModel {
        order,
        ar,
        ma,
        intercept: mean,
        sigma2,
        loglik,
        n_obs: n,
        terminal: TerminalState {
            last_level,
            recent_values,
            recent_innovations,
        },
        innovations: out.innovations,
        iterations: min.iterations,
    })
}

/// Picks the minimum-AICc order; near-ties prefer the lower total order,
/// then the smaller `d`, then the smaller `p`.
pub fn select_from_scores<T: Real>(scores: &[(ArimaOrder, T)]) -> Option<ArimaOrder> {
    let finite: Vec<&(ArimaOrder, T)> = scores.iter().filter(|(_, s)| s.is_finite()).collect();
    let best = finite.iter().map(|(_, s)| *s).fold(T::infinity(), T::min);
    if !best.is_finite() {
        return None;
    }
    let tol = T::lit(AICC_TIE_TOL);
    finite
        .into_iter()
        .filter(|(_, s)| *s - best < tol)
        .map(|(o, _)| *o)
        .min_by_key(|o| o.rank())
}

#[derive(Debug, Clone)]
pub struct Selection<T> {
    pub order: ArimaOrder,
    pub model: ArimaModel<T>,
    /// Every grid order with its AICc, or the fitting error.
    pub candidates: Vec<(ArimaOrder, Result<T, ArimaError>)>,
}

/// True when every root of `1 - sum a_i z^i` has modulus above `radius`.
pub fn roots_outside<T: Real>(a: &[T], radius: T) -> bool {
    let mut scale = T::one();
    let scaled: Vec<T> = a
        .iter()
        .map(|v| {
            scale *= radius;
            *v * scale
        })
        .collect();
    ar_to_pacf(&scaled).is_some()
}

impl<T: Real> ArimaModel<T> {
    /// AR and MA roots all lie outside [`ROOT_MARGIN`].
    pub fn clear_of_boundary(&self) -> bool {
        let margin = T::lit(ROOT_MARGIN);
        let neg_ma: Vec<T> = self.ma.iter().map(|v| -*v).collect();
        roots_outside(&self.ar, margin) && roots_outside(&neg_ma, margin)
    }
}

/// Fits the full grid and returns the minimum-AICc model. Fits that fail or
/// land near the stationarity/invertibility boundary are skipped.
pub fn select_order<T: Real>(series: &[T]) -> Result<Selection<T>, ArimaError> {
    select_order_in(series, &ArimaOrder::grid())
}

pub fn select_order_in<T: Real>(
    series: &[T],
    grid: &[ArimaOrder],
) -> Result<Selection<T>, ArimaError> {
    let fits: Vec<(ArimaOrder, Result<ArimaModel<T>, ArimaError>)> = grid
        .par_iter()
        .map(|o| {
            let r = fit(series, *o).and_then(|m| {
                if m.clear_of_boundary() {
                    Ok(m)
                } else {
                    Err(ArimaError::BoundaryFit)
                }
            });
            (*o, r)
        })
        .collect();
    if let Some((_, Err(e @ (ArimaError::NonFinite | ArimaError::SingularSeries)))) =
        fits.iter().find(|(o, _)| o.d == 0)
    {
        return Err(e.clone());
    }
    let scores: Vec<(ArimaOrder, T)> = fits
        .iter()
        .filter_map(|(o, r)| r.as_ref().ok().map(|m| (*o, m.aicc())))
        .collect();
    let order = select_from_scores(&scores).ok_or(ArimaError::AllFitsFailed)?;
    let mut candidates = Vec::with_capacity(fits.len());
    let mut chosen = None;
    for (o, r) in fits {
        match r {
            Ok(m) => {
                candidates.push((o, Ok(m.aicc())));
                if o == order {
                    chosen = Some(m);
                }
            }
            Err(e) => candidates.push((o, Err(e))),
        }
    }
    Ok(Selection {
        order,
        model: chosen.expect("selected order was fitted"),
        candidates,
    })
}

/// Splits a simulated path of `64 * k` samples into `k` consecutive traces,
/// clamping negative speeds to zero.
pub fn paths_to_trials(
    path: &[f64],
    k: usize,
    timings: &[TraceTiming],
    model_id: &str,
) -> Result<Vec<SpeedTrace>, ArimaError> {
    if path.len() != TRACE_LEN * k {
        return Err(ArimaError::LengthMismatch {
            expected: TRACE_LEN * k,
            got: path.len(),
        });
    }
    if timings.len() != k {
        return Err(ArimaError::LengthMismatch {
            expected: k,
            got: timings.len(),
        });
    }
    path.chunks(TRACE_LEN)
        .zip(timings)
        .map(|(seg, t)| {
            SpeedTrace::from_forecast(seg.to_vec(), t.duration_ms, t.target_on_offset_ms, model_id)
                .map_err(ArimaError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn aicc_formula() {
        assert_eq!(aicc(0.0, 1, 10).unwrap(), 2.5);
        assert_eq!(
            aicc(0.0f64, 1, 2),
            Err(ArimaError::DegenerateSampleSize { n: 2, k: 1 })
        );
        // correction vanishes for large n
        let big: f64 = aicc(-100.0, 4, 10_000_000).unwrap();
        assert!((big - (200.0 + 8.0)).abs() < 1e-4);
    }

    #[test]
    fn grid_has_32_orders() {
        let g = ArimaOrder::grid();
        assert_eq!(g.len(), 32);
        assert!(ArimaOrder::new(4, 0, 0).is_err());
        assert!(ArimaOrder::new(0, 2, 0).is_err());
    }

    #[test]
    fn tie_break_prefers_lower_order() {
        let a = ArimaOrder::new(1, 0, 0).unwrap();
        let b = ArimaOrder::new(2, 0, 1).unwrap();
        assert_eq!(
            select_from_scores(&[(b, 100.0), (a, 100.0 + 5e-10)]),
            Some(a)
        );
        assert_eq!(select_from_scores(&[(b, 99.0), (a, 100.0)]), Some(b));
        let d1 = ArimaOrder::new(0, 1, 1).unwrap();
        let d0 = ArimaOrder::new(1, 0, 1).unwrap();
        assert_eq!(select_from_scores(&[(d1, 5.0), (d0, 5.0)]), Some(d0));
        assert_eq!(select_from_scores::<f64>(&[(a, f64::INFINITY)]), None);
    }

    #[test]
    fn pacf_roundtrip_and_stationarity() {
        let pacf = [0.5, -0.3, 0.8];
        let ar = pacf_to_ar(&pacf);
        let back = ar_to_pacf(&ar).unwrap();
        for (a, b) in pacf.iter().zip(&back) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        assert_eq!(pacf_to_ar(&[0.7]), vec![0.7]);
        assert!(ar_to_pacf(&[1.2]).is_none());
    }

    #[test]
    fn boundary_margin() {
        assert!(roots_outside(&[0.5], 1.01));
        assert!(!roots_outside(&[0.995], 1.01));
        assert!(roots_outside(&[0.995], 1.0));
        // (1 - 0.5z)(1 + 0.9z): roots 2 and -1/0.9
        assert!(roots_outside(&[-0.4, 0.45], 1.01));
        assert!(!roots_outside(&[-0.4, 0.45], 1.2));
    }

    #[test]
    fn differencing_roundtrip() {
        let x = [1.0, 3.5, 2.0, 7.25, 7.0];
        let d = difference(&x, 1);
        assert_eq!(integrate(&d, x[0]), x.to_vec());
        assert_eq!(difference(&x, 0), x.to_vec());
    }

    proptest! {
        #[test]
        fn integrate_inverts_difference(x in proptest::collection::vec(-100i32..100, 1..50)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let d = difference(&x, 1);
            prop_assert_eq!(integrate(&d, x[0]), x);
        }

        #[test]
        fn transformed_coefficients_are_stationary(x in proptest::collection::vec(-5.0f64..5.0, 1..4)) {
            let (ar, _) = transform(&x, x.len(), 0);
            let ss = StateSpace::new(&ar, &[]);
            prop_assert!(ss.initial_covariance().is_some());
            prop_assert!(ar_to_pacf(&ar).is_some());
        }
    }

    #[test]
    fn lyapunov_matches_ar1_variance() {
        let ss = StateSpace::new(&[0.6], &[]);
        let p = ss.initial_covariance().unwrap();
        assert_relative_eq!(p[0], 1.0 / (1.0 - 0.36), epsilon = 1e-12);
        // MA(1): state dim 2, var(y) = 1 + theta^2
        let ss = StateSpace::new(&[], &[0.4]);
        let p = ss.initial_covariance().unwrap();
        assert_relative_eq!(p[0], 1.16, epsilon = 1e-12);
    }

    #[test]
    fn white_noise_loglik_matches_closed_form() {
        let x = white_noise(512, 11);
        let m = fit(&x, ArimaOrder::new(0, 0, 0).unwrap()).unwrap();
        let n = 512.0;
        let mean = x.iter().sum::<f64>() / n;
        let s2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let closed = -n / 2.0 * ((2.0 * std::f64::consts::PI).ln() + s2.ln() + 1.0);
        assert_relative_eq!(m.loglik, closed, max_relative = 1e-6);
        assert!((m.sigma2 - 1.0).abs() < 0.2);
    }

    #[test]
    fn constant_series_is_singular() {
        let x = vec![1.3; 100];
        for o in [(0, 0, 0), (1, 0, 1), (0, 1, 0)] {
            let order = ArimaOrder::new(o.0, o.1, o.2).unwrap();
            assert_eq!(fit(&x, order).unwrap_err(), ArimaError::SingularSeries);
        }
        let ramp: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        assert_eq!(
            fit(&ramp, ArimaOrder::new(0, 1, 0).unwrap()).unwrap_err(),
            ArimaError::SingularSeries
        );
    }

    #[test]
    fn too_short_series() {
        let x = white_noise(12, 1);
        assert!(matches!(
            fit(&x, ArimaOrder::new(1, 0, 1).unwrap()),
            Err(ArimaError::TooShort { .. })
        ));
    }

    #[test]
    fn ar1_recovered_in_f32_too() {
        let e = white_noise(800, 3);
        let mut x = vec![0.0f64; 800];
        for t in 1..800 {
            x[t] = 0.5 * x[t - 1] + e[t];
        }
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let cfg = NelderMeadConfig::<f32> {
            xtol: 1e-4,
            ftol: 1e-3,
            ..NelderMeadConfig::default()
        };
        let m = fit_with(&xf, ArimaOrder::new(1, 0, 0).unwrap(), &cfg).unwrap();
        assert!((m.ar[0] - 0.5).abs() < 0.1, "{:?}", m.ar);
    }

    #[test]
    fn point_forecast_of_ar1_decays_to_mean() {
        let e = white_noise(512, 5);
        let mut x = vec![10.0f64; 512];
        for t in 1..512 {
            x[t] = 10.0 + 0.7 * (x[t - 1] - 10.0) + e[t];
        }
        let m = fit(&x, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        let f = m.point_forecast(200);
        assert_relative_eq!(f[199], m.intercept, epsilon = 1e-6);
        let y_last = x[511] - m.intercept;
        assert_relative_eq!(f[0], m.intercept + m.ar[0] * y_last, epsilon = 1e-12);
    }

    #[test]
    fn paths_split_into_trials() {
        let path: Vec<f64> = (0..192).map(|i| i as f64 - 70.0).collect();
        let timing = TraceTiming {
            duration_ms: 1000.0,
            target_on_offset_ms: 200.0,
        };
        let trials = paths_to_trials(&path, 3, &[timing; 3], "arima").unwrap();
        assert_eq!(trials.len(), 3);
        let expect: Vec<f64> = path[64..128].iter().map(|v| v.max(0.0)).collect();
        assert_eq!(trials[1].samples(), expect.as_slice());
        assert_eq!(trials[0].samples()[0], 0.0);
        assert!(paths_to_trials(&[], 0, &[], "arima").unwrap().is_empty());
        assert_eq!(
            paths_to_trials(&vec![0.0; 100], 2, &[timing; 2], "arima"),
            Err(ArimaError::LengthMismatch {
                expected: 128,
                got: 100
            })
        );
    }
}
