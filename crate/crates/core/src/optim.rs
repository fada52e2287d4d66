//! Nelder–Mead simplex minimizer.

use crate::num::Real;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadConfig<T> {
    pub max_iter: usize,
    /// Convergence bound on the simplex spread in parameter space.
    pub xtol: T,
    /// Convergence bound on the spread of objective values.
    pub ftol: T,
    /// Edge length of the initial simplex.
    pub initial_step: T,
    /// Restarts from the best vertex when a run stops without converging.
    pub restarts: usize,
}

impl<T: Real> Default for NelderMeadConfig<T> {
    fn default() -> Self {
        Self {
            max_iter: 500,
            xtol: T::lit(1e-8),
            ftol: T::lit(1e-8),
            initial_step: T::lit(0.25),
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

fn sanitize<T: Real>(v: T) -> T {
    if v.is_nan() {
        T::infinity()
    } else {
        v
    }
}

fn run<T: Real, F: FnMut(&[T]) -> T>(f: &mut F, x0: &[T], cfg: &NelderMeadConfig<T>) -> Minimum<T> {
    let n = x0.len();
    let half = T::lit(0.5);
    let two = T::lit(2.0);

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += cfg.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|v| sanitize(f(v))).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        // order vertices by value; ties keep index order for determinism
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (*a - *b).abs()))
            .fold(T::zero(), T::max);
        let f_spread = values[1..]
            .iter()
            .map(|v| (*v - values[0]).abs())
            .fold(T::zero(), T::max);
        if x_spread <= cfg.xtol && f_spread <= cfg.ftol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![T::zero(); n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += *x;
            }
        }
        let nf = T::from_usize_lossy(n);
        for c in centroid.iter_mut() {
            *c /= nf;
        }
        let worst = simplex[n].clone();
        let along = |t: T| -> Vec<T> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| *c + t * (*w - *c))
                .collect()
        };

        let xr = along(-T::one());
        let fr = sanitize(f(&xr));
        if fr < values[0] {
            let xe = along(-two);
            let fe = sanitize(f(&xe));
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-half);
            let fc = sanitize(f(&xc));
            (xc, fc)
        } else {
            let xc = along(half);
            let fc = sanitize(f(&xc));
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&best) {
                *x = *b + half * (*x - *b);
            }
            values[i] = sanitize(f(&simplex[i]));
        }
    }

    let (best, _) =
        values.iter().enumerate().fold(
            (0, values[0]),
            |(bi, bv), (i, v)| if *v < bv { (i, *v) } else { (bi, bv) },
        );
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

/// Minimizes `f` from `x0`. A run that hits `max_iter` restarts from its best
/// vertex up to `cfg.restarts` times.
pub fn nelder_mead<T: Real, F: FnMut(&[T]) -> T>(
    mut f: F,
    x0: &[T],
    cfg: &NelderMeadConfig<T>,
) -> Minimum<T> {
    if x0.is_empty() {
        let value = sanitize(f(x0));
        return Minimum {
            x: Vec::new(),
            value,
            iterations: 0,
            converged: true,
        };
    }
    let mut result = run(&mut f, x0, cfg);
    let mut total = result.iterations;
    for _ in 0..cfg.restarts {
        if result.converged {
            break;
        }
        let next = run(&mut f, &result.x.clone(), cfg);
        total += next.iterations;
        if next.value <= result.value || next.converged {
            result = next;
        }
    }
    result.iterations = total;
    result
}
