//! Small descriptive-statistics helpers.
//!
//! Aggregates sort their input first so results do not depend on the order
//! in which values were collected.

use std::cmp::Ordering;

use crate::num::Real;
use crate::types::Aggregation;

fn cmp<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

pub fn sorted<T: Real>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(cmp);
    v
}

/// Arithmetic mean over the sorted values; `None` when empty.
pub fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let s: T = sorted(values).into_iter().sum();
    Some(s / T::from_usize_lossy(values.len()))
}

pub fn median<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let v = sorted(values);
    let n = v.len();
    if n % 2 == 1 {
        Some(v[n / 2])
    } else {
        Some((v[n / 2 - 1] + v[n / 2]) / T::lit(2.0))
    }
}

pub fn aggregate<T: Real>(values: &[T], agg: Aggregation) -> Option<T> {
    match agg {
        Aggregation::Mean => mean(values),
        Aggregation::Median => median(values),
    }
}

/// Mean and sample standard deviation (n - 1 denominator).
///
/// Identical inputs give exactly that value and a standard deviation of 0;
/// a single value has standard deviation 0.
pub fn mean_sd<T: Real>(values: &[T]) -> Option<(T, T)> {
    let first = *values.first()?;
    if values.iter().all(|v| *v == first) {
        return Some((first, T::zero()));
    }
    let m = mean(values)?;
    let n = values.len();
    let ss: T = values.iter().map(|v| (*v - m) * (*v - m)).sum();
    Some((m, (ss / T::from_usize_lossy(n - 1)).sqrt()))
}

/// Percentile of already sorted data by linear interpolation between order
/// statistics: position `p * (n - 1)`.
pub fn percentile_sorted<T: Real>(sorted: &[T], p: T) -> Option<T> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = p * T::from_usize_lossy(n - 1);
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(n - 1);
    if i + 1 >= n {
        return Some(sorted[n - 1]);
    }
    let frac = h - lo;
    if frac == T::zero() {
        return Some(sorted[i]);
    }
    Some(sorted[i] + frac * (sorted[i + 1] - sorted[i]))
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn ranks<T: Real>(values: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| cmp(&values[a], &values[b]));
    let mut out = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = T::from_usize_lossy(i + j + 2) / T::lit(2.0);
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `None` when fewer than two points or a
/// constant input.
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let mx = mean(&rx)?;
    let my = mean(&ry)?;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (*a - mx) * (*b - my);
        sxx += (*a - mx) * (*a - mx);
        syy += (*b - my) * (*b - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[200.0, 300.0, 400.0]), Some(300.0));
        assert_eq!(median(&[200.0, 300.0, 400.0, 1000.0]), Some(350.0));
        assert_eq!(mean(&[200.0, 300.0, 400.0, 1000.0]), Some(475.0));
        assert_eq!(median::<f64>(&[]), None);
        assert_eq!(mean(&[2.0f32, 4.0]), Some(3.0f32));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 0.0), Some(1.0));
        assert_eq!(percentile_sorted(&v, 1.0), Some(5.0));
        assert_eq!(percentile_sorted(&v, 0.5), Some(3.0));
        assert_eq!(percentile_sorted(&v, 0.025), Some(1.1));
        assert_eq!(percentile_sorted(&[7.0], 0.975), Some(7.0));
    }

    #[test]
    fn sd_of_constant_is_exact_zero() {
        let v = [0.1 + 0.2; 7];
        assert_eq!(mean_sd(&v), Some((0.1 + 0.2, 0.0)));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn spearman_basic() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn aggregates_are_permutation_invariant(mut v in proptest::collection::vec(-1e3f64..1e3, 1..40), seed in any::<u64>()) {
            let m0 = mean(&v).unwrap();
            let d0 = median(&v).unwrap();
            // deterministic shuffle
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(mean(&v).unwrap(), m0);
            prop_assert_eq!(median(&v).unwrap(), d0);
        }
    }
}
