//! Small statistics toolkit for Monte Carlo diagnostics.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Welch's unequal-variance t statistic for `mean(b) - mean(a)`.
#[derive(Debug, Clone, Copy)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for the alternative `mean(b) > mean(a)`.
    pub p_greater: f64,
}

pub fn welch(a: &[f64], b: &[f64]) -> WelchTest {
    let va = variance(a) / a.len() as f64;
    let vb = variance(b) / b.len() as f64;
    let se2 = va + vb;
    let diff = mean(b) - mean(a);
    if se2 == 0.0 {
        let p = if diff > 0.0 { 0.0 } else { 1.0 };
        return WelchTest {
            t: if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY },
            df: f64::INFINITY,
            p_greater: p,
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2
        / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid Student t parameters");
    WelchTest {
        t,
        df,
        p_greater: 1.0 - dist.cdf(t),
    }
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Percentile of an already sorted slice (linear interpolation).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Bootstrap resample of indices `0..n`.
pub fn resample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}
