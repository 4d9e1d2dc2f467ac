//! Empirical probability measures on ℝ^d and the Wasserstein-2 distance.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};

/// Default size limit for [`w2_exact`].
pub const EXACT_CAP: usize = 512;

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted point cloud with cached mean and second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
    mean: Vec<f64>,
    second_moment: f64,
}

impl EmpiricalMeasure {
    /// Uniform cloud from row-major coordinates (`len = N·dim`).
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        Self::build(dim, points, None)
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, not 1")));
        }
        Self::build(dim, points, Some(weights))
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: p.len() });
        }
        Self::uniform(dim, points.concat())
    }

    /// Unit mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self::uniform(x.len(), x.to_vec()).expect("single point cloud is valid")
    }

    /// `δ₀` on ℝ^dim.
    pub fn origin(dim: usize) -> Self {
        Self::dirac(&vec![0.0; dim])
    }

    fn build(dim: usize, points: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coordinates do not form a nonempty cloud in dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: w.len() });
            }
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("cloud contains non-finite coordinates".into()));
        }
        let mut mean = vec![0.0; dim];
        let mut second_moment = 0.0;
        for (i, p) in points.chunks(dim).enumerate() {
            let w = weights.as_ref().map_or(1.0 / n as f64, |w| w[i]);
            for (m, x) in mean.iter_mut().zip(p) {
                *m += w * x;
            }
            second_moment += w * p.iter().map(|x| x * x).sum::<f64>();
        }
        Ok(Self {
            dim,
            points,
            weights,
            mean,
            second_moment,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0 / self.len() as f64, |w| w[i])
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `Σ w_i ‖x_i‖² = 𝒲₂(μ, δ₀)²`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Translate every point by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let points = self
            .points
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(|(a, b)| a + b))
            .collect();
        Self::build(self.dim, points, self.weights.clone()).expect("translation keeps validity")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared-distance cost matrix, row-major, assembled row-parallel.
pub fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, mode: Parallelism) -> Vec<f64> {
    let rows = map_indexed(mu.len(), mode, |i| {
        (0..nu.len())
            .map(|j| sq_dist(mu.point(i), nu.point(j)))
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

fn check_uniform_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, found: nu.dim });
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return Err(Error::NonUniformWeights);
    }
    if mu.len() != nu.len() {
        return Err(Error::SizeMismatch { left: mu.len(), right: nu.len() });
    }
    Ok(())
}

/// One-dimensional `𝒲₂` by monotone rearrangement of equal-size uniform clouds.
pub fn w2_quantile_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != 1 {
        return Err(Error::UnsupportedDimension(mu.dim));
    }
    if nu.dim != 1 {
        return Err(Error::UnsupportedDimension(nu.dim));
    }
    check_uniform_pair(mu, nu)?;
    let mut a = mu.points.clone();
    let mut b = nu.points.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let cost: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((cost / n).sqrt())
}

/// Exact `𝒲₂` between equal-size uniform clouds with at most [`EXACT_CAP`] points.
pub fn w2_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    w2_exact_with_cap(mu, nu, EXACT_CAP, Parallelism::Sequential)
}

pub fn w2_exact_with_cap(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cap: usize,
    mode: Parallelism,
) -> Result<f64> {
    check_uniform_pair(mu, nu)?;
    let n = mu.len();
    if n > cap {
        return Err(Error::OverCap { n, cap });
    }
    let cost = cost_matrix(mu, nu, mode);
    let (_, total) = min_cost_assignment(&cost, n);
    Ok((total.max(0.0) / n as f64).sqrt())
}

/// Minimum-cost perfect matching on a square row-major cost matrix
/// (shortest augmenting paths with potentials, O(n³)). Returns the column
/// assigned to each row and the total cost.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

/// Result of the entropic surrogate; always approximate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropicW2 {
    pub value: f64,
    pub converged: bool,
    /// Largest marginal violation (ℓ¹) across the three Sinkhorn solves.
    pub residual: f64,
    pub approximate: bool,
}

/// Debiased Sinkhorn estimate of `𝒲₂`:
/// `sqrt(OT_ε(μ,ν) − ½OT_ε(μ,μ) − ½OT_ε(ν,ν))` with log-domain iterations.
pub fn w2_entropic(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, reg: f64, iters: usize) -> Result<EntropicW2> {
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::InvalidParameter(format!("regularisation must be positive, got {reg}")));
    }
    if iters == 0 {
        return Err(Error::InvalidParameter("entropic transport needs at least one iteration".into()));
    }
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, found: nu.dim });
    }
    let (xy, rxy, cxy) = sinkhorn(mu, nu, reg, iters);
    let (xx, rxx, cxx) = sinkhorn(mu, mu, reg, iters);
    let (yy, ryy, cyy) = sinkhorn(nu, nu, reg, iters);
    let div = xy - 0.5 * (xx + yy);
    Ok(EntropicW2 {
        value: div.max(0.0).sqrt(),
        converged: cxy && cxx && cyy,
        residual: rxy.max(rxx).max(ryy),
        approximate: true,
    })
}

/// Median entry of the squared-distance cost matrix.
pub fn median_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let mut c = cost_matrix(mu, nu, Parallelism::Sequential);
    c.sort_by(f64::total_cmp);
    crate::stats::percentile_sorted(&c, 0.5)
}

fn logsumexp(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT dual value, final marginal residual and convergence flag.
fn sinkhorn(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, reg: f64, iters: usize) -> (f64, f64, bool) {
    let n = mu.len();
    let m = nu.len();
    let cost = cost_matrix(mu, nu, Parallelism::Sequential);
    let loga: Vec<f64> = (0..n).map(|i| mu.weight(i).ln()).collect();
    let logb: Vec<f64> = (0..m).map(|j| nu.weight(j).ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residual = f64::INFINITY;
    for _ in 0..iters {
        for i in 0..n {
            f[i] = -reg * logsumexp((0..m).map(|j| logb[j] + (g[j] - cost[i * m + j]) / reg));
        }
        for j in 0..m {
            g[j] = -reg * logsumexp((0..n).map(|i| loga[i] + (f[i] - cost[i * m + j]) / reg));
        }
        // After the g-update column marginals are exact; measure the rows.
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| (loga[i] + logb[j] + (f[i] + g[j] - cost[i * m + j]) / reg).exp())
                    .sum();
                (row - mu.weight(i)).abs()
            })
            .sum();
        if residual < 1e-10 {
            break;
        }
    }
    let value = (0..n).map(|i| mu.weight(i) * f[i]).sum::<f64>()
        + (0..m).map(|j| nu.weight(j) * g[j]).sum::<f64>();
    (value, residual, residual < 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cloud1(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, xs.to_vec()).unwrap()
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(w2_quantile_1d(&cloud1(&[0.0]), &cloud1(&[1.0])).unwrap(), 1.0);
        assert_eq!(w2_quantile_1d(&cloud1(&[0.0, 2.0]), &cloud1(&[3.0, 1.0])).unwrap(), 1.0);
        let c = cloud1(&[0.3, -1.0, 2.5]);
        assert_eq!(w2_quantile_1d(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn quantile_errors() {
        let two = EmpiricalMeasure::uniform(2, vec![0.0, 1.0]).unwrap();
        assert_eq!(w2_quantile_1d(&two, &two), Err(Error::UnsupportedDimension(2)));
        assert!(matches!(
            w2_quantile_1d(&cloud1(&[0.0]), &cloud1(&[0.0, 1.0])),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn exact_examples() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(w2_exact(&a, &b).unwrap(), 0.0);
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        assert_abs_diff_eq!(w2_exact(&a, &b).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_rejects_over_cap_and_weights() {
        let a = cloud1(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            w2_exact_with_cap(&a, &a, 2, Parallelism::Sequential),
            Err(Error::OverCap { n: 3, cap: 2 })
        ));
        let w = EmpiricalMeasure::weighted(1, vec![0.0, 1.0], vec![0.25, 0.75]).unwrap();
        assert_eq!(w2_exact(&w, &w), Err(Error::NonUniformWeights));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(EmpiricalMeasure::weighted(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn second_moment_of_origin_is_zero() {
        let o = EmpiricalMeasure::origin(3);
        assert_eq!(o.second_moment(), 0.0);
        let c = EmpiricalMeasure::uniform(2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(c.second_moment(), 5.0);
        assert_eq!(c.mean(), &[0.5, 1.5]);
    }

    #[test]
    fn entropic_examples() {
        let c = cloud1(&[0.0, 2.0]);
        let same = w2_entropic(&c, &c, 0.01, 100).unwrap();
        assert!(same.approximate);
        assert!(same.value <= 1e-6);
        let d = cloud1(&[1.0, 3.0]);
        let reg = 1e-2 * median_cost(&c, &d);
        let r = w2_entropic(&c, &d, reg, 2000).unwrap();
        assert!((r.value - 1.0).abs() <= 0.05, "{r:?}");
        assert!(w2_entropic(&c, &d, 0.1, 0).is_err());
        assert!(w2_entropic(&c, &d, 0.0, 10).is_err());
    }

    #[test]
    fn entropic_flags_non_convergence() {
        let c = cloud1(&[0.0, 2.0, 5.0]);
        let d = cloud1(&[1.0, 3.0, -4.0]);
        let r = w2_entropic(&c, &d, 1e-3, 1).unwrap();
        assert!(!r.converged);
        assert!(r.residual > 0.0);
    }
}
