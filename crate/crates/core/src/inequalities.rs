//! Numerical checks of the inequalities used in the convergence analysis:
//! the elementary power inequality, Bihari and Gronwall bounds, and the
//! second-moment maximal inequality for compensated Poisson integrals.

use rand::Rng;

use crate::coefficients::Modulus;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::grid::TimeGrid;
use crate::noise::{sample_jumps, stream_rng, JumpSpec, Purpose, StreamId};
use crate::quadrature::adaptive_simpson;
use crate::stats;

const POWER_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `|a+b|^p ≤ (1 + r^{1/(p−1)})^{p−1} (|a|^p + |b|^p / r)` for `p ≥ 2`, `r > 0`.
pub fn power_inequality_check(a: f64, b: f64, p: f64, r: f64) -> Result<PowerCheck> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::Domain(format!("power inequality needs p >= 2, got {p}")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("power inequality needs r > 0, got {r}")));
    }
    let lhs = (a + b).abs().powf(p);
    let rhs = (1.0 + r.powf(1.0 / (p - 1.0))).powf(p - 1.0) * (a.abs().powf(p) + b.abs().powf(p) / r);
    Ok(PowerCheck { lhs, rhs, holds: lhs <= rhs * (1.0 + POWER_SLACK) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzReport {
    pub trials: usize,
    pub failures: usize,
    /// Largest `lhs / rhs` seen.
    pub worst_ratio: f64,
}

const FUZZ_BATCH: usize = 8192;

/// Checks the power inequality on `n` random tuples with `a, b` spread over
/// six decades, `p ∈ [2, 12]` and `r ∈ [10⁻⁴, 10⁴]`.
pub fn fuzz_power_inequality(n: usize, seed: u64, exec: Parallelism) -> FuzzReport {
    let batches = n.div_ceil(FUZZ_BATCH);
    let parts = map_indexed(batches, exec, |b| {
        let mut rng = stream_rng(StreamId::new(seed, b as u64), Purpose::Trials);
        let count = FUZZ_BATCH.min(n - b * FUZZ_BATCH);
        let mut failures = 0;
        let mut worst = 0.0f64;
        for _ in 0..count {
            let signed = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mag = 10f64.powf(rng.random_range(-3.0..3.0));
                if rng.random::<bool>() { mag } else { -mag }
            };
            let a = signed(&mut rng);
            let b = if rng.random_range(0..16) == 0 { 0.0 } else { signed(&mut rng) };
            let p = rng.random_range(2.0..12.0);
            let r = 10f64.powf(rng.random_range(-4.0..4.0));
            let c = power_inequality_check(a, b, p, r).expect("sampled inside the domain");
            if !c.holds {
                failures += 1;
            }
            if c.rhs > 0.0 {
                worst = worst.max(c.lhs / c.rhs);
            }
        }
        (failures, worst)
    });
    let (failures, worst_ratio) = parts
        .into_iter()
        .fold((0, 0.0f64), |(f, w), (bf, bw)| (f + bf, w.max(bw)));
    FuzzReport { trials: n, failures, worst_ratio }
}

/// `u(t) ≤ u₀ + ∫₀ᵗ v(s) θ(u(s)) ds` with `v` sampled on a grid.
#[derive(Debug, Clone)]
pub struct BihariProblem {
    u0: f64,
    times: Vec<f64>,
    v: Vec<f64>,
    theta: Modulus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BihariBound {
    pub value: f64,
    /// False when `G(u₀) + ∫v` falls outside the range of `G`.
    pub in_domain: bool,
}

impl BihariProblem {
    pub fn new(u0: f64, times: Vec<f64>, v: Vec<f64>, theta: Modulus) -> Result<Self> {
        if !(u0 >= 0.0) || !u0.is_finite() {
            return Err(Error::InvalidParameter(format!("u0 must be nonnegative, got {u0}")));
        }
        if times.len() != v.len() {
            return Err(Error::SizeMismatch { left: times.len(), right: v.len() });
        }
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("sample times must be strictly increasing".into()));
        }
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter("v must be nonnegative".into()));
        }
        let upper = 10.0f64.max(4.0 * u0);
        let shape = theta.shape_report(upper, 512);
        if !(shape.positive && shape.nondecreasing && shape.concave) {
            return Err(Error::InvalidParameter(format!("theta {theta:?} fails the shape check: {shape:?}")));
        }
        Ok(Self { u0, times, v, theta })
    }

    /// Problem with `v` sampled from a function on a uniform grid.
    pub fn from_fn(u0: f64, grid: &TimeGrid, v: impl Fn(f64) -> f64, theta: Modulus) -> Result<Self> {
        let times = grid.nodes();
        let vals = times.iter().map(|&t| v(t)).collect();
        Self::new(u0, times, vals, theta)
    }

    pub fn u0(&self) -> f64 {
        self.u0
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `∫₀ᵗ v` by the trapezoid rule on the samples, with linear
    /// interpolation inside the last cell.
    pub fn v_integral(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for w in 0..self.times.len() - 1 {
            let (t0, t1) = (self.times[w], self.times[w + 1]);
            if t <= t0 {
                break;
            }
            let end = t.min(t1);
            let frac = (end - t0) / (t1 - t0);
            let v_end = self.v[w] + frac * (self.v[w + 1] - self.v[w]);
            acc += 0.5 * (self.v[w] + v_end) * (end - t0);
        }
        acc
    }

    /// `G(r) = ∫₁ʳ ds/θ(s)`, computed in the variable `log s`.
    pub fn g(&self, r: f64) -> f64 {
        g_of(&self.theta, r)
    }
}

/// Lower cut-off for `log s` when `G(0)` is finite.
const LOG_FLOOR: f64 = -700.0;

fn g_of(theta: &Modulus, r: f64) -> f64 {
    let f = |y: f64| {
        let s = y.exp();
        s / theta.value(s)
    };
    let upper = if r > 0.0 { r.ln() } else { LOG_FLOOR };
    if upper == 0.0 {
        return 0.0;
    }
    let tol = 1e-13 * upper.abs().max(1.0);
    adaptive_simpson(&f, 0.0, upper, tol)
}

/// `G⁻¹(G(u₀) + ∫₀ᵗ v)`, or `0` when `u₀ = 0` and `θ` satisfies the Osgood
/// condition.
pub fn bihari_bound(pb: &BihariProblem, t: f64) -> BihariBound {
    if pb.u0 == 0.0 && pb.theta.is_osgood() {
        return BihariBound { value: 0.0, in_domain: true };
    }
    let target = g_of(&pb.theta, pb.u0) + pb.v_integral(t);
    invert_g(&pb.theta, target)
}

fn invert_g(theta: &Modulus, target: f64) -> BihariBound {
    let g = |r: f64| g_of(theta, r);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    if target >= 0.0 {
        while g(hi) < target {
            lo = hi;
            hi *= 4.0;
            if !hi.is_finite() || hi > 1e300 {
                return BihariBound { value: f64::INFINITY, in_domain: false };
            }
        }
    } else {
        while g(lo) > target {
            hi = lo;
            lo *= 0.25;
            if lo < 1e-300 {
                return BihariBound { value: 0.0, in_domain: false };
            }
        }
    }
    // Bisection in log r to 1e-12 relative width.
    let (mut a, mut b) = (lo.ln(), hi.ln());
    while b - a > 1e-13 {
        let m = 0.5 * (a + b);
        if g(m.exp()) < target {
            a = m;
        } else {
            b = m;
        }
    }
    BihariBound { value: (0.5 * (a + b)).exp(), in_domain: true }
}

/// `u₀ exp(∫₀ᵗ v)`.
pub fn gronwall_bound(u0: f64, times: &[f64], v: &[f64], t: f64) -> Result<f64> {
    let pb = BihariProblem::new(u0, times.to_vec(), v.to_vec(), Modulus::Linear { gamma: 1.0 })?;
    Ok(u0 * pb.v_integral(t).exp())
}

/// Largest excess `u(t_i) − bound(t_i)` over the sample grid (nonpositive
/// when `u` respects the bound).
pub fn bihari_check(pb: &BihariProblem, u: &[f64]) -> Result<f64> {
    if u.len() != pb.times.len() {
        return Err(Error::SizeMismatch { left: u.len(), right: pb.times.len() });
    }
    Ok(pb
        .times
        .iter()
        .zip(u)
        .map(|(&t, &ui)| ui - bihari_bound(pb, t).value)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Largest excess of `u` over the Gronwall bound.
pub fn gronwall_check(u0: f64, times: &[f64], v: &[f64], u: &[f64]) -> Result<f64> {
    if u.len() != times.len() {
        return Err(Error::SizeMismatch { left: u.len(), right: times.len() });
    }
    let mut worst = f64::NEG_INFINITY;
    for (&t, &ui) in times.iter().zip(u) {
        worst = worst.max(ui - gronwall_bound(u0, times, v, t)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy)]
pub struct KunitaOptions {
    pub replicas: usize,
    pub seed: u64,
    /// Fixed mark sample for the compensator and the second moment.
    pub mark_samples: usize,
    pub exec: Parallelism,
}

impl Default for KunitaOptions {
    fn default() -> Self {
        Self { replicas: 10_000, seed: 0, mark_samples: 100_000, exec: Parallelism::Rayon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KunitaReport {
    /// Monte Carlo `E sup_{s ≤ T} ‖M(s)‖²`.
    pub sup_moment: f64,
    pub std_error: f64,
    /// `E‖M(T)‖²`, which the isometry equates to `∫₀ᵀ∫‖J‖²ν(dz)dt`.
    pub terminal_moment: f64,
    /// `4 ∫₀ᵀ∫‖J‖²ν(dz)dt`.
    pub bound: f64,
    pub holds: bool,
}

/// Maximal inequality at `p = 2` for `M(s) = ∫₀ˢ∫ J dÑ` with an integrand
/// `J(step, z)` that is constant in time on each grid step. The supremum is
/// exact: between jumps `M` moves linearly, so `‖M‖²` peaks at segment ends.
pub fn kunita_p2_check<F>(spec: &JumpSpec, grid: &TimeGrid, d: usize, integrand: F, opts: &KunitaOptions) -> Result<KunitaReport>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    if opts.replicas < 2 {
        return Err(Error::InvalidParameter("need at least two replicas".into()));
    }
    let n = grid.n_steps();
    let marks = spec.quadrature_marks(opts.seed, opts.mark_samples.max(1));
    let m = marks.len() / spec.mark_dim();
    let mut comp = vec![0.0; n * d];
    let mut bound = 0.0;
    let mut buf = vec![0.0; d];
    for j in 0..n {
        let h = grid.node(j + 1) - grid.node(j);
        let mut second = 0.0;
        for z in marks.chunks(spec.mark_dim()) {
            integrand(j, z, &mut buf);
            for (c, v) in comp[j * d..(j + 1) * d].iter_mut().zip(&buf) {
                *c += v;
            }
            second += buf.iter().map(|v| v * v).sum::<f64>();
        }
        let scale = spec.intensity() / m as f64;
        comp[j * d..(j + 1) * d].iter_mut().for_each(|c| *c *= scale);
        bound += 4.0 * h * scale * second;
    }

    let results = map_indexed(opts.replicas, opts.exec, |rep| -> Result<(f64, f64)> {
        let (times, zs) = sample_jumps(spec, grid.horizon(), StreamId::new(opts.seed, rep as u64));
        let mut state = vec![0.0; d];
        let mut jump = vec![0.0; d];
        let mut sup = 0.0f64;
        let mut clock = 0.0;
        let mut next = 0;
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let drift = |state: &mut [f64], j: usize, dt: f64| {
            for (s, c) in state.iter_mut().zip(&comp[j * d..(j + 1) * d]) {
                *s -= c * dt;
            }
        };
        for j in 0..n {
            let end = grid.node(j + 1);
            while next < times.len() && grid.step_containing(times[next]) == j {
                let tau = times[next];
                drift(&mut state, j, tau - clock);
                sup = sup.max(sq(&state));
                integrand(j, &zs[next * spec.mark_dim()..(next + 1) * spec.mark_dim()], &mut jump);
                if jump.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Coefficient { sample: rep, reason: "jump integrand non-finite".into() });
                }
                state.iter_mut().zip(&jump).for_each(|(s, v)| *s += v);
                sup = sup.max(sq(&state));
                clock = tau;
                next += 1;
            }
            drift(&mut state, j, end - clock);
            clock = end;
            sup = sup.max(sq(&state));
        }
        Ok((sup, sq(&state)))
    });
    let mut sups = Vec::with_capacity(opts.replicas);
    let mut terminal = Vec::with_capacity(opts.replicas);
    for r in results {
        let (s, t) = r?;
        sups.push(s);
        terminal.push(t);
    }
    let sup_moment = stats::mean(&sups);
    let std_error = stats::std_error(&sups);
    Ok(KunitaReport {
        sup_moment,
        std_error,
        terminal_moment: stats::mean(&terminal),
        bound,
        holds: sup_moment + 3.0 * std_error <= bound || (sup_moment == 0.0 && bound == 0.0),
    })
}
