//! Coefficient triples `(F, G, J)`, concave moduli and the non-Lipschitz
//! hypothesis spot-checker.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cosine_family::SpectralGenerator;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::measure::{w2_exact, EmpiricalMeasure};
use crate::noise::{stream_rng, JumpSpec, NoiseModel, Purpose, StreamId};
use crate::quadrature::adaptive_simpson;

/// Concave modulus `Ψ` replacing a Lipschitz constant.
#[derive(Clone)]
pub enum Modulus {
    /// `Ψ(u) = γu`.
    Linear { gamma: f64 },
    /// `u log(1/u)` on `[0, δ]`, extended linearly with slope `Ψ′(δ−)`.
    Log { delta: f64 },
    /// `u log(1/u) log log(1/u)` on `[0, δ]`, extended linearly.
    LogLog { delta: f64 },
    Custom(CustomModulus),
}

/// User-supplied modulus.
#[derive(Clone)]
pub struct CustomModulus {
    pub name: String,
    pub func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Whether `∫_{0+} du/Ψ(u)` diverges.
    pub osgood: bool,
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulus::Linear { gamma } => write!(f, "Linear(γ={gamma})"),
            Modulus::Log { delta } => write!(f, "Log(δ={delta})"),
            Modulus::LogLog { delta } => write!(f, "LogLog(δ={delta})"),
            Modulus::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

/// Largest `δ` for which the log-log modulus is nondecreasing: the root of
/// `(L − 1) log L = 1` with `δ = e^{−L}`.
pub const LOGLOG_MAX_DELTA: f64 = 0.106_460_858_452_291_8;

impl Modulus {
    pub fn linear(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Modulus::Linear { gamma })
    }

    pub fn log(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Modulus::Log { delta })
    }

    pub fn loglog(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Modulus::LogLog { delta })
    }

    pub fn custom<F>(name: &str, func: F, osgood: bool) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Modulus::Custom(CustomModulus {
            name: name.to_string(),
            func: Arc::new(func),
            osgood,
        })
    }

    /// Evaluates `Ψ(u)`; negative arguments are a domain error.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0) {
            return Err(Error::Domain(format!("modulus argument must be nonnegative, got {u}")));
        }
        Ok(self.value(u))
    }

    /// `Ψ(u)` for `u ≥ 0` without the domain check.
    pub fn value(&self, u: f64) -> f64 {
        match self {
            Modulus::Linear { gamma } => gamma * u,
            Modulus::Log { delta } => {
                if u <= *delta {
                    log_core(u)
                } else {
                    log_core(*delta) + self.slope_at_delta() * (u - delta)
                }
            }
            Modulus::LogLog { delta } => {
                if u <= *delta {
                    loglog_core(u)
                } else {
                    loglog_core(*delta) + self.slope_at_delta() * (u - delta)
                }
            }
            Modulus::Custom(c) => (c.func)(u),
        }
    }

    /// Left derivative `Ψ′(δ−)` for the piecewise forms (`γ` for linear).
    pub fn slope_at_delta(&self) -> f64 {
        match self {
            Modulus::Linear { gamma } => *gamma,
            Modulus::Log { delta } => (1.0 / delta).ln() - 1.0,
            Modulus::LogLog { delta } => {
                let l = (1.0 / delta).ln();
                l * l.ln() - l.ln() - 1.0
            }
            Modulus::Custom(_) => f64::NAN,
        }
    }

    /// `lim Ψ(u)/u` as `u → ∞`; `None` for custom moduli.
    pub fn tail_slope(&self) -> Option<f64> {
        match self {
            Modulus::Custom(_) => None,
            _ => Some(self.slope_at_delta()),
        }
    }

    /// Whether `∫_{0+} du/Ψ(u) = ∞`.
    pub fn is_osgood(&self) -> bool {
        match self {
            Modulus::Custom(c) => c.osgood,
            _ => true,
        }
    }

    /// Smallest grid-certified `β` with `Ψ(u) ≤ β(1+u)` on a log-spaced grid
    /// over `[0, 10⁶]`, inflated by 5%.
    pub fn beta(&self) -> f64 {
        let raw = match self {
            Modulus::Linear { gamma } => *gamma,
            _ => {
                let mut best = 0.0f64;
                let n = 4000;
                for i in 0..=n {
                    let u = 10f64.powf(-12.0 + 18.0 * i as f64 / n as f64);
                    best = best.max(self.value(u) / (1.0 + u));
                }
                if let Modulus::Log { delta } | Modulus::LogLog { delta } = self {
                    // Beyond δ the ratio is monotone towards the tail slope.
                    best = best.max(self.slope_at_delta()).max(self.value(*delta) / (1.0 + delta));
                }
                best
            }
        };
        raw * 1.05
    }

    /// Concavity, monotonicity and positivity on a uniform grid over `[0, upper]`.
    pub fn shape_report(&self, upper: f64, points: usize) -> ShapeReport {
        let n = points.max(3);
        let vals: Vec<f64> = (0..n)
            .map(|i| self.value(upper * i as f64 / (n - 1) as f64))
            .collect();
        let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale;
        ShapeReport {
            zero_at_origin: vals[0] == 0.0,
            positive: vals[1..].iter().all(|&v| v > 0.0),
            nondecreasing: vals.windows(2).all(|w| w[1] - w[0] >= -tol),
            concave: vals.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] <= tol),
        }
    }

    /// `∫_{lower}^{1} du / Ψ(u)` by adaptive quadrature in `log u`.
    pub fn osgood_integral(&self, lower: f64) -> f64 {
        let f = |y: f64| {
            let u = y.exp();
            u / self.value(u)
        };
        adaptive_simpson(&f, lower.ln(), 0.0, 1e-10)
    }
}

/// Smallest `K` with `lip·u ≤ KΨ(u)` for all `u ≥ 0` and `growth ≤ K`.
///
/// For concave `Ψ` with `Ψ(0) = 0` the ratio `u/Ψ(u)` is nondecreasing, so
/// the supremum is the reciprocal tail slope.
pub fn certify_k(lip: f64, growth: f64, modulus: &Modulus) -> Result<f64> {
    let slope = modulus
        .tail_slope()
        .ok_or_else(|| Error::InvalidParameter("cannot certify K for a custom modulus".into()))?;
    if lip == 0.0 {
        return Ok(growth);
    }
    if !(slope > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "modulus {modulus:?} has zero tail slope; Lipschitz coefficients cannot satisfy the continuity bound"
        )));
    }
    Ok(growth.max(lip / slope))
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn log_core(u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u * (1.0 / u).ln()
    }
}

fn loglog_core(u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        let l = (1.0 / u).ln();
        u * l * l.ln()
    }
}

/// Outcome of [`Modulus::shape_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeReport {
    pub zero_at_origin: bool,
    pub positive: bool,
    pub nondecreasing: bool,
    pub concave: bool,
}

impl ShapeReport {
    pub fn admissible(&self) -> bool {
        self.zero_at_origin && self.positive && self.nondecreasing && self.concave
    }
}

/// Coefficients of the mean-field equation. Implementations must be pure and
/// reentrant: the solver calls them concurrently from several threads.
pub trait Coefficients: Send + Sync {
    /// State dimension `d`.
    fn dim(&self) -> usize;
    /// Wiener dimension `k`.
    fn noise_dim(&self) -> usize;
    /// `F(t, x, μ)` into `out` (length `d`).
    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `G(t, x, μ)` into `out`, row-major `d × k`.
    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `J(t, x, μ, z)` into `out` (length `d`).
    fn jump(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]);
    /// Closed form of `∫_Z J(t, x, μ, z) ν(dz)`; returns `false` when the
    /// model has none and the caller must integrate over marks.
    fn jump_compensator(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _jumps: &JumpSpec,
        _out: &mut [f64],
    ) -> bool {
        false
    }
    /// Closed form of `∫_Z ‖J(t,x,μ,z) − J(t,y,ν,z)‖² ν(dz)`, if known.
    #[allow(clippy::too_many_arguments)]
    fn jump_difference_moment(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _nu: &EmpiricalMeasure,
        _jumps: &JumpSpec,
    ) -> Option<f64> {
        None
    }
    /// Closed form of `∫_Z ‖J(t,0,δ₀,z)‖² ν(dz)`, if known.
    fn jump_growth_moment(&self, _t: f64, _jumps: &JumpSpec) -> Option<f64> {
        None
    }
    /// `K(t)`, nondecreasing and bounded.
    fn k_bound(&self, t: f64) -> f64;
    /// The modulus `Ψ`.
    fn modulus(&self) -> &Modulus;
}

type DriftFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
type JumpFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync;

/// Coefficient triple assembled from closures.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    noise_dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DriftFn>,
    jump: Arc<JumpFn>,
    k_bound: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    modulus: Modulus,
}

impl CoefficientSet {
    pub fn new<F, G, J, K>(dim: usize, noise_dim: usize, drift: F, diffusion: G, jump: J, k_bound: K, modulus: Modulus) -> Self
    where
        F: Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
        G: Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
        J: Fn(f64, &[f64], &EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync + 'static,
        K: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            noise_dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            jump: Arc::new(jump),
            k_bound: Arc::new(k_bound),
            modulus,
        }
    }

    /// All three coefficients identically zero.
    pub fn zero(dim: usize, noise_dim: usize) -> Self {
        Self::new(
            dim,
            noise_dim,
            |_, _, _, o| o.fill(0.0),
            |_, _, _, o| o.fill(0.0),
            |_, _, _, _, o| o.fill(0.0),
            |_| 0.0,
            Modulus::Linear { gamma: 1.0 },
        )
    }
}

impl Coefficients for CoefficientSet {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.drift)(t, x, mu, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.diffusion)(t, x, mu, out)
    }
    fn jump(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]) {
        (self.jump)(t, x, mu, z, out)
    }
    fn k_bound(&self, t: f64) -> f64 {
        (self.k_bound)(t)
    }
    fn modulus(&self) -> &Modulus {
        &self.modulus
    }
}

/// Parameters of the built-in linear test model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    /// Frequency: the generator is `A = −a²I`.
    pub a: f64,
    /// Damping: `B = b·I`.
    pub b: f64,
    /// Mean-field gain.
    pub c: f64,
    pub sigma: f64,
    pub j0: f64,
}

/// `F = c·mean(μ)`, `G = σ·I`, `J = j0·z` with `Ψ₁(u) = u` and an analytic
/// `K` certifying the growth and continuity hypotheses.
#[derive(Debug, Clone)]
pub struct LinearModel {
    params: LinearParams,
    dim: usize,
    noise_dim: usize,
    lip: f64,
    growth: f64,
    k: f64,
    modulus: Modulus,
}

/// Builds the linear model on ℝ^dim driven by `noise`.
pub fn make_linear_model(params: LinearParams, dim: usize, noise: &NoiseModel) -> Result<LinearModel> {
    LinearModel::new(params, dim, noise)
}

impl LinearModel {
    pub fn new(params: LinearParams, dim: usize, noise: &NoiseModel) -> Result<Self> {
        let LinearParams { a, b, c, sigma, j0 } = params;
        if [a, b, c, sigma, j0].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("linear model parameters must be finite".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if let Some(j) = &noise.jumps {
            if j.mark_dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: j.mark_dim() });
            }
        }
        let noise_dim = noise.wiener.dim();
        let hs = sigma * sigma
            * noise.wiener.eigenvalues().iter().take(dim.min(noise_dim)).sum::<f64>();
        let jump = noise.jumps.as_ref().map_or(0.0, |j| j0 * j0 * j.moment2());
        let k = (c * c).max(hs + jump);
        Ok(Self {
            params,
            dim,
            noise_dim,
            lip: c * c,
            growth: hs + jump,
            k,
            modulus: Modulus::Linear { gamma: 1.0 },
        })
    }

    pub fn params(&self) -> LinearParams {
        self.params
    }

    /// Generator `A = −a²I` with damping `B = b·I`.
    pub fn generator(&self) -> Result<SpectralGenerator> {
        let a = self.params.a;
        SpectralGenerator::diagonal(vec![-a * a; self.dim], self.params.b)
    }

    /// Same model measured against `modulus`, with `K` re-certified.
    pub fn with_modulus(mut self, modulus: Modulus) -> Result<Self> {
        self.k = certify_k(self.lip, self.growth, &modulus)?;
        self.modulus = modulus;
        Ok(self)
    }

    /// Same model with `K` replaced by `k` (used to exercise the checker).
    pub fn with_k_bound(mut self, k: f64) -> Self {
        self.k = k;
        self
    }
}

impl Coefficients for LinearModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, _t: f64, _x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(mu.mean()) {
            *o = self.params.c * m;
        }
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.dim.min(self.noise_dim) {
            out[r * self.noise_dim + r] = self.params.sigma;
        }
    }
    fn jump(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]) {
        for (o, zi) in out.iter_mut().zip(z) {
            *o = self.params.j0 * zi;
        }
    }
    fn jump_compensator(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, jumps: &JumpSpec, out: &mut [f64]) -> bool {
        out.fill(self.params.j0 * jumps.intensity() * jumps.mark_mean());
        true
    }
    fn jump_difference_moment(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _nu: &EmpiricalMeasure,
        _jumps: &JumpSpec,
    ) -> Option<f64> {
        Some(0.0)
    }
    fn jump_growth_moment(&self, _t: f64, jumps: &JumpSpec) -> Option<f64> {
        Some(self.params.j0 * self.params.j0 * jumps.moment2())
    }
    fn k_bound(&self, _t: f64) -> f64 {
        self.k
    }
    fn modulus(&self) -> &Modulus {
        &self.modulus
    }
}

/// Options for [`check_h3`].
#[derive(Debug, Clone, Copy)]
pub struct H3Options {
    pub trials: usize,
    pub seed: u64,
    pub horizon: f64,
    pub cloud_size: usize,
    pub mark_samples: usize,
    pub exec: Parallelism,
}

impl Default for H3Options {
    fn default() -> Self {
        Self {
            trials: 500,
            seed: 0,
            horizon: 1.0,
            cloud_size: 5,
            mark_samples: 10_000,
            exec: Parallelism::Rayon,
        }
    }
}

/// Result of the hypothesis spot check.
#[derive(Debug, Clone, PartialEq)]
pub struct H3Report {
    /// Worst `LHS / RHS` of the continuity display.
    pub continuity_ratio: f64,
    /// Worst `growth / K(t)` of the linear-growth display.
    pub growth_ratio: f64,
    pub worst_ratio: f64,
    pub worst_sample: usize,
    pub tolerance: f64,
    pub pass: bool,
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

/// Samples random `(t, x, y, μ, ν)` and compares both sides of the
/// continuity and growth conditions. Passes iff the worst ratio is at most
/// `1 + tolerance`, where the tolerance covers Monte Carlo over marks.
pub fn check_h3(cs: &dyn Coefficients, noise: &NoiseModel, opts: &H3Options) -> Result<H3Report> {
    if opts.trials == 0 {
        return Err(Error::InvalidParameter("check_h3 needs at least one trial".into()));
    }
    let d = cs.dim();
    let k = cs.noise_dim();
    if k != noise.wiener.dim() {
        return Err(Error::DimensionMismatch { expected: k, found: noise.wiener.dim() });
    }
    let marks = noise
        .jumps
        .as_ref()
        .map(|j| j.quadrature_marks(opts.seed, opts.mark_samples));
    let used_mc = std::sync::atomic::AtomicBool::new(false);
    let results = map_indexed(opts.trials, opts.exec, |trial| -> Result<(f64, f64)> {
        let mut rng = stream_rng(StreamId::new(opts.seed, trial as u64), Purpose::Trials);
        let t = opts.horizon * rng.random::<f64>();
        let mut gauss = |scale: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let x = gauss(2.0, d);
        let y = match trial % 3 {
            0 => x.clone(),
            _ => gauss(2.0, d),
        };
        let mu = EmpiricalMeasure::uniform(d, gauss(1.5, d * opts.cloud_size))?;
        let nu = match trial % 2 {
            0 => mu.translated(&gauss(1.0, d)),
            _ => EmpiricalMeasure::uniform(d, gauss(1.5, d * opts.cloud_size))?,
        };
        let w2 = w2_exact(&mu, &nu)?;

        let (mut fx, mut fy) = (vec![0.0; d], vec![0.0; d]);
        cs.drift(t, &x, &mu, &mut fx);
        cs.drift(t, &y, &nu, &mut fy);
        let (mut gx, mut gy) = (vec![0.0; d * k], vec![0.0; d * k]);
        cs.diffusion(t, &x, &mu, &mut gx);
        cs.diffusion(t, &y, &nu, &mut gy);
        let fdiff: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b) * (a - b)).sum();
        let gd: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let gdiff = noise.wiener.hs_norm_sq(&gd, d);
        let jdiff = match (&noise.jumps, &marks) {
            (Some(spec), Some(zs)) => match cs.jump_difference_moment(t, &x, &mu, &y, &nu, spec) {
                Some(v) => v,
                None => {
                    used_mc.store(true, std::sync::atomic::Ordering::Relaxed);
                    jump_moment(spec, zs, |z, o| {
                        let mut jy = vec![0.0; d];
                        cs.jump(t, &x, &mu, z, o);
                        cs.jump(t, &y, &nu, z, &mut jy);
                        o.iter_mut().zip(&jy).for_each(|(a, b)| *a -= b);
                    }, d)
                }
            },
            _ => 0.0,
        };
        let lhs = fdiff + gdiff + jdiff;
        let u = (x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()) + w2 * w2;
        let rhs = cs.k_bound(t) * cs.modulus().value(u);

        let origin = EmpiricalMeasure::origin(d);
        let zero = vec![0.0; d];
        cs.drift(t, &zero, &origin, &mut fx);
        cs.diffusion(t, &zero, &origin, &mut gx);
        let jgrowth = match (&noise.jumps, &marks) {
            (Some(spec), Some(zs)) => match cs.jump_growth_moment(t, spec) {
                Some(v) => v,
                None => {
                    used_mc.store(true, std::sync::atomic::Ordering::Relaxed);
                    jump_moment(spec, zs, |z, o| cs.jump(t, &zero, &origin, z, o), d)
                }
            },
            _ => 0.0,
        };
        let growth = fx.iter().map(|v| v * v).sum::<f64>() + noise.wiener.hs_norm_sq(&gx, d) + jgrowth;
        if !lhs.is_finite() || !growth.is_finite() {
            return Err(Error::Coefficient {
                sample: trial,
                reason: "non-finite coefficient value".into(),
            });
        }
        Ok((ratio(lhs, rhs), ratio(growth, cs.k_bound(t))))
    });
    let mut continuity_ratio = 0.0f64;
    let mut growth_ratio = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut worst_sample = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (c, g) = r?;
        continuity_ratio = continuity_ratio.max(c);
        growth_ratio = growth_ratio.max(g);
        if c.max(g) > worst_ratio {
            worst_ratio = c.max(g);
            worst_sample = i;
        }
    }
    let tolerance = if used_mc.into_inner() {
        3.0 / (opts.mark_samples as f64).sqrt()
    } else {
        1e-9
    };
    Ok(H3Report {
        continuity_ratio,
        growth_ratio,
        worst_ratio,
        worst_sample,
        tolerance,
        pass: worst_ratio <= 1.0 + tolerance,
    })
}

/// `∫_Z ‖f(z)‖² ν(dz)` by averaging over a fixed mark sample.
pub(crate) fn jump_moment<F: FnMut(&[f64], &mut [f64])>(spec: &JumpSpec, marks: &[f64], mut f: F, d: usize) -> f64 {
    let mut buf = vec![0.0; d];
    let m = marks.len() / spec.mark_dim();
    let total: f64 = marks
        .chunks(spec.mark_dim())
        .map(|z| {
            f(z, &mut buf);
            buf.iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    spec.intensity() * total / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{MarkDistribution, QWienerSpec};
    use approx::assert_abs_diff_eq;

    fn noisy(dim: usize) -> NoiseModel {
        NoiseModel::new(
            QWienerSpec::new(vec![1.0; dim]).unwrap(),
            Some(JumpSpec::new(2.0, MarkDistribution::Gauss { mean: 0.1, std: 1.0 }, dim).unwrap()),
        )
    }

    #[test]
    fn modulus_examples() {
        assert_eq!(Modulus::linear(2.0).unwrap().eval(3.0).unwrap(), 6.0);
        let e = (-1f64).exp();
        assert_abs_diff_eq!(Modulus::log(0.5).unwrap().eval(e).unwrap(), e, epsilon = 1e-15);
        for m in [Modulus::linear(1.0).unwrap(), Modulus::log(0.3).unwrap(), Modulus::loglog(0.1).unwrap()] {
            assert_eq!(m.eval(0.0).unwrap(), 0.0);
        }
        assert!(matches!(Modulus::log(0.3).unwrap().eval(-1.0), Err(Error::Domain(_))));
        assert!(Modulus::log(1.5).is_err());
    }

    #[test]
    fn linear_extension_is_continuous() {
        for m in [Modulus::log(0.2).unwrap(), Modulus::loglog(0.05).unwrap()] {
            let delta = match m {
                Modulus::Log { delta } | Modulus::LogLog { delta } => delta,
                _ => unreachable!(),
            };
            let left = m.value(delta * (1.0 - 1e-9));
            let right = m.value(delta * (1.0 + 1e-9));
            assert_abs_diff_eq!(left, right, epsilon = 1e-9);
            // slope at δ matches a finite difference on the left
            let h = 1e-7;
            let fd = (m.value(delta) - m.value(delta - h)) / h;
            assert_abs_diff_eq!(fd, m.slope_at_delta(), epsilon = 1e-5);
        }
    }

    #[test]
    fn beta_examples() {
        assert_abs_diff_eq!(Modulus::linear(2.0).unwrap().beta(), 2.1, epsilon = 1e-12);
        let custom = Modulus::custom("sat", |u: f64| 5.0 * u.min(1.0), false);
        assert!(custom.beta() >= 2.5);
    }

    #[test]
    fn beta_certificate_holds_at_random_points() {
        let m = Modulus::log(0.5).unwrap();
        let beta = m.beta();
        assert!(beta.is_finite());
        let mut rng = stream_rng(StreamId::new(4, 0), Purpose::Trials);
        for i in 0..1000 {
            let u = if i % 2 == 0 { rng.random::<f64>() * 0.5 } else { 10f64.powf(rng.random_range(-8.0..6.0)) };
            assert!(m.value(u) <= beta * (1.0 + u), "u = {u}");
        }
    }

    #[test]
    fn shapes_of_admissible_moduli() {
        for m in [Modulus::linear(3.0).unwrap(), Modulus::log(0.3).unwrap(), Modulus::loglog(0.1).unwrap()] {
            assert!(m.shape_report(2.0, 1000).admissible(), "{m:?}");
        }
        // δ above 1/e makes the log modulus decrease past its peak.
        assert!(!Modulus::log(0.5).unwrap().shape_report(2.0, 1000).nondecreasing);
        assert!(!Modulus::loglog(0.2).unwrap().shape_report(2.0, 1000).nondecreasing);
    }

    #[test]
    fn loglog_threshold_root() {
        let l = -LOGLOG_MAX_DELTA.ln();
        assert_abs_diff_eq!((l - 1.0) * l.ln(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn osgood_integrals_grow() {
        for m in [Modulus::log(0.3).unwrap(), Modulus::loglog(0.1).unwrap()] {
            let vals: Vec<f64> = [1e-4, 1e-6, 1e-8].iter().map(|&l| m.osgood_integral(l)).collect();
            assert!(vals[0] < vals[1] && vals[1] < vals[2], "{m:?}: {vals:?}");
        }
    }

    #[test]
    fn linear_model_passes_h3_and_halved_k_fails() {
        let noise = noisy(2);
        let p = LinearParams { a: 1.0, b: 0.2, c: 0.7, sigma: 0.5, j0: 0.3 };
        let model = make_linear_model(p, 2, &noise).unwrap();
        let opts = H3Options { trials: 300, seed: 3, ..Default::default() };
        let rep = check_h3(&model, &noise, &opts).unwrap();
        assert!(rep.pass, "{rep:?}");
        let k = model.k_bound(0.0);
        let halved = model.with_k_bound(0.5 * k);
        let rep = check_h3(&halved, &noise, &opts).unwrap();
        assert!(!rep.pass);
        assert_abs_diff_eq!(rep.worst_ratio, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn recertified_log_modulus_passes_h3() {
        let noise = noisy(1);
        let p = LinearParams { a: 1.0, b: 0.0, c: 0.9, sigma: 0.5, j0: 0.3 };
        let model = make_linear_model(p, 1, &noise).unwrap().with_modulus(Modulus::log(0.2).unwrap()).unwrap();
        let rep = check_h3(&model, &noise, &H3Options { trials: 200, seed: 4, ..Default::default() }).unwrap();
        assert!(rep.pass, "{rep:?}");
        let flat = Modulus::log((-1.0f64).exp()).unwrap();
        assert!(make_linear_model(p, 1, &noise).unwrap().with_modulus(flat).is_err());
    }

    #[test]
    fn identical_arguments_have_zero_lhs() {
        let noise = noisy(1);
        let model = make_linear_model(LinearParams { a: 1.0, b: 0.0, c: 1.0, sigma: 1.0, j0: 1.0 }, 1, &noise).unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 1.0]).unwrap();
        let (mut f1, mut f2) = ([0.0], [0.0]);
        model.drift(0.3, &[0.5], &mu, &mut f1);
        model.drift(0.3, &[0.5], &mu, &mut f2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn linear_model_drift_vanishes_at_dirac_origin() {
        let noise = NoiseModel::silent(1);
        let model = make_linear_model(LinearParams { a: 1.0, b: 0.0, c: 3.0, sigma: 0.0, j0: 0.0 }, 1, &noise).unwrap();
        let mut out = [1.0];
        model.drift(0.0, &[5.0], &EmpiricalMeasure::origin(1), &mut out);
        assert_eq!(out, [0.0]);
    }

    #[test]
    fn mc_jump_moment_path() {
        // A closure model without closed forms exercises the mark-sample route.
        let noise = noisy(1);
        let cs = CoefficientSet::new(
            1,
            1,
            |_, _, _, o| o.fill(0.0),
            |_, _, _, o| o.fill(0.0),
            |_, x, _, z, o| o[0] = 0.5 * x[0].sin() * z[0],
            |_| 0.25 * 2.0 * 1.01 * 1.5,
            Modulus::linear(1.0).unwrap(),
        );
        let rep = check_h3(&cs, &noise, &H3Options { trials: 60, mark_samples: 4000, ..Default::default() }).unwrap();
        assert!(rep.tolerance > 1e-9);
        assert!(rep.pass, "{rep:?}");
    }
}
