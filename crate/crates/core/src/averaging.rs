//! The ε-scaled standard equation, its time-averaged counterpart, the
//! averaging hypothesis checker and the ε-sweep experiment.
//!
//! In the standard equation the drift is multiplied by `ε` and the
//! diffusion and jump integrands (compensator included) by `√ε`; the
//! damping term `B` is left unscaled. Both equations are driven by the same
//! noise realisation, so the sweep error measures the averaging effect
//! alone.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coefficients::{certify_k, jump_moment, Coefficients, Modulus};
use crate::cosine_family::{CosineFamily, SpectralGenerator};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::measure::EmpiricalMeasure;
use crate::noise::{stream_rng, JumpSpec, NoiseModel, Purpose, StreamId};
use crate::quadrature::GaussLegendre;
use crate::solver::{integrate_forward, sup_sq_difference, ParticleEnsemble, Scaling, SolveConfig};
use crate::stats;

/// Time-independent coefficients `(F̄, Ḡ, J̄)` with their decay data.
pub trait AveragedCoefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// Row-major `d × k`.
    fn diffusion(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn jump(&self, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]);
    fn jump_compensator(&self, _x: &[f64], _mu: &EmpiricalMeasure, _jumps: &JumpSpec, _out: &mut [f64]) -> bool {
        false
    }
    /// Decay rates `φ₁, φ₂, φ₃` (index `0..3`) of the time-averaged deviations.
    fn phi(&self, i: usize, t1: f64) -> f64;
    /// Modulus `ψ` of the averaging hypothesis.
    fn psi(&self) -> &Modulus;
    /// Growth and continuity constant used when the averaged equation is solved.
    fn k_bound(&self) -> f64;
    fn modulus(&self) -> &Modulus;
}

/// Views averaged coefficients as ordinary time-dependent ones.
pub struct AsCoefficients<'a>(pub &'a dyn AveragedCoefficients);

impl Coefficients for AsCoefficients<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.drift(x, mu, out)
    }
    fn diffusion(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.diffusion(x, mu, out)
    }
    fn jump(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]) {
        self.0.jump(x, mu, z, out)
    }
    fn jump_compensator(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, jumps: &JumpSpec, out: &mut [f64]) -> bool {
        self.0.jump_compensator(x, mu, jumps, out)
    }
    fn k_bound(&self, _t: f64) -> f64 {
        self.0.k_bound()
    }
    fn modulus(&self) -> &Modulus {
        self.0.modulus()
    }
}

/// Freezes a coefficient set at `t = 0`. For a time-independent set the
/// averaged equation then coincides with the standard one.
pub struct Frozen<'a> {
    inner: &'a dyn Coefficients,
    psi: Modulus,
}

impl<'a> Frozen<'a> {
    pub fn new(inner: &'a dyn Coefficients) -> Self {
        Self { inner, psi: Modulus::Linear { gamma: 1.0 } }
    }
}

impl AveragedCoefficients for Frozen<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.inner.drift(0.0, x, mu, out)
    }
    fn diffusion(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.inner.diffusion(0.0, x, mu, out)
    }
    fn jump(&self, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]) {
        self.inner.jump(0.0, x, mu, z, out)
    }
    fn jump_compensator(&self, x: &[f64], mu: &EmpiricalMeasure, jumps: &JumpSpec, out: &mut [f64]) -> bool {
        self.inner.jump_compensator(0.0, x, mu, jumps, out)
    }
    fn phi(&self, _i: usize, t1: f64) -> f64 {
        1.0 / (1.0 + t1)
    }
    fn psi(&self) -> &Modulus {
        &self.psi
    }
    fn k_bound(&self) -> f64 {
        self.inner.k_bound(0.0)
    }
    fn modulus(&self) -> &Modulus {
        self.inner.modulus()
    }
}

/// Parameters of the built-in averaging model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingParams {
    /// Generator `A = −a²I`.
    pub a: f64,
    /// Damping `B = b·I`.
    pub b: f64,
    pub kappa: f64,
    pub c: f64,
    pub sigma: f64,
    pub j0: f64,
}

/// `F(t,x,μ) = (1 + e^{−t})(κx + c·mean(μ))`, `G = σI`, `J = j0·z`.
///
/// The average is `F̄ = κx + c·mean(μ)` with the same `G` and `J`, so
/// `φ_i(T₁) = (1 − e^{−2T₁})/(2T₁)` and `ψ(u) = (κ² + c²)u`.
#[derive(Debug, Clone)]
pub struct AveragingModel {
    params: AveragingParams,
    dim: usize,
    noise_dim: usize,
    lip: f64,
    growth: f64,
    k: f64,
    k_avg: f64,
    modulus: Modulus,
    psi: Modulus,
}

/// Time-averaged partner of [`AveragingModel`].
#[derive(Debug, Clone)]
pub struct AveragedModel(AveragingModel);

impl AveragingModel {
    pub fn new(params: AveragingParams, dim: usize, noise: &NoiseModel) -> Result<Self> {
        let AveragingParams { a, b, kappa, c, sigma, j0 } = params;
        if [a, b, kappa, c, sigma, j0].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("averaging model parameters must be finite".into()));
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
        let mut g = vec![0.0; dim * noise_dim];
        for r in 0..dim.min(noise_dim) {
            g[r * noise_dim + r] = sigma;
        }
        let growth = noise.wiener.hs_norm_sq(&g, dim) + noise.jumps.as_ref().map_or(0.0, |j| j0 * j0 * j.moment2());
        let lip = kappa * kappa + c * c;
        let gamma = if lip > 0.0 { lip } else { 1.0 };
        Ok(Self {
            params,
            dim,
            noise_dim,
            lip,
            growth,
            k: (4.0 * lip).max(growth),
            k_avg: lip.max(growth),
            modulus: Modulus::Linear { gamma: 1.0 },
            psi: Modulus::Linear { gamma },
        })
    }

    pub fn params(&self) -> AveragingParams {
        self.params
    }

    pub fn generator(&self) -> Result<SpectralGenerator> {
        let a = self.params.a;
        SpectralGenerator::diagonal(vec![-a * a; self.dim], self.params.b)
    }

    /// Same model measured against `modulus` in the continuity hypothesis.
    pub fn with_modulus(mut self, modulus: Modulus) -> Result<Self> {
        self.k = certify_k(4.0 * self.lip, self.growth, &modulus)?;
        self.k_avg = certify_k(self.lip, self.growth, &modulus)?;
        self.modulus = modulus;
        Ok(self)
    }

    pub fn averaged(&self) -> AveragedModel {
        AveragedModel(self.clone())
    }

    fn base_drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let AveragingParams { kappa, c, .. } = self.params;
        for ((o, xi), m) in out.iter_mut().zip(x).zip(mu.mean()) {
            *o = kappa * xi + c * m;
        }
    }

    fn sigma_matrix(&self, out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.dim.min(self.noise_dim) {
            out[r * self.noise_dim + r] = self.params.sigma;
        }
    }
}

/// `(1 − e^{−2T₁})/(2T₁)`.
pub fn exponential_phi(t1: f64) -> f64 {
    if t1 <= 0.0 {
        1.0
    } else {
        -(-2.0 * t1).exp_m1() / (2.0 * t1)
    }
}

impl Coefficients for AveragingModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.base_drift(x, mu, out);
        let factor = 1.0 + (-t).exp();
        out.iter_mut().for_each(|o| *o *= factor);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.sigma_matrix(out)
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

impl AveragedCoefficients for AveragedModel {
    fn dim(&self) -> usize {
        self.0.dim
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim
    }
    fn drift(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.base_drift(x, mu, out)
    }
    fn diffusion(&self, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.sigma_matrix(out)
    }
    fn jump(&self, x: &[f64], mu: &EmpiricalMeasure, z: &[f64], out: &mut [f64]) {
        self.0.jump(0.0, x, mu, z, out)
    }
    fn jump_compensator(&self, x: &[f64], mu: &EmpiricalMeasure, jumps: &JumpSpec, out: &mut [f64]) -> bool {
        self.0.jump_compensator(0.0, x, mu, jumps, out)
    }
    fn phi(&self, _i: usize, t1: f64) -> f64 {
        exponential_phi(t1)
    }
    fn psi(&self) -> &Modulus {
        &self.0.psi
    }
    fn k_bound(&self) -> f64 {
        self.0.k_avg
    }
    fn modulus(&self) -> &Modulus {
        &self.0.modulus
    }
}

/// `φ_i` evaluated at `T₁ ∈ {10, 100, 1000}` must decrease strictly and lose
/// at least one order of magnitude.
pub fn phi_decay_witness(avg: &dyn AveragedCoefficients) -> [bool; 3] {
    std::array::from_fn(|i| {
        let v = [10.0, 100.0, 1000.0].map(|t| avg.phi(i, t));
        v[0] > v[1] && v[1] > v[2] && v[2] >= 0.0 && v[2] <= 0.1 * v[0]
    })
}

#[derive(Debug, Clone, Copy)]
pub struct H4Options {
    pub samples: usize,
    pub seed: u64,
    pub cloud_size: usize,
    /// Marks used for the jump part; kept small because every time node
    /// needs a full pass over them.
    pub mark_samples: usize,
    pub exec: Parallelism,
}

impl Default for H4Options {
    fn default() -> Self {
        Self {
            samples: 64,
            seed: 0,
            cloud_size: 5,
            mark_samples: 256,
            exec: Parallelism::Rayon,
        }
    }
}

/// One `T₁` row: worst ratio per hypothesis part and the envelope
/// `max (time-averaged deviation)/ψ`, which should decay like `φ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct H4Row {
    pub t1: f64,
    pub phi: [f64; 3],
    pub ratio: [f64; 3],
    pub envelope: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct H4Report {
    pub rows: Vec<H4Row>,
    pub tolerance: [f64; 3],
    pub envelope_decreasing: bool,
    pub pass: bool,
}

const H4_PANEL_WIDTH: f64 = 0.5;
const H4_NODES: usize = 8;

/// Time-averaged deviations between `cs` and `avg` at random `(ξ, μ)`,
/// normalised by `φ_i(T₁)ψ(‖ξ‖² + 𝒲₂(μ, δ₀)²)`.
pub fn check_h4(
    cs: &dyn Coefficients,
    avg: &dyn AveragedCoefficients,
    noise: &NoiseModel,
    t1_list: &[f64],
    opts: &H4Options,
) -> Result<H4Report> {
    if t1_list.is_empty() || t1_list.windows(2).any(|w| w[1] <= w[0]) || t1_list[0] <= 0.0 {
        return Err(Error::InvalidParameter("T1 list must be positive and strictly increasing".into()));
    }
    if opts.samples == 0 {
        return Err(Error::InvalidParameter("check_h4 needs at least one sample".into()));
    }
    let d = cs.dim();
    let k = cs.noise_dim();
    if avg.dim() != d || avg.noise_dim() != k {
        return Err(Error::DimensionMismatch { expected: d, found: avg.dim() });
    }
    let marks = noise.jumps.as_ref().map(|j| j.quadrature_marks(opts.seed, opts.mark_samples.max(1)));
    let rule = GaussLegendre::new(H4_NODES);

    // Per sample, per T₁: the three averaged deviations and ψ(u).
    let per_sample = map_indexed(opts.samples, opts.exec, |s| -> Result<Vec<([f64; 3], f64)>> {
        let mut rng = stream_rng(StreamId::new(opts.seed, s as u64), Purpose::Trials);
        let mut gauss = |scale: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let xi = gauss(2.0, d);
        let mu = if s % 4 == 0 {
            EmpiricalMeasure::origin(d)
        } else {
            EmpiricalMeasure::uniform(d, gauss(1.5, d * opts.cloud_size))?
        };
        let u = xi.iter().map(|v| v * v).sum::<f64>() + mu.second_moment();
        let psi = avg.psi().value(u);

        let (mut f, mut fbar) = (vec![0.0; d], vec![0.0; d]);
        let (mut g, mut gbar) = (vec![0.0; d * k], vec![0.0; d * k]);
        avg.drift(&xi, &mu, &mut fbar);
        avg.diffusion(&xi, &mu, &mut gbar);
        let mut gd = vec![0.0; d * k];
        let mut jbar = vec![0.0; d];
        let mut deviation = |t: f64| -> [f64; 3] {
            cs.drift(t, &xi, &mu, &mut f);
            cs.diffusion(t, &xi, &mu, &mut g);
            let df: f64 = f.iter().zip(&fbar).map(|(a, b)| (a - b) * (a - b)).sum();
            gd.iter_mut().zip(g.iter().zip(&gbar)).for_each(|(o, (a, b))| *o = a - b);
            let dg = noise.wiener.hs_norm_sq(&gd, d);
            let dj = match (&noise.jumps, &marks) {
                (Some(spec), Some(zs)) => jump_moment(
                    spec,
                    zs,
                    |z, o| {
                        cs.jump(t, &xi, &mu, z, o);
                        avg.jump(&xi, &mu, z, &mut jbar);
                        o.iter_mut().zip(&jbar).for_each(|(a, b)| *a -= b);
                    },
                    d,
                ),
                _ => 0.0,
            };
            [df, dg, dj]
        };

        let mut rows = Vec::with_capacity(t1_list.len());
        let mut acc = [0.0; 3];
        let mut lo = 0.0;
        for &t1 in t1_list {
            let panels = ((t1 - lo) / H4_PANEL_WIDTH).ceil().max(1.0) as usize;
            let width = (t1 - lo) / panels as f64;
            for p in 0..panels {
                let a = lo + p as f64 * width;
                for (t, w) in rule.mapped(a, a + width) {
                    let dev = deviation(t);
                    for i in 0..3 {
                        acc[i] += w * dev[i];
                    }
                }
            }
            lo = t1;
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(Error::Coefficient { sample: s, reason: "non-finite coefficient value".into() });
            }
            rows.push((acc.map(|v| v / t1), psi));
        }
        Ok(rows)
    });

    let mut rows: Vec<H4Row> = t1_list
        .iter()
        .map(|&t1| H4Row {
            t1,
            phi: std::array::from_fn(|i| avg.phi(i, t1)),
            ratio: [0.0; 3],
            envelope: [0.0; 3],
        })
        .collect();
    for sample in per_sample {
        for (row, (dev, psi)) in rows.iter_mut().zip(sample?) {
            for i in 0..3 {
                let r = normalised(dev[i], psi);
                row.envelope[i] = row.envelope[i].max(r);
                row.ratio[i] = row.ratio[i].max(normalised(r, row.phi[i]));
            }
        }
    }
    let mc = if marks.is_some() { 3.0 / (opts.mark_samples.max(1) as f64).sqrt() } else { 0.0 };
    let tolerance = [1e-8, 1e-8, 1e-8 + mc];
    let envelope_decreasing = rows
        .windows(2)
        .all(|w| (0..3).all(|i| w[1].envelope[i] <= w[0].envelope[i] * (1.0 + 1e-12)));
    let pass = envelope_decreasing
        && rows.iter().all(|r| (0..3).all(|i| r.ratio[i] <= 1.0 + tolerance[i]));
    Ok(H4Report { rows, tolerance, envelope_decreasing, pass })
}

fn normalised(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("eps must lie in [0, 1], got {eps}")))
    }
}

/// Standard equation with drift scaled by `ε` and noise integrands by `√ε`.
/// At `ε = 1` this is bit-identical to the unscaled Euler solve.
pub fn solve_standard(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig, eps: f64) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    integrate_forward(cs, fam, cfg, 0, Scaling::averaging(eps), cfg.grid.n_steps())
}

/// Averaged equation under the same scaling and noise as [`solve_standard`].
pub fn solve_averaged(avg: &dyn AveragedCoefficients, fam: &CosineFamily, cfg: &SolveConfig, eps: f64) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    integrate_forward(&AsCoefficients(avg), fam, cfg, 0, Scaling::averaging(eps), cfg.grid.n_steps())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingReport {
    pub eps: Vec<f64>,
    pub alpha: f64,
    pub l: f64,
    /// `Lε^{−α}` for each `ε`.
    pub horizons: Vec<f64>,
    /// `E sup_{t ≤ Lε^{−α}} ‖X^ε(t) − Z^ε(t)‖²`.
    pub errors: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Slope of `log E_ε` against `log ε`; `None` when every error is zero.
    pub slope: Option<f64>,
    pub slope_ci: Option<(f64, f64)>,
    /// Paired bootstrap: every consecutive drop `E_{ε_i} − E_{ε_{i+1}}` has a
    /// positive lower 2.5% quantile.
    pub monotone: bool,
    pub pass: bool,
}

/// Sweep options; `l = None` picks `L = T·min(ε)^α` so the longest horizon
/// is the grid horizon.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub alpha: f64,
    pub l: Option<f64>,
    pub bootstrap: usize,
    pub min_slope: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { alpha: 0.5, l: None, bootstrap: 1000, min_slope: 0.5 }
    }
}

/// Runs the standard and averaged equations with common noise for each `ε`
/// and tabulates the sup-distance over the growing horizon `Lε^{−α}`.
pub fn averaging_sweep(
    cs: &dyn Coefficients,
    avg: &dyn AveragedCoefficients,
    fam: &CosineFamily,
    cfg: &SolveConfig,
    eps_list: &[f64],
    opts: &SweepOptions,
) -> Result<AveragingReport> {
    if eps_list.is_empty() {
        return Err(Error::InvalidParameter("eps list is empty".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("eps list must be strictly decreasing".into()));
    }
    for &e in eps_list {
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::InvalidParameter(format!("eps must lie in (0, 1], got {e}")));
        }
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let horizon = cfg.grid.horizon();
    let eps_min = *eps_list.last().unwrap();
    let l = opts.l.unwrap_or(horizon * eps_min.powf(opts.alpha));
    let horizons: Vec<f64> = eps_list.iter().map(|e| l * e.powf(-opts.alpha)).collect();
    if let Some(&h) = horizons.iter().find(|&&h| h > horizon * (1.0 + 1e-12)) {
        return Err(Error::Config(format!(
            "averaging horizon L·eps^(-alpha) = {h} exceeds T = {horizon}; lower L to at most {}",
            horizon * eps_min.powf(opts.alpha)
        )));
    }

    let avg_cs = AsCoefficients(avg);
    let mut per_particle = Vec::with_capacity(eps_list.len());
    for (&eps, &h) in eps_list.iter().zip(&horizons) {
        let until = cfg.grid.last_node_at_or_before(h);
        let scaling = Scaling::averaging(eps);
        let x = integrate_forward(cs, fam, cfg, 0, scaling, until)?;
        let z = integrate_forward(&avg_cs, fam, cfg, 0, scaling, until)?;
        per_particle.push(sup_sq_difference(&x, &z, until + 1));
    }
    let errors: Vec<f64> = per_particle.iter().map(|v| stats::mean(v)).collect();
    let slope = fit_slope(eps_list, &errors);

    let n = cfg.n_particles;
    let boots = map_indexed(opts.bootstrap, cfg.exec, |b| {
        let mut rng = stream_rng(StreamId::new(cfg.seed, b as u64), Purpose::Bootstrap);
        let idx = stats::resample_indices(&mut rng, n);
        let e: Vec<f64> = per_particle
            .iter()
            .map(|v| idx.iter().map(|&i| v[i]).sum::<f64>() / n as f64)
            .collect();
        let s = fit_slope(eps_list, &e);
        (e, s)
    });
    let column = |i: usize| -> Vec<f64> {
        let mut c: Vec<f64> = boots.iter().map(|(e, _)| e[i]).collect();
        c.sort_by(f64::total_cmp);
        c
    };
    let mut ci_low = Vec::with_capacity(eps_list.len());
    let mut ci_high = Vec::with_capacity(eps_list.len());
    for i in 0..eps_list.len() {
        let c = column(i);
        ci_low.push(stats::percentile_sorted(&c, 0.025));
        ci_high.push(stats::percentile_sorted(&c, 0.975));
    }
    let all_zero = errors.iter().all(|&e| e == 0.0);
    let monotone = all_zero
        || (0..eps_list.len().saturating_sub(1)).all(|i| {
            let mut drops: Vec<f64> = boots.iter().map(|(e, _)| e[i] - e[i + 1]).collect();
            drops.sort_by(f64::total_cmp);
            errors[i] > errors[i + 1] && stats::percentile_sorted(&drops, 0.025) > 0.0
        });
    let slope_ci = slope.and_then(|_| {
        let mut s: Vec<f64> = boots.iter().filter_map(|(_, s)| *s).collect();
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        Some((stats::percentile_sorted(&s, 0.025), stats::percentile_sorted(&s, 0.975)))
    });
    let slope_ok = match (slope, slope_ci) {
        (None, _) => all_zero,
        (Some(_), Some((lo, _))) => lo >= opts.min_slope,
        (Some(s), None) => s >= opts.min_slope,
    };
    Ok(AveragingReport {
        eps: eps_list.to_vec(),
        alpha: opts.alpha,
        l,
        horizons,
        errors,
        ci_low,
        ci_high,
        slope,
        slope_ci,
        monotone,
        pass: monotone && slope_ok,
    })
}

fn fit_slope(eps: &[f64], errors: &[f64]) -> Option<f64> {
    if eps.len() < 2 || errors.iter().any(|&e| !(e > 0.0)) {
        return None;
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Some(stats::linear_fit(&x, &y).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{make_linear_model, LinearParams};
    use crate::noise::{MarkDistribution, QWienerSpec};
    use crate::solver::{solve_caratheodory, solve_euler_mild, InitialLaw, TimeGrid};

    fn noise() -> NoiseModel {
        NoiseModel::new(
            QWienerSpec::new(vec![1.0]).unwrap(),
            Some(JumpSpec::new(1.5, MarkDistribution::Gauss { mean: 0.1, std: 0.6 }, 1).unwrap()),
        )
    }

    fn params() -> AveragingParams {
        AveragingParams { a: 1.0, b: 0.0, kappa: -0.3, c: 0.5, sigma: 0.4, j0: 0.3 }
    }

    fn setup(horizon: f64, n_steps: usize, n: usize) -> (AveragingModel, CosineFamily, SolveConfig) {
        let nz = noise();
        let m = AveragingModel::new(params(), 1, &nz).unwrap();
        let fam = CosineFamily::new(m.generator().unwrap(), horizon).unwrap();
        let cfg = SolveConfig::new(
            TimeGrid::new(horizon, n_steps).unwrap(),
            n,
            5,
            nz,
            InitialLaw { x0_mean: vec![1.0], x0_std: 0.2, x1_mean: vec![0.0], x1_std: 0.2 },
        );
        (m, fam, cfg)
    }

    #[test]
    fn phi_values_match_closed_form() {
        for (t, want) in [(10.0, 0.05), (100.0, 0.005), (1000.0, 0.0005)] {
            assert!((exponential_phi(t) - want).abs() <= 1e-9);
        }
        let (m, _, _) = setup(1.0, 10, 1);
        assert_eq!(phi_decay_witness(&m.averaged()), [true; 3]);
        assert!(m.averaged().psi().shape_report(10.0, 200).admissible());
    }

    #[test]
    fn h4_ratio_is_one_for_pure_state_drift_at_origin_law() {
        let nz = NoiseModel::silent(1);
        let p = AveragingParams { a: 1.0, b: 0.0, kappa: 1.0, c: 0.0, sigma: 0.0, j0: 0.0 };
        let m = AveragingModel::new(p, 1, &nz).unwrap();
        let opts = H4Options { samples: 8, ..Default::default() };
        let rep = check_h4(&m, &m.averaged(), &nz, &[10.0, 100.0, 1000.0], &opts).unwrap();
        assert!(rep.pass, "{rep:?}");
        for row in &rep.rows {
            // sample 0 uses μ = δ₀ where the bound is attained
            assert!((row.ratio[0] - 1.0).abs() <= 1e-10, "{row:?}");
            assert_eq!(row.ratio[1], 0.0);
        }
        let env: Vec<f64> = rep.rows.iter().map(|r| r.envelope[0]).collect();
        assert!(env[0] > env[1] && env[1] > env[2]);
    }

    #[test]
    fn h4_passes_for_noisy_builtin_and_is_zero_for_frozen() {
        let (m, _, cfg) = setup(1.0, 10, 1);
        let rep = check_h4(&m, &m.averaged(), &cfg.noise, &[10.0, 100.0], &H4Options { samples: 16, ..Default::default() }).unwrap();
        assert!(rep.pass, "{rep:?}");
        let lin = make_linear_model(LinearParams { a: 1.0, b: 0.0, c: 0.5, sigma: 0.4, j0: 0.3 }, 1, &cfg.noise).unwrap();
        let rep = check_h4(&lin, &Frozen::new(&lin), &cfg.noise, &[10.0, 100.0], &H4Options { samples: 8, ..Default::default() }).unwrap();
        assert!(rep.rows.iter().all(|r| r.ratio == [0.0; 3]));
    }

    #[test]
    fn both_equations_satisfy_h3() {
        use crate::coefficients::{check_h3, H3Options};
        let (m, _, cfg) = setup(1.0, 10, 1);
        let opts = H3Options { trials: 200, seed: 8, horizon: 3.0, ..Default::default() };
        assert!(check_h3(&m, &cfg.noise, &opts).unwrap().pass);
        let avg = m.averaged();
        assert!(check_h3(&AsCoefficients(&avg), &cfg.noise, &opts).unwrap().pass);
        let log = m.clone().with_modulus(Modulus::loglog(0.05).unwrap()).unwrap();
        assert!(check_h3(&log, &cfg.noise, &opts).unwrap().pass);
    }

    #[test]
    fn eps_one_matches_unscaled_solve_bitwise() {
        let (m, fam, cfg) = setup(2.0, 40, 32);
        let a = solve_standard(&m, &fam, &cfg, 1.0).unwrap();
        let b = solve_euler_mild(&m, &fam, &cfg).unwrap();
        for j in 0..=40 {
            assert_eq!(a.law(j).points(), b.law(j).points());
        }
    }

    #[test]
    fn eps_zero_gives_homogeneous_path() {
        let (m, fam, cfg) = setup(2.0, 40, 8);
        let a = solve_standard(&m, &fam, &cfg, 0.0).unwrap();
        let h = solve_caratheodory(&m, &fam, &cfg, 0).unwrap();
        for j in 0..=40 {
            for (x, y) in a.law(j).points().iter().zip(h.law(j).points()) {
                assert!((x - y).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn frozen_time_independent_model_is_identical() {
        let (_, fam, cfg) = setup(2.0, 40, 16);
        let lin = make_linear_model(LinearParams { a: 1.0, b: 0.0, c: 0.5, sigma: 0.4, j0: 0.3 }, 1, &cfg.noise).unwrap();
        let frozen = Frozen::new(&lin);
        let x = solve_standard(&lin, &fam, &cfg, 0.3).unwrap();
        let z = solve_averaged(&frozen, &fam, &cfg, 0.3).unwrap();
        for j in 0..=40 {
            assert_eq!(x.law(j).points(), z.law(j).points());
        }
        let rep = averaging_sweep(&lin, &frozen, &fam, &cfg, &[0.5, 0.25], &SweepOptions { bootstrap: 50, ..Default::default() }).unwrap();
        assert_eq!(rep.errors, vec![0.0, 0.0]);
        assert!(rep.pass && rep.slope.is_none());
    }

    #[test]
    fn horizon_overflow_is_a_config_error() {
        let (m, fam, cfg) = setup(2.0, 40, 4);
        let opts = SweepOptions { l: Some(1.5), ..Default::default() };
        let err = averaging_sweep(&m, &m.averaged(), &fam, &cfg, &[0.5, 0.25], &opts).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn small_sweep_decreases() {
        let (m, fam, cfg) = setup(4.0, 160, 200);
        let rep = averaging_sweep(&m, &m.averaged(), &fam, &cfg, &[0.2, 0.1, 0.05], &SweepOptions { bootstrap: 200, ..Default::default() }).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.horizons[2] - 4.0).abs() < 1e-12);
    }
}
