//! Interacting-particle solvers for the mild form of the mean-field
//! equation: a left-point mild Euler scheme, the delayed (Carathéodory)
//! approximation sequence and a Picard fixed-point reference.
//!
//! All schemes evaluate the mild form as a full convolution sum at each
//! output node,
//!
//! ```text
//! X(t_m) = S(t_m)X₁ + [C(t_m) − S(t_m)B]X₀
//!        + Σ_{j<m} C(t_m − t_j) B Y_j h
//!        + Σ_{j<m} S(t_m − t_j) [F(t_j, Y_j, ν_j) h + G(t_j, Y_j, ν_j) ΔW_j − h ∫J ν(dz)]
//!        + Σ_{τ ≤ t_m} S(t_m − τ) J(τ, Y_{j(τ)}, ν_{j(τ)}, z_τ)
//! ```
//!
//! where `(Y_j, ν_j)` is the coefficient argument of each scheme: the current
//! state and empirical law (Euler), the state one delay `1/k` earlier
//! (Carathéodory) or the previous iterate (Picard). Work is done in the
//! eigenbasis of the generator, where the kernels are diagonal.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coefficients::Coefficients;
use crate::cosine_family::CosineFamily;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, map_mut, Parallelism};
pub use crate::grid::TimeGrid;
use crate::measure::{w2_exact_with_cap, w2_quantile_1d, EmpiricalMeasure, EXACT_CAP};
use crate::noise::{sample_path, stream_rng, NoiseModel, NoisePath, Purpose, StreamId};
use crate::stats;

/// Divergence guard on particle norms.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Number of mark samples used when a model has no closed-form compensator.
pub const DEFAULT_MARK_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMild,
    /// Delayed sequence with delay `1/k`; `k = 0` is the homogeneous term.
    Caratheodory { k: u32 },
    Picard { iters: usize },
}

/// How law distances are computed in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W2Mode {
    /// Quantile formula in 1-D, exact assignment up to the cap, else skipped.
    Auto,
    Exact,
    Entropic { reg: f64, iters: usize },
}

/// Gaussian initial laws `X₀ ~ N(m₀, s₀²I)`, `X₁ ~ N(m₁, s₁²I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub x0_mean: Vec<f64>,
    pub x0_std: f64,
    pub x1_mean: Vec<f64>,
    pub x1_std: f64,
}

impl InitialLaw {
    pub fn deterministic(x0: Vec<f64>, x1: Vec<f64>) -> Self {
        Self { x0_mean: x0, x0_std: 0.0, x1_mean: x1, x1_std: 0.0 }
    }

    fn sample(&self, stream: StreamId) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream_rng(stream, Purpose::Initial);
        let mut draw = |mean: &[f64], std: f64| -> Vec<f64> {
            mean.iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    if std == 0.0 { *m } else { m + std * z }
                })
                .collect()
        };
        let x0 = draw(&self.x0_mean, self.x0_std);
        let x1 = draw(&self.x1_mean, self.x1_std);
        (x0, x1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub n_particles: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    pub initial: InitialLaw,
    pub exec: Parallelism,
    pub w2_mode: W2Mode,
    /// Mark sample size for Monte Carlo compensators.
    pub mark_samples: usize,
}

impl SolveConfig {
    pub fn new(grid: TimeGrid, n_particles: usize, seed: u64, noise: NoiseModel, initial: InitialLaw) -> Self {
        Self {
            scheme: Scheme::EulerMild,
            grid,
            n_particles,
            seed,
            noise,
            initial,
            exec: Parallelism::Rayon,
            w2_mode: W2Mode::Auto,
            mark_samples: DEFAULT_MARK_SAMPLES,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_exec(mut self, exec: Parallelism) -> Self {
        self.exec = exec;
        self
    }

    /// Number of grid steps per delay `1/k`; errors unless `1/k ∈ hℤ`.
    pub fn delay_steps(&self, k: u32) -> Result<usize> {
        delay_steps(&self.grid, k)
    }
}

pub fn delay_steps(grid: &TimeGrid, k: u32) -> Result<usize> {
    if k == 0 {
        return Ok(0);
    }
    let h = grid.step();
    let delay = 1.0 / k as f64;
    let ratio = delay / h;
    let steps = ratio.round();
    if steps >= 1.0 && (ratio - steps).abs() <= 1e-9 * ratio.max(1.0) {
        return Ok(steps as usize);
    }
    let nearest = steps.max(1.0);
    Err(Error::Config(format!(
        "delay 1/k = {delay} is not a multiple of h = {h}; nearest valid h = {} (n_steps = {})",
        delay / nearest,
        grid.horizon() * k as f64 * nearest
    )))
}

/// Particle paths on the grid; column `j` is the empirical law at `t_j`.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    dim: usize,
    laws: Vec<EmpiricalMeasure>,
    seed: u64,
    noise: NoiseModel,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.laws[0].len()
    }

    /// Number of computed nodes (may stop short of the grid end).
    pub fn n_nodes(&self) -> usize {
        self.laws.len()
    }

    pub fn law(&self, node: usize) -> &EmpiricalMeasure {
        &self.laws[node]
    }

    pub fn state(&self, particle: usize, node: usize) -> &[f64] {
        self.laws[node].point(particle)
    }

    pub fn path(&self, particle: usize) -> Vec<Vec<f64>> {
        self.laws.iter().map(|l| l.point(particle).to_vec()).collect()
    }

    /// Regenerates the noise realisation that drove `particle`.
    pub fn noise_path(&self, particle: usize) -> NoisePath {
        sample_path(&self.noise, &self.grid, StreamId::new(self.seed, particle as u64))
    }

    pub fn mean(&self, node: usize) -> &[f64] {
        self.laws[node].mean()
    }

    pub fn second_moment(&self, node: usize) -> f64 {
        self.laws[node].second_moment()
    }

    /// `sup_j ‖X^i(t_j)‖²` per particle.
    pub fn sup_sq_per_particle(&self) -> Vec<f64> {
        (0..self.n_particles())
            .map(|i| {
                self.laws
                    .iter()
                    .map(|l| l.point(i).iter().map(|v| v * v).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// `E sup_j ‖X(t_j)‖²`.
    pub fn e_sup_sq(&self) -> f64 {
        stats::mean(&self.sup_sq_per_particle())
    }

    /// `E sup_{i ≤ j} ‖X(t_i)‖²` for each node `j`.
    pub fn running_e_sup_sq(&self) -> Vec<f64> {
        let n = self.n_particles();
        let mut running = vec![0.0f64; n];
        self.laws
            .iter()
            .map(|l| {
                for (i, r) in running.iter_mut().enumerate() {
                    *r = (*r).max(l.point(i).iter().map(|v| v * v).sum::<f64>());
                }
                stats::mean(&running)
            })
            .collect()
    }
}

/// `sup_j ‖X^i(t_j) − Y^i(t_j)‖²` per particle over the first `nodes` nodes.
pub fn sup_sq_difference(a: &ParticleEnsemble, b: &ParticleEnsemble, nodes: usize) -> Vec<f64> {
    let nodes = nodes.min(a.n_nodes()).min(b.n_nodes());
    (0..a.n_particles())
        .map(|i| {
            (0..nodes)
                .map(|j| {
                    a.state(i, j)
                        .iter()
                        .zip(b.state(i, j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Multipliers applied to the coefficients: drift by `drift`, diffusion and
/// jumps by `noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scaling {
    pub drift: f64,
    pub noise: f64,
}

impl Scaling {
    pub const UNIT: Scaling = Scaling { drift: 1.0, noise: 1.0 };

    pub fn averaging(eps: f64) -> Self {
        Scaling { drift: eps, noise: eps.sqrt() }
    }
}

/// Diagonal kernel tables `C(l·h)`, `S(l·h)` in the eigenbasis.
struct Kernels {
    d: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Kernels {
    fn new(fam: &CosineFamily, grid: &TimeGrid) -> Self {
        let d = fam.dim();
        let n = grid.n_steps();
        let h = grid.step();
        let mut cos = Vec::with_capacity((n + 1) * d);
        let mut sin = Vec::with_capacity((n + 1) * d);
        for l in 0..=n {
            let t = l as f64 * h;
            for i in 0..d {
                cos.push(fam.cos_entry(i, t));
                sin.push(fam.sin_entry(i, t));
            }
        }
        Self { d, cos, sin }
    }

    #[inline]
    fn cos_row(&self, l: usize) -> &[f64] {
        &self.cos[l * self.d..(l + 1) * self.d]
    }

    #[inline]
    fn sin_row(&self, l: usize) -> &[f64] {
        &self.sin[l * self.d..(l + 1) * self.d]
    }
}

/// Shared read-only context of one solve.
struct Context<'a> {
    cs: &'a dyn Coefficients,
    fam: &'a CosineFamily,
    grid: TimeGrid,
    kernels: Kernels,
    noise: &'a NoiseModel,
    scaling: Scaling,
    quad_marks: Option<Vec<f64>>,
}

impl<'a> Context<'a> {
    fn new(cs: &'a dyn Coefficients, fam: &'a CosineFamily, cfg: &'a SolveConfig, scaling: Scaling) -> Result<Self> {
        let d = fam.dim();
        if cs.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: cs.dim() });
        }
        if cs.noise_dim() != cfg.noise.wiener.dim() {
            return Err(Error::DimensionMismatch {
                expected: cs.noise_dim(),
                found: cfg.noise.wiener.dim(),
            });
        }
        if cfg.initial.x0_mean.len() != d || cfg.initial.x1_mean.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: cfg.initial.x0_mean.len() });
        }
        if cfg.n_particles == 0 {
            return Err(Error::InvalidParameter("n_particles must be positive".into()));
        }
        if cfg.grid.horizon() > fam.horizon() * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "grid horizon {} exceeds the cosine family horizon {}",
                cfg.grid.horizon(),
                fam.horizon()
            )));
        }
        let quad_marks = match &cfg.noise.jumps {
            Some(spec) => {
                let probe = EmpiricalMeasure::origin(d);
                let mut buf = vec![0.0; d];
                let closed = cs.jump_compensator(0.0, &vec![0.0; d], &probe, spec, &mut buf);
                (!closed).then(|| spec.quadrature_marks(cfg.seed, cfg.mark_samples.max(1)))
            }
            None => None,
        };
        Ok(Self {
            cs,
            fam,
            grid: cfg.grid,
            kernels: Kernels::new(fam, &cfg.grid),
            noise: &cfg.noise,
            scaling,
            quad_marks,
        })
    }

    fn d(&self) -> usize {
        self.fam.dim()
    }

    fn k(&self) -> usize {
        self.noise.wiener.dim()
    }
}

/// Per-particle accumulator of convolution sources in the eigenbasis.
struct ParticleRun {
    noise: NoisePath,
    jump_steps: Vec<usize>,
    y0: Vec<f64>,
    y1: Vec<f64>,
    by0: Vec<f64>,
    x0: Vec<f64>,
    /// `Uᵀ·B Y_j h`, row-major by step.
    c_src: Vec<f64>,
    /// `Uᵀ·(F h + G ΔW − h ∫J ν)`, row-major by step.
    s_src: Vec<f64>,
    /// Jump times with `Uᵀ J` values, in time order.
    jump_vals: Vec<(f64, usize, Vec<f64>)>,
    scratch: Scratch,
}

struct Scratch {
    f: Vec<f64>,
    g: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    spec: Vec<f64>,
}

impl ParticleRun {
    fn new(ctx: &Context<'_>, cfg: &SolveConfig, particle: usize) -> Self {
        let d = ctx.d();
        let k = ctx.k();
        let stream = StreamId::new(cfg.seed, particle as u64);
        let noise = sample_path(&cfg.noise, &cfg.grid, stream);
        let jump_steps = noise.jump_times.iter().map(|&t| cfg.grid.step_containing(t)).collect();
        let (x0, x1) = cfg.initial.sample(stream);
        let gen = ctx.fam.generator();
        let mut y0 = vec![0.0; d];
        let mut y1 = vec![0.0; d];
        let mut by0 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        gen.to_spectral(&x0, &mut y0);
        gen.to_spectral(&x1, &mut y1);
        gen.apply_damping(&x0, &mut tmp);
        gen.to_spectral(&tmp, &mut by0);
        let n = cfg.grid.n_steps();
        Self {
            noise,
            jump_steps,
            y0,
            y1,
            by0,
            x0,
            c_src: vec![0.0; n * d],
            s_src: vec![0.0; n * d],
            jump_vals: Vec::new(),
            scratch: Scratch {
                f: vec![0.0; d],
                g: vec![0.0; d * k],
                v: vec![0.0; d],
                w: vec![0.0; d],
                spec: vec![0.0; d],
            },
        }
    }

    fn reset_sources(&mut self) {
        self.c_src.fill(0.0);
        self.s_src.fill(0.0);
        self.jump_vals.clear();
    }

    /// Records the sources of step `j` given the coefficient argument.
    fn add_step(&mut self, ctx: &Context<'_>, j: usize, x: &[f64], mu: &EmpiricalMeasure) {
        let d = ctx.d();
        let k = ctx.k();
        let t = ctx.grid.node(j);
        let h = ctx.grid.node(j + 1) - t;
        let gen = ctx.fam.generator();
        let Scaling { drift: eps_f, noise: eps_n } = ctx.scaling;
        let s = &mut self.scratch;

        // C-kernel source: B Y_j h
        gen.apply_damping(x, &mut s.v);
        s.v.iter_mut().for_each(|v| *v *= h);
        gen.to_spectral(&s.v, &mut s.spec);
        self.c_src[j * d..(j + 1) * d].copy_from_slice(&s.spec);

        // S-kernel source: ε F h + √ε (G ΔW − h ∫J ν)
        ctx.cs.drift(t, x, mu, &mut s.f);
        ctx.cs.diffusion(t, x, mu, &mut s.g);
        let dw = self.noise.increment(j);
        for r in 0..d {
            let gdw: f64 = s.g[r * k..(r + 1) * k].iter().zip(dw).map(|(a, b)| a * b).sum();
            s.v[r] = eps_f * s.f[r] * h + eps_n * gdw;
        }
        if let Some(spec) = &ctx.noise.jumps {
            if !ctx.cs.jump_compensator(t, x, mu, spec, &mut s.w) {
                let marks = ctx.quad_marks.as_ref().expect("mark sample prepared");
                s.w.fill(0.0);
                let m = marks.len() / spec.mark_dim();
                for z in marks.chunks(spec.mark_dim()) {
                    ctx.cs.jump(t, x, mu, z, &mut s.f);
                    s.w.iter_mut().zip(&s.f).for_each(|(a, b)| *a += b);
                }
                let scale = spec.intensity() / m as f64;
                s.w.iter_mut().for_each(|a| *a *= scale);
            }
            for r in 0..d {
                s.v[r] -= eps_n * h * s.w[r];
            }
        }
        gen.to_spectral(&s.v, &mut s.spec);
        self.s_src[j * d..(j + 1) * d].copy_from_slice(&s.spec);

        for (idx, &step) in self.jump_steps.iter().enumerate() {
            if step != j {
                continue;
            }
            let tau = self.noise.jump_times[idx];
            ctx.cs.jump(tau, x, mu, self.noise.mark(idx), &mut s.f);
            s.f.iter_mut().for_each(|v| *v *= eps_n);
            gen.to_spectral(&s.f, &mut s.spec);
            self.jump_vals.push((tau, step, s.spec.clone()));
        }
    }

    /// State at node `m` from the sources of steps `< m`, in original coordinates.
    fn state_at(&mut self, ctx: &Context<'_>, m: usize, out: &mut [f64]) {
        let d = ctx.d();
        let t = ctx.grid.node(m);
        let fam = ctx.fam;
        let s = &mut self.scratch;
        for i in 0..d {
            let c = fam.cos_entry(i, t);
            let sn = fam.sin_entry(i, t);
            s.spec[i] = sn * self.y1[i] + c * self.y0[i] - sn * self.by0[i];
        }
        for l in 0..m {
            let cr = ctx.kernels.cos_row(m - l);
            let sr = ctx.kernels.sin_row(m - l);
            let cs = &self.c_src[l * d..(l + 1) * d];
            let ss = &self.s_src[l * d..(l + 1) * d];
            for i in 0..d {
                s.spec[i] += cr[i] * cs[i] + sr[i] * ss[i];
            }
        }
        for (tau, step, val) in &self.jump_vals {
            if *step >= m {
                continue;
            }
            for i in 0..d {
                s.spec[i] += fam.sin_entry(i, t - tau) * val[i];
            }
        }
        ctx.fam.generator().from_spectral(&s.spec, out);
    }
}

fn guard(x: &[f64], step: usize, particle: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step, particle });
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { step, particle, norm });
    }
    Ok(())
}

fn collect_law(d: usize, states: Vec<Result<Vec<f64>>>) -> Result<EmpiricalMeasure> {
    let mut flat = Vec::with_capacity(states.len() * d);
    for s in states {
        flat.extend(s?);
    }
    EmpiricalMeasure::uniform(d, flat)
}

fn init_runs(ctx: &Context<'_>, cfg: &SolveConfig) -> Vec<ParticleRun> {
    map_indexed(cfg.n_particles, cfg.exec, |i| ParticleRun::new(ctx, cfg, i))
}

fn initial_law(ctx: &Context<'_>, runs: &[ParticleRun]) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::uniform(ctx.d(), runs.iter().flat_map(|r| r.x0.iter().copied()).collect())
}

/// Forward-in-time solve where coefficients see the state `lag` steps back
/// (clamped to the initial datum). Stops after node `until`.
pub(crate) fn integrate_forward(
    cs: &dyn Coefficients,
    fam: &CosineFamily,
    cfg: &SolveConfig,
    lag: usize,
    scaling: Scaling,
    until: usize,
) -> Result<ParticleEnsemble> {
    let ctx = Context::new(cs, fam, cfg, scaling)?;
    let d = ctx.d();
    let until = until.min(cfg.grid.n_steps());
    let mut runs = init_runs(&ctx, cfg);
    let mut laws = Vec::with_capacity(until + 1);
    laws.push(initial_law(&ctx, &runs)?);
    for j in 0..until {
        let q = j.saturating_sub(lag);
        let arg_law = &laws[q];
        let states = map_mut(&mut runs, cfg.exec, |i, run| {
            run.add_step(&ctx, j, arg_law.point(i), arg_law);
            let mut x = vec![0.0; d];
            run.state_at(&ctx, j + 1, &mut x);
            guard(&x, j + 1, i)?;
            Ok(x)
        });
        let law = collect_law(d, states)?;
        laws.push(law);
    }
    Ok(ParticleEnsemble {
        grid: cfg.grid,
        dim: d,
        laws,
        seed: cfg.seed,
        noise: cfg.noise.clone(),
    })
}

fn homogeneous(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig) -> Result<ParticleEnsemble> {
    let ctx = Context::new(cs, fam, cfg, Scaling::UNIT)?;
    let d = ctx.d();
    let mut runs = init_runs(&ctx, cfg);
    let mut laws = Vec::with_capacity(cfg.grid.n_steps() + 1);
    for m in 0..=cfg.grid.n_steps() {
        let states = map_mut(&mut runs, cfg.exec, |_, run| {
            let mut x = vec![0.0; d];
            run.state_at(&ctx, m, &mut x);
            Ok(x)
        });
        laws.push(collect_law(d, states)?);
    }
    Ok(ParticleEnsemble {
        grid: cfg.grid,
        dim: d,
        laws,
        seed: cfg.seed,
        noise: cfg.noise.clone(),
    })
}

/// Left-point mild Euler scheme.
pub fn solve_euler_mild(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig) -> Result<ParticleEnsemble> {
    integrate_forward(cs, fam, cfg, 0, Scaling::UNIT, cfg.grid.n_steps())
}

/// Delayed approximation `X_k`: every coefficient argument is taken at
/// `t − 1/k`, with `X_k = X₀` on `[−1, 0]`. `k = 0` gives the homogeneous
/// term `S(t)X₁ + (C(t) − S(t)B)X₀`.
pub fn solve_caratheodory(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig, k: u32) -> Result<ParticleEnsemble> {
    if k == 0 {
        return homogeneous(cs, fam, cfg);
    }
    let lag = cfg.delay_steps(k)?;
    integrate_forward(cs, fam, cfg, lag, Scaling::UNIT, cfg.grid.n_steps())
}

/// Dispatches on `cfg.scheme`.
pub fn solve(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig) -> Result<ParticleEnsemble> {
    match cfg.scheme {
        Scheme::EulerMild => solve_euler_mild(cs, fam, cfg),
        Scheme::Caratheodory { k } => solve_caratheodory(cs, fam, cfg, k),
        Scheme::Picard { iters } => picard_reference(cs, fam, cfg, iters).map(|p| p.ensemble),
    }
}

/// Picard iterates of the mild-form map.
#[derive(Debug, Clone)]
pub struct PicardResult {
    pub ensemble: ParticleEnsemble,
    /// `E sup_j ‖X^{(n+1)} − X^{(n)}‖²` for each iteration.
    pub increments: Vec<f64>,
    pub diverged: bool,
}

/// Iterates the mild map from the homogeneous guess with common noise and
/// returns iterate `iters`. Flags divergence when an increment grows more
/// than tenfold.
pub fn picard_reference(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig, iters: usize) -> Result<PicardResult> {
    if iters == 0 {
        return Err(Error::InvalidParameter("Picard needs at least one iteration".into()));
    }
    let ctx = Context::new(cs, fam, cfg, Scaling::UNIT)?;
    let d = ctx.d();
    let n = cfg.grid.n_steps();
    let mut runs = init_runs(&ctx, cfg);
    let mut current = homogeneous(cs, fam, cfg)?;
    let mut increments = Vec::with_capacity(iters);
    let mut diverged = false;
    for _ in 0..iters {
        let prev = &current;
        let paths = map_mut(&mut runs, cfg.exec, |i, run| -> Result<Vec<f64>> {
            run.reset_sources();
            for j in 0..n {
                run.add_step(&ctx, j, prev.state(i, j), prev.law(j));
            }
            let mut path = vec![0.0; (n + 1) * d];
            for m in 0..=n {
                let mut x = vec![0.0; d];
                run.state_at(&ctx, m, &mut x);
                guard(&x, m, i)?;
                path[m * d..(m + 1) * d].copy_from_slice(&x);
            }
            Ok(path)
        });
        let mut paths_ok = Vec::with_capacity(paths.len());
        for p in paths {
            paths_ok.push(p?);
        }
        let laws = (0..=n)
            .map(|m| {
                EmpiricalMeasure::uniform(
                    d,
                    paths_ok.iter().flat_map(|p| p[m * d..(m + 1) * d].iter().copied()).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let next = ParticleEnsemble {
            grid: cfg.grid,
            dim: d,
            laws,
            seed: cfg.seed,
            noise: cfg.noise.clone(),
        };
        let inc = stats::mean(&sup_sq_difference(&next, &current, n + 1));
        if let Some(&last) = increments.last() {
            if last > 0.0 && inc > 10.0 * last {
                diverged = true;
            }
        }
        increments.push(inc);
        current = next;
    }
    Ok(PicardResult {
        ensemble: current,
        increments,
        diverged,
    })
}

/// One row of the Cauchy table.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyRow {
    pub k_coarse: u32,
    pub k_fine: u32,
    /// `E sup_j ‖X_fine(t_j) − X_coarse(t_j)‖²`.
    pub distance: f64,
    pub std_error: f64,
    /// `𝒲₂` between the terminal laws, when computable.
    pub terminal_w2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyTable {
    pub rows: Vec<CauchyRow>,
    /// `E sup_j ‖X_k(t_j)‖²` per `k`.
    pub sup_moments: Vec<(u32, f64)>,
    pub pass: bool,
}

/// Distances between consecutive members of the delayed sequence, all
/// driven by the same noise.
pub fn cauchy_diagnostic(cs: &dyn Coefficients, fam: &CosineFamily, cfg: &SolveConfig, k_list: &[u32]) -> Result<CauchyTable> {
    if k_list.len() < 2 {
        return Err(Error::InvalidParameter("cauchy diagnostic needs at least two k values".into()));
    }
    if k_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("k values must be nondecreasing".into()));
    }
    for &k in k_list {
        cfg.delay_steps(k)?;
    }
    let mut rows = Vec::new();
    let mut sup_moments = Vec::new();
    let mut prev = solve_caratheodory(cs, fam, cfg, k_list[0])?;
    sup_moments.push((k_list[0], prev.e_sup_sq()));
    for w in k_list.windows(2) {
        let next = solve_caratheodory(cs, fam, cfg, w[1])?;
        sup_moments.push((w[1], next.e_sup_sq()));
        let diffs = sup_sq_difference(&next, &prev, cfg.grid.n_steps() + 1);
        let last = cfg.grid.n_steps();
        rows.push(CauchyRow {
            k_coarse: w[0],
            k_fine: w[1],
            distance: stats::mean(&diffs),
            std_error: stats::std_error(&diffs),
            terminal_w2: law_distance(next.law(last), prev.law(last), cfg.w2_mode),
        });
        prev = next;
    }
    let nonincreasing = rows.windows(2).all(|w| {
        let slack = 2.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].distance <= w[0].distance + slack
    });
    let first = rows.first().map_or(0.0, |r| r.distance);
    let last = rows.last().map_or(0.0, |r| r.distance);
    let pass = nonincreasing && (rows.len() < 2 || last <= first / 4.0);
    Ok(CauchyTable { rows, sup_moments, pass })
}

/// `𝒲₂` between two empirical laws according to `mode`; `None` when the
/// chosen method does not apply.
pub fn law_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure, mode: W2Mode) -> Option<f64> {
    match mode {
        W2Mode::Auto => {
            if a.dim() == 1 {
                w2_quantile_1d(a, b).ok()
            } else {
                w2_exact_with_cap(a, b, EXACT_CAP, Parallelism::Rayon).ok()
            }
        }
        W2Mode::Exact => w2_exact_with_cap(a, b, EXACT_CAP, Parallelism::Rayon).ok(),
        W2Mode::Entropic { reg, iters } => crate::measure::w2_entropic(a, b, reg, iters).ok().map(|r| r.value),
    }
}

/// Ratio of the mean-square increment to its a-priori shape.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// `max_{(s,t)} E‖X(t) − X(s)‖² / (|t−s|² + ‖S((t−s)/2)‖² + |t−s|)` over
/// pairs of node indices.
pub fn increment_diagnostic(ens: &ParticleEnsemble, fam: &CosineFamily, pairs: &[(usize, usize)]) -> Result<IncrementReport> {
    let mut ratios = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        if s >= ens.n_nodes() || t >= ens.n_nodes() {
            return Err(Error::InvalidParameter(format!("node pair ({s}, {t}) outside the ensemble")));
        }
        let ts = ens.grid().node(s);
        let tt = ens.grid().node(t);
        let gap = (tt - ts).abs();
        let denom = gap * gap + fam.sine_norm(0.5 * gap).powi(2) + gap;
        let num = (0..ens.n_particles())
            .map(|i| {
                ens.state(i, t)
                    .iter()
                    .zip(ens.state(i, s))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / ens.n_particles() as f64;
        ratios.push(if denom == 0.0 { 0.0 } else { num / denom });
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(IncrementReport { ratios, max_ratio })
}

/// Stability of the increment constant between a grid and its refinement.
pub fn increment_refinement_stable(coarse: &IncrementReport, fine: &IncrementReport) -> bool {
    let (a, b) = (coarse.max_ratio, fine.max_ratio);
    if a == 0.0 && b == 0.0 {
        return true;
    }
    a.max(b) <= 2.0 * a.min(b)
}
