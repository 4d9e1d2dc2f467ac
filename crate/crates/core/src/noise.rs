//! Driving noises: Q-Wiener increments and a compensated Poisson random
//! measure with finite intensity.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(master seed, purpose)` and selected by the particle index, so a noise
//! path is a pure function of `(seed, particle)` regardless of threading.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// `(master seed, particle index)` pair naming one reproducible stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub master: u64,
    pub particle: u64,
}

impl StreamId {
    pub fn new(master: u64, particle: u64) -> Self {
        Self { master, particle }
    }
}

/// Tag separating independent uses of one stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Wiener,
    Jumps,
    Initial,
    MarkQuadrature,
    Trials,
    Bootstrap,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Wiener => 0x5749_454e,
            Purpose::Jumps => 0x4a55_4d50,
            Purpose::Initial => 0x494e_4954,
            Purpose::MarkQuadrature => 0x4d41_524b,
            Purpose::Trials => 0x5452_4941,
            Purpose::Bootstrap => 0x424f_4f54,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator for `(stream, purpose)`.
pub fn stream_rng(stream: StreamId, purpose: Purpose) -> ChaCha8Rng {
    let mut state = stream.master ^ purpose.tag().rotate_left(32);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream.particle);
    rng
}

/// Covariance data of a Q-Wiener process on `ℝ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QWienerSpec {
    q: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl QWienerSpec {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidParameter("q_eigenvalues must be nonempty".into()));
        }
        if let Some(bad) = q.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "q_eigenvalues must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(Self { q, basis: None })
    }

    pub fn with_basis(mut self, basis: DMatrix<f64>) -> Result<Self> {
        let k = self.q.len();
        if basis.nrows() != k || basis.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, found: basis.nrows() });
        }
        let defect = (basis.transpose() * &basis - DMatrix::<f64>::identity(k, k)).amax();
        if defect > 1e-10 {
            return Err(Error::InvalidParameter("Wiener basis is not orthogonal".into()));
        }
        self.basis = Some(basis);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.q
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Squared Hilbert-Schmidt norm on `Q^{1/2}(K)` of a row-major `d × k`
    /// operator: the Frobenius norm of `G V diag(√q)`.
    pub fn hs_norm_sq(&self, g: &[f64], d: usize) -> f64 {
        let k = self.dim();
        let mut total = 0.0;
        for r in 0..d {
            let row = &g[r * k..(r + 1) * k];
            for (c, qc) in self.q.iter().enumerate() {
                let entry = match &self.basis {
                    None => row[c],
                    Some(v) => (0..k).map(|m| row[m] * v[(m, c)]).sum(),
                };
                total += entry * entry * qc;
            }
        }
        total
    }
}

/// Law of a single mark coordinate; marks in `ℝ^m` have i.i.d. coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkDistribution {
    Dirac(f64),
    Gauss { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl MarkDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Dirac(z) => z,
            MarkDistribution::Gauss { mean, .. } => mean,
            MarkDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            MarkDistribution::Dirac(z) => z * z,
            MarkDistribution::Gauss { mean, std } => mean * mean + std * std,
            MarkDistribution::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkDistribution::Dirac(z) => z,
            MarkDistribution::Gauss { mean, std } => {
                let n: f64 = rng.sample(StandardNormal);
                mean + std * n
            }
            MarkDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Poisson random measure with finite total intensity `ν(Z) = λ_tot`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSpec {
    intensity: f64,
    mark: MarkDistribution,
    mark_dim: usize,
}

impl JumpSpec {
    pub fn new(intensity: f64, mark: MarkDistribution, mark_dim: usize) -> Result<Self> {
        if !(intensity > 0.0 && intensity.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jump intensity must be positive and finite, got {intensity}"
            )));
        }
        if mark_dim == 0 {
            return Err(Error::InvalidParameter("mark dimension must be positive".into()));
        }
        match mark {
            MarkDistribution::Gauss { std, .. } if std < 0.0 => {
                return Err(Error::InvalidParameter("gauss mark std must be nonnegative".into()))
            }
            MarkDistribution::Uniform { lo, hi } if hi < lo => {
                return Err(Error::InvalidParameter("uniform mark needs lo <= hi".into()))
            }
            _ => {}
        }
        Ok(Self { intensity, mark, mark_dim })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn mark(&self) -> MarkDistribution {
        self.mark
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    /// `E[z]` under the normalised mark law `ν/λ_tot` (per coordinate).
    pub fn mark_mean(&self) -> f64 {
        self.mark.mean()
    }

    /// `∫_Z ‖z‖² ν(dz)`.
    pub fn moment2(&self) -> f64 {
        self.intensity * self.mark_dim as f64 * self.mark.second_moment()
    }

    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for z in out.iter_mut() {
            *z = self.mark.sample(rng);
        }
    }

    /// Fixed mark sample used for Monte Carlo integrals against `ν`.
    pub fn quadrature_marks(&self, seed: u64, samples: usize) -> Vec<f64> {
        let mut rng = stream_rng(StreamId::new(seed, u64::MAX), Purpose::MarkQuadrature);
        let mut out = vec![0.0; samples * self.mark_dim];
        for chunk in out.chunks_mut(self.mark_dim) {
            self.sample_mark(&mut rng, chunk);
        }
        out
    }
}

/// Both driving noises of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub wiener: QWienerSpec,
    pub jumps: Option<JumpSpec>,
}

impl NoiseModel {
    pub fn new(wiener: QWienerSpec, jumps: Option<JumpSpec>) -> Self {
        Self { wiener, jumps }
    }

    /// Scalar-mode Wiener process with zero covariance and no jumps.
    pub fn silent(k_dim: usize) -> Self {
        Self {
            wiener: QWienerSpec::new(vec![0.0; k_dim]).expect("zero covariance is valid"),
            jumps: None,
        }
    }
}

/// One realisation of the noises on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub stream: StreamId,
    pub k_dim: usize,
    /// Row-major `n_steps × k_dim`.
    pub wiener_increments: Vec<f64>,
    pub jump_times: Vec<f64>,
    /// Row-major `n_jumps × mark_dim`.
    pub jump_marks: Vec<f64>,
    pub mark_dim: usize,
}

impl NoisePath {
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.wiener_increments[step * self.k_dim..(step + 1) * self.k_dim]
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn mark(&self, jump: usize) -> &[f64] {
        &self.jump_marks[jump * self.mark_dim..(jump + 1) * self.mark_dim]
    }
}

/// Independent Gaussian increments, mode `i` with variance `q_i·h`.
pub fn sample_wiener(spec: &QWienerSpec, grid: &TimeGrid, stream: StreamId) -> Vec<f64> {
    let k = spec.dim();
    let n = grid.n_steps();
    let mut out = vec![0.0; n * k];
    if spec.q.iter().all(|&q| q == 0.0) {
        return out;
    }
    let mut rng = stream_rng(stream, Purpose::Wiener);
    let mut xi = vec![0.0; k];
    for j in 0..n {
        let h = grid.node(j + 1) - grid.node(j);
        for (x, q) in xi.iter_mut().zip(&spec.q) {
            let z: f64 = rng.sample(StandardNormal);
            *x = (q * h).sqrt() * z;
        }
        let row = &mut out[j * k..(j + 1) * k];
        match &spec.basis {
            None => row.copy_from_slice(&xi),
            Some(v) => {
                for (r, o) in row.iter_mut().enumerate() {
                    *o = (0..k).map(|c| v[(r, c)] * xi[c]).sum();
                }
            }
        }
    }
    out
}

/// Jump times (sorted, uniform on `[0, T]`) and marks of a Poisson random
/// measure over `[0, T]`.
pub fn sample_jumps(spec: &JumpSpec, horizon: f64, stream: StreamId) -> (Vec<f64>, Vec<f64>) {
    if horizon <= 0.0 {
        return (Vec::new(), Vec::new());
    }
    let mut rng = stream_rng(stream, Purpose::Jumps);
    let rate = spec.intensity * horizon;
    let count = Poisson::new(rate)
        .map(|p| p.sample(&mut rng) as usize)
        .unwrap_or(0);
    let mut times: Vec<f64> = (0..count).map(|_| horizon * rng.random::<f64>()).collect();
    times.sort_by(f64::total_cmp);
    let mut marks = vec![0.0; count * spec.mark_dim];
    for chunk in marks.chunks_mut(spec.mark_dim) {
        spec.sample_mark(&mut rng, chunk);
    }
    (times, marks)
}

pub fn sample_path(noise: &NoiseModel, grid: &TimeGrid, stream: StreamId) -> NoisePath {
    let wiener_increments = sample_wiener(&noise.wiener, grid, stream);
    let (jump_times, jump_marks, mark_dim) = match &noise.jumps {
        Some(spec) => {
            let (t, m) = sample_jumps(spec, grid.horizon(), stream);
            (t, m, spec.mark_dim)
        }
        None => (Vec::new(), Vec::new(), 0),
    };
    NoisePath {
        stream,
        k_dim: noise.wiener.dim(),
        wiener_increments,
        jump_times,
        jump_marks,
        mark_dim,
    }
}

/// How the compensator `∫_Z integrand ν(dz)` is obtained.
pub enum Compensator<'a> {
    /// Closed form as a function of time.
    ClosedForm(&'a dyn Fn(f64, &mut [f64])),
    /// Monte Carlo over a fixed mark sample of the given size.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-step compensated jump integral
/// `Σ_{τ ∈ (t_j, t_{j+1}]} f(τ, z) − h_j ∫_Z f(t_j, z) ν(dz)`, row-major
/// `n_steps × d`.
pub fn compensated_integral<F>(
    path: &NoisePath,
    spec: &JumpSpec,
    grid: &TimeGrid,
    d: usize,
    integrand: F,
    compensator: Compensator<'_>,
) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = grid.n_steps();
    let mut out = vec![0.0; n * d];
    let mut buf = vec![0.0; d];
    for (idx, &tau) in path.jump_times.iter().enumerate() {
        let j = grid.step_containing(tau);
        integrand(tau, path.mark(idx), &mut buf);
        if let Some(bad) = buf.iter().position(|v| !v.is_finite()) {
            return Err(Error::Coefficient {
                sample: idx,
                reason: format!("jump integrand non-finite in coordinate {bad}"),
            });
        }
        for (o, v) in out[j * d..(j + 1) * d].iter_mut().zip(&buf) {
            *o += v;
        }
    }
    let marks = match compensator {
        Compensator::MonteCarlo { samples, seed } => Some((spec.quadrature_marks(seed, samples), samples)),
        Compensator::ClosedForm(_) => None,
    };
    let mut comp = vec![0.0; d];
    for j in 0..n {
        let t = grid.node(j);
        let h = grid.node(j + 1) - t;
        match (&compensator, &marks) {
            (Compensator::ClosedForm(f), _) => f(t, &mut comp),
            (_, Some((zs, m))) => {
                comp.iter_mut().for_each(|c| *c = 0.0);
                for z in zs.chunks(spec.mark_dim) {
                    integrand(t, z, &mut buf);
                    for (c, v) in comp.iter_mut().zip(&buf) {
                        *c += v;
                    }
                }
                let scale = spec.intensity / *m as f64;
                comp.iter_mut().for_each(|c| *c *= scale);
            }
            _ => unreachable!(),
        }
        for (o, c) in out[j * d..(j + 1) * d].iter_mut().zip(&comp) {
            *o -= h * c;
        }
    }
    Ok(out)
}
