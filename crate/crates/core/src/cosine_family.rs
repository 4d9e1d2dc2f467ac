//! Cosine and sine operator families built from the spectral data of a
//! self-adjoint, nonpositive generator on ℝ^d.
//!
//! With `A = U diag(λ) Uᵀ` and `a_i = √(−λ_i)` the families act diagonally:
//!
//! ```text
//! C(t) = U diag(cos(a_i t)) Uᵀ
//! S(t) = U diag(sin(a_i t) / a_i) Uᵀ        (entry t when a_i = 0)
//! A S(t) = U diag(−a_i sin(a_i t)) Uᵀ
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::noise::{stream_rng, Purpose, StreamId};
use crate::quadrature::GaussLegendre;

const ORTHO_TOL: f64 = 1e-10;

/// Generator `A` given by its eigen-decomposition, together with the damping
/// operator `B`.
#[derive(Debug, Clone)]
pub struct SpectralGenerator {
    eigenvalues: Vec<f64>,
    freqs: Vec<f64>,
    basis: DMatrix<f64>,
    identity_basis: bool,
    damping: DMatrix<f64>,
    damping_bound: f64,
}

impl SpectralGenerator {
    /// Builds a generator. When `damping_bound` is `None` it is estimated by
    /// power iteration; a supplied bound must dominate that estimate.
    pub fn new(
        eigenvalues: Vec<f64>,
        basis: DMatrix<f64>,
        damping: DMatrix<f64>,
        damping_bound: Option<f64>,
    ) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 {
            return Err(Error::InvalidParameter("generator dimension must be positive".into()));
        }
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: basis.nrows() });
        }
        if damping.nrows() != d || damping.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: damping.nrows() });
        }
        if let Some(&bad) = eigenvalues.iter().find(|l| !l.is_finite() || **l > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "generator eigenvalues must be finite and nonpositive, got {bad}"
            )));
        }
        let gram = basis.transpose() * &basis;
        let defect = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if defect > ORTHO_TOL {
            return Err(Error::InvalidParameter(format!(
                "basis is not orthogonal (max |UᵀU - I| = {defect:e})"
            )));
        }
        let estimate = operator_norm(&damping);
        let damping_bound = match damping_bound {
            Some(m) if m + 1e-9 * (1.0 + m) < estimate => {
                return Err(Error::InvalidParameter(format!(
                    "damping bound {m} is below the operator norm estimate {estimate}"
                )))
            }
            Some(m) => m,
            None => estimate,
        };
        let identity_basis = basis == DMatrix::<f64>::identity(d, d);
        let freqs = eigenvalues.iter().map(|l| (-l).sqrt()).collect();
        Ok(Self {
            eigenvalues,
            freqs,
            basis,
            identity_basis,
            damping,
            damping_bound,
        })
    }

    /// Diagonal generator (`U = I`) with scalar damping `B = b·I`.
    pub fn diagonal(eigenvalues: Vec<f64>, damping: f64) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(
            eigenvalues,
            DMatrix::identity(d, d),
            DMatrix::identity(d, d) * damping,
            None,
        )
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `√(−λ_i)` per mode.
    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn damping(&self) -> &DMatrix<f64> {
        &self.damping
    }

    pub fn damping_bound(&self) -> f64 {
        self.damping_bound
    }

    /// `Uᵀ x`, written into `out`.
    pub fn to_spectral(&self, x: &[f64], out: &mut [f64]) {
        if self.identity_basis {
            out.copy_from_slice(x);
            return;
        }
        let d = self.dim();
        for (j, o) in out.iter_mut().enumerate().take(d) {
            let col = self.basis.column(j);
            *o = col.iter().zip(x).map(|(u, v)| u * v).sum();
        }
    }

    /// `U y`, written into `out`.
    pub fn from_spectral(&self, y: &[f64], out: &mut [f64]) {
        if self.identity_basis {
            out.copy_from_slice(y);
            return;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &yj) in y.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(self.basis.column(j).iter()) {
                *o += u * yj;
            }
        }
    }

    /// `B x`, written into `out`.
    pub fn apply_damping(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (r, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|c| self.damping[(r, c)] * x[c]).sum();
        }
    }

    /// `A x`.
    pub fn apply_generator(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut y = vec![0.0; x.len()];
        self.to_spectral(x, &mut y);
        for (v, l) in y.iter_mut().zip(&self.eigenvalues) {
            *v *= l;
        }
        let mut out = vec![0.0; x.len()];
        self.from_spectral(&y, &mut out);
        Ok(out)
    }
}

/// Largest singular value via power iteration on `BᵀB`.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    let mtm = m.transpose() * m;
    let mut v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.1 * i as f64));
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..1000 {
        let w = &mtm * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / nw;
        if (next - est).abs() <= 1e-15 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    est.max(0.0).sqrt()
}

/// Cosine family on `[0, horizon]` with its certified constants.
#[derive(Debug, Clone)]
pub struct CosineFamily {
    generator: SpectralGenerator,
    horizon: f64,
    m1_bound: f64,
    ns_bound: f64,
}

impl CosineFamily {
    pub fn new(generator: SpectralGenerator, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        // sup_t ‖S(t)‖² + ‖C(t)‖² ≤ 1 + max_i sup_t |s_i(t)|², since ‖C(t)‖ ≤ 1.
        let sine_sup = generator
            .frequencies()
            .iter()
            .map(|&a| {
                if a == 0.0 {
                    horizon
                } else if a * horizon >= std::f64::consts::FRAC_PI_2 {
                    1.0 / a
                } else {
                    (a * horizon).sin() / a
                }
            })
            .fold(0.0, f64::max);
        let m1_bound = 1.0 + sine_sup * sine_sup;
        let mut fam = Self {
            generator,
            horizon,
            m1_bound,
            ns_bound: 1.0,
        };
        let sampled = (0..=4096)
            .map(|i| {
                let t = horizon * i as f64 / 4096.0;
                fam.sine_norm(t).powi(2) + fam.cosine_norm(t).powi(2)
            })
            .fold(0.0, f64::max);
        if sampled > fam.m1_bound * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "M1 certification failed: sampled {sampled} > bound {}",
                fam.m1_bound
            )));
        }
        fam.m1_bound = fam.m1_bound.max(sampled);
        Ok(fam)
    }

    pub fn generator(&self) -> &SpectralGenerator {
        &self.generator
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `M₁ ≥ sup_{[0,T]} ‖S(t)‖² + ‖C(t)‖²`.
    pub fn m1_bound(&self) -> f64 {
        self.m1_bound
    }

    /// Lipschitz constant of `t ↦ S(t)`.
    pub fn ns_bound(&self) -> f64 {
        self.ns_bound
    }

    #[inline]
    pub fn cos_entry(&self, mode: usize, t: f64) -> f64 {
        let a = self.generator.freqs[mode];
        if a == 0.0 {
            1.0
        } else {
            (a * t).cos()
        }
    }

    #[inline]
    pub fn sin_entry(&self, mode: usize, t: f64) -> f64 {
        let a = self.generator.freqs[mode];
        if a == 0.0 {
            t
        } else {
            (a * t).sin() / a
        }
    }

    #[inline]
    pub fn a_sin_entry(&self, mode: usize, t: f64) -> f64 {
        let a = self.generator.freqs[mode];
        if a == 0.0 {
            0.0
        } else {
            -a * (a * t).sin()
        }
    }

    /// `‖C(t)‖`, exact under an orthogonal basis.
    pub fn cosine_norm(&self, t: f64) -> f64 {
        (0..self.dim())
            .map(|i| self.cos_entry(i, t).abs())
            .fold(0.0, f64::max)
    }

    /// `‖S(t)‖`, exact under an orthogonal basis.
    pub fn sine_norm(&self, t: f64) -> f64 {
        (0..self.dim())
            .map(|i| self.sin_entry(i, t).abs())
            .fold(0.0, f64::max)
    }

    fn apply_diag(&self, x: &[f64], entry: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut y = vec![0.0; x.len()];
        self.generator.to_spectral(x, &mut y);
        for (i, v) in y.iter_mut().enumerate() {
            *v *= entry(i);
        }
        let mut out = vec![0.0; x.len()];
        self.generator.from_spectral(&y, &mut out);
        Ok(out)
    }

    pub fn cosine_apply(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        finite_time(t)?;
        self.apply_diag(x, |i| self.cos_entry(i, t))
    }

    pub fn sine_apply(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        finite_time(t)?;
        self.apply_diag(x, |i| self.sin_entry(i, t))
    }

    /// `A S(t) x`.
    pub fn a_sine_apply(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        finite_time(t)?;
        self.apply_diag(x, |i| self.a_sin_entry(i, t))
    }

    /// Residuals of the defining identities over `grid × trials` random unit
    /// vectors. Integrals are evaluated by composite 64-point Gauss-Legendre
    /// quadrature of the operator-valued integrands.
    pub fn identity_residuals(
        &self,
        grid: &[(f64, f64)],
        trials: usize,
        seed: u64,
    ) -> Result<IdentityResiduals> {
        if grid.is_empty() {
            return Err(Error::InvalidParameter("identity grid must be nonempty".into()));
        }
        let d = self.dim();
        let mut rng = stream_rng(StreamId::new(seed, 0), Purpose::Trials);
        let vectors: Vec<Vec<f64>> = (0..trials.max(1))
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let gl = GaussLegendre::new(64);
        let a_max = self.generator.freqs.iter().cloned().fold(0.0, f64::max);
        let mut rep = IdentityResiduals {
            ns_bound: self.ns_bound,
            ..Default::default()
        };
        let mut sint_diag = vec![0.0; d];
        let mut cint_diag = vec![0.0; d];
        for &(t, s) in grid {
            finite_time(t)?;
            finite_time(s)?;
            let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
            quad_diag(&gl, a_max, lo, hi, d, &mut sint_diag, |i, u| self.sin_entry(i, u));
            quad_diag(&gl, a_max, 0.0, t, d, &mut cint_diag, |i, u| self.cos_entry(i, u));
            for x in &vectors {
                let ctps = self.cosine_apply(t + s, x)?;
                let ctms = self.cosine_apply(t - s, x)?;
                let cs_x = self.cosine_apply(s, x)?;
                let cccs = self.cosine_apply(t, &cs_x)?;
                let dal: Vec<f64> = ctps
                    .iter()
                    .zip(&ctms)
                    .zip(&cccs)
                    .map(|((a, b), c)| a + b - 2.0 * c)
                    .collect();
                rep.dalembert = rep.dalembert.max(norm(&dal));

                let ss_x = self.sine_apply(s, x)?;
                let ass = self.a_sine_apply(t, &ss_x)?;
                let p5: Vec<f64> = ctps
                    .iter()
                    .zip(&ctms)
                    .zip(&ass)
                    .map(|((a, b), c)| a - b - 2.0 * c)
                    .collect();
                rep.product_identity = rep.product_identity.max(norm(&p5));

                // A ∫_lo^hi S(u) x du = [C(hi) - C(lo)] x
                let int_s = self.apply_diag(x, |i| sint_diag[i])?;
                let lhs = self.generator.apply_generator(&int_s)?;
                let chi = self.cosine_apply(hi, x)?;
                let clo = self.cosine_apply(lo, x)?;
                let p2: Vec<f64> = lhs
                    .iter()
                    .zip(&chi)
                    .zip(&clo)
                    .map(|((l, a), b)| l - (a - b))
                    .collect();
                rep.generator_integral = rep.generator_integral.max(norm(&p2));

                // S(t) x = ∫_0^t C(u) x du
                let st = self.sine_apply(t, x)?;
                let int_c = self.apply_diag(x, |i| cint_diag[i])?;
                let si: Vec<f64> = st.iter().zip(&int_c).map(|(a, b)| a - b).collect();
                rep.sine_integral = rep.sine_integral.max(norm(&si));

                if t != s {
                    let diff: Vec<f64> = st.iter().zip(&ss_x).map(|(a, b)| a - b).collect();
                    rep.sine_lipschitz = rep.sine_lipschitz.max(norm(&diff) / (t - s).abs());
                }
            }
        }
        Ok(rep)
    }
}

fn quad_diag(
    gl: &GaussLegendre,
    a_max: f64,
    lo: f64,
    hi: f64,
    d: usize,
    out: &mut [f64],
    entry: impl Fn(usize, f64) -> f64,
) {
    let panels = ((a_max * (hi - lo).abs()) / 16.0).ceil().max(1.0) as usize;
    for (i, o) in out.iter_mut().enumerate().take(d) {
        *o = gl.integrate_composite(lo, hi, panels, |u| entry(i, u));
    }
}

fn finite_time(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("time must be finite, got {t}")))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximum residual per identity, in the Euclidean norm of ℝ^d.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentityResiduals {
    /// `C(t+s) + C(t−s) − 2C(t)C(s)`.
    pub dalembert: f64,
    /// `C(t+s) − C(t−s) − 2AS(t)S(s)`.
    pub product_identity: f64,
    /// `A∫ₛʳ S(u)du − [C(r) − C(s)]`.
    pub generator_integral: f64,
    /// `S(t) − ∫₀ᵗ C(u)du`.
    pub sine_integral: f64,
    /// `max ‖S(t)x − S(s)x‖ / |t − s|`.
    pub sine_lipschitz: f64,
    pub ns_bound: f64,
}

impl IdentityResiduals {
    pub fn max_residual(&self) -> f64 {
        self.dalembert
            .max(self.product_identity)
            .max(self.generator_integral)
            .max(self.sine_integral)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual() <= tol && self.sine_lipschitz <= self.ns_bound * (1.0 + 1e-12)
    }
}
