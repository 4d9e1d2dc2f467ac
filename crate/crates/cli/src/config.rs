//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may appear once;
//! unknown keys are rejected by name. Values are validated on parse, so a
//! returned [`ExperimentConfig`] can always be turned into solver inputs.

use std::collections::HashMap;
use std::path::PathBuf;

use mvjump_core::averaging::{AveragingModel, AveragingParams};
use mvjump_core::coefficients::{LinearModel, LinearParams, Modulus, LOGLOG_MAX_DELTA};
use mvjump_core::cosine_family::{CosineFamily, SpectralGenerator};
use mvjump_core::exec::Parallelism;
use mvjump_core::noise::{JumpSpec, MarkDistribution, NoiseModel, QWienerSpec};
use mvjump_core::solver::{InitialLaw, Scheme, SolveConfig, TimeGrid, W2Mode, DEFAULT_MARK_SAMPLES};

use mvjump_core::DMatrix;

fn scaled_identity(d: usize, s: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = s;
    }
    m
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("duplicate key `{key}` on line {second} (first set on line {first})")]
    Duplicate { key: String, first: usize, second: usize },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{}`{key}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { key: &'static str, line: Option<usize>, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

const KEYS: &[&str] = &[
    "dim", "eigenvalues", "damping", "q_eigenvalues", "jump_intensity", "jump_mark", "seed", "model", "a", "b", "c",
    "sigma", "j0", "kappa", "modulus", "delta", "gamma", "out_dir", "n_particles", "n_steps", "T", "x0_mean",
    "x0_std", "x1_mean", "x1_std", "scheme", "k", "picard_iters", "w2_mode", "w2_reg", "mark_samples", "eps",
    "alpha", "L",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModulusKind {
    Linear { gamma: f64 },
    Log { delta: f64 },
    LogLog { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
    /// Row-major `d × d`.
    pub damping: Vec<f64>,
    pub q_eigenvalues: Vec<f64>,
    pub jump_intensity: f64,
    pub jump_mark: MarkDistribution,
    pub seed: u64,
    pub model: ModelKind,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sigma: f64,
    pub j0: f64,
    pub kappa: f64,
    pub modulus: ModulusKind,
    pub out_dir: PathBuf,
    pub n_particles: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub x0_mean: Vec<f64>,
    pub x0_std: f64,
    pub x1_mean: Vec<f64>,
    pub x1_std: f64,
    pub scheme: Scheme,
    pub w2_mode: W2Mode,
    pub mark_samples: usize,
    pub eps: Vec<f64>,
    pub alpha: f64,
    pub l: Option<f64>,
}

struct Entries {
    map: HashMap<&'static str, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &'static str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn invalid(key: &'static str, line: usize, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { key, line: Some(line), message: message.into() }
    }

    fn get<T: std::str::FromStr>(&self, key: &'static str) -> Result<Option<(usize, T)>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(|x| Some((line, x)))
                .map_err(|_| Self::invalid(key, line, format!("cannot parse {v:?}"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &'static str) -> Result<(usize, T)> {
        self.get(key)?.ok_or(ConfigError::Missing(key))
    }

    fn f64_or(&self, key: &'static str, default: f64) -> Result<(Option<usize>, f64)> {
        let v: Option<(usize, f64)> = self.get(key)?;
        if let Some((line, x)) = v {
            if !x.is_finite() {
                return Err(Self::invalid(key, line, "must be finite"));
            }
        }
        Ok(v.map_or((None, default), |(l, x)| (Some(l), x)))
    }

    fn list(&self, key: &'static str) -> Result<Option<(usize, Vec<f64>)>> {
        let Some((line, v)) = self.raw(key) else { return Ok(None) };
        let vals = v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Self::invalid(key, line, format!("cannot parse {v:?} as a comma-separated list")))?;
        if vals.is_empty() || vals.iter().any(|x| !x.is_finite()) {
            return Err(Self::invalid(key, line, "values must be finite"));
        }
        Ok(Some((line, vals)))
    }
}

fn check(cond: bool, key: &'static str, line: Option<usize>, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::Invalid { key, line, message: message.into() })
    }
}

/// Expands a one-element list to length `d`.
fn broadcast(key: &'static str, line: usize, vals: Vec<f64>, d: usize) -> Result<Vec<f64>> {
    match vals.len() {
        1 => Ok(vec![vals[0]; d]),
        n if n == d => Ok(vals),
        n => Err(ConfigError::Invalid { key, line: Some(line), message: format!("expected 1 or {d} values, found {n}") }),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map: HashMap<&'static str, (usize, String)> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax { line, text: raw.to_string() });
        };
        let k = k.trim();
        let v = v.trim();
        let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
            return Err(ConfigError::UnknownKey { line, key: k.to_string() });
        };
        if v.is_empty() {
            return Err(ConfigError::Syntax { line, text: raw.to_string() });
        }
        if let Some((first, _)) = map.get(key) {
            return Err(ConfigError::Duplicate { key: key.to_string(), first: *first, second: line });
        }
        map.insert(key, (line, v.to_string()));
    }
    build(&Entries { map })
}

fn build(e: &Entries) -> Result<ExperimentConfig> {
    let (dim_line, dim): (usize, usize) = e.required("dim")?;
    check(dim >= 1, "dim", Some(dim_line), "must be at least 1")?;
    let (np_line, n_particles): (usize, usize) = e.required("n_particles")?;
    check(n_particles >= 1, "n_particles", Some(np_line), "must be at least 1")?;
    let (ns_line, n_steps): (usize, usize) = e.required("n_steps")?;
    check(n_steps >= 1, "n_steps", Some(ns_line), "must be at least 1")?;
    let (t_line, horizon): (usize, f64) = e.required("T")?;
    check(horizon > 0.0 && horizon.is_finite(), "T", Some(t_line), format!("must be positive, got {horizon}"))?;

    let (a_line, a) = e.f64_or("a", 1.0)?;
    let (b_line, b) = e.f64_or("b", 0.0)?;
    let eigenvalues = match e.list("eigenvalues")? {
        Some((line, vals)) => {
            let vals = broadcast("eigenvalues", line, vals, dim)?;
            if let Some(bad) = vals.iter().find(|&&l| l > 0.0) {
                return Err(ConfigError::Invalid {
                    key: "eigenvalues",
                    line: Some(line),
                    message: format!("eigenvalues must be <= 0, found {bad}"),
                });
            }
            if let Some(al) = a_line {
                check(vals.iter().all(|&l| l == -a * a), "a", Some(al), "conflicts with `eigenvalues`; set only one of them")?;
            }
            vals
        }
        None => vec![-a * a; dim],
    };
    let damping = match e.list("damping")? {
        Some((line, vals)) => {
            let m = match vals.len() {
                1 => scaled_identity(dim, vals[0]),
                n if n == dim * dim => vals,
                n => {
                    return Err(ConfigError::Invalid {
                        key: "damping",
                        line: Some(line),
                        message: format!("expected a scalar or {} row-major entries, found {n}", dim * dim),
                    })
                }
            };
            if let Some(bl) = b_line {
                check(m == scaled_identity(dim, b), "b", Some(bl), "conflicts with `damping`; set only one of them")?;
            }
            m
        }
        None => scaled_identity(dim, b),
    };

    let q_eigenvalues = match e.list("q_eigenvalues")? {
        Some((line, q)) => {
            check(q.iter().all(|&x| x >= 0.0), "q_eigenvalues", Some(line), "must be nonnegative")?;
            q
        }
        None => vec![1.0; dim],
    };
    let (il, jump_intensity) = e.f64_or("jump_intensity", 0.0)?;
    check(jump_intensity >= 0.0, "jump_intensity", il, "must be nonnegative")?;
    let jump_mark = match e.raw("jump_mark") {
        Some((line, v)) => parse_mark(line, v)?,
        None => MarkDistribution::Dirac(0.0),
    };
    let seed = e.get::<u64>("seed")?.map_or(0, |(_, s)| s);

    let model = match e.raw("model") {
        None | Some((_, "linear")) => ModelKind::Linear,
        Some((_, "averaging")) => ModelKind::Averaging,
        Some((line, "custom-plugin")) => {
            return Err(Entries::invalid(
                "model",
                line,
                "custom-plugin coefficients are supplied through the library API, not the config file",
            ))
        }
        Some((line, other)) => {
            return Err(Entries::invalid("model", line, format!("expected linear|averaging, found {other:?}")))
        }
    };
    let (_, c) = e.f64_or("c", 0.0)?;
    let (sl, sigma) = e.f64_or("sigma", 0.0)?;
    check(sigma >= 0.0, "sigma", sl, "must be nonnegative")?;
    let (_, j0) = e.f64_or("j0", 0.0)?;
    let (_, kappa) = e.f64_or("kappa", 0.0)?;

    let delta: Option<(usize, f64)> = e.get("delta")?;
    let (gl, gamma) = e.f64_or("gamma", 1.0)?;
    check(gamma > 0.0, "gamma", gl, "must be positive")?;
    let modulus = match e.raw("modulus") {
        None | Some((_, "linear")) => ModulusKind::Linear { gamma },
        Some((_, kind @ ("log" | "loglog"))) => {
            let (dl, d) = delta.ok_or(ConfigError::Missing("delta"))?;
            let (upper, label) = if kind == "log" {
                ((-1.0f64).exp(), "1/e")
            } else {
                (LOGLOG_MAX_DELTA, "0.10646 (where the log-log modulus stops increasing)")
            };
            check(
                d > 0.0 && d <= upper,
                "delta",
                Some(dl),
                format!("{kind} modulus needs delta in (0, {label}], got {d}"),
            )?;
            if kind == "log" {
                ModulusKind::Log { delta: d }
            } else {
                ModulusKind::LogLog { delta: d }
            }
        }
        Some((line, other)) => {
            return Err(Entries::invalid("modulus", line, format!("expected linear|log|loglog, found {other:?}")))
        }
    };

    let out_dir = PathBuf::from(e.raw("out_dir").map_or(".", |(_, v)| v));
    let vec_or = |key: &'static str, default: f64| -> Result<Vec<f64>> {
        match e.list(key)? {
            Some((line, v)) => broadcast(key, line, v, dim),
            None => Ok(vec![default; dim]),
        }
    };
    let x0_mean = vec_or("x0_mean", 1.0)?;
    let x1_mean = vec_or("x1_mean", 0.0)?;
    let (l0, x0_std) = e.f64_or("x0_std", 0.0)?;
    check(x0_std >= 0.0, "x0_std", l0, "must be nonnegative")?;
    let (l1, x1_std) = e.f64_or("x1_std", 0.0)?;
    check(x1_std >= 0.0, "x1_std", l1, "must be nonnegative")?;

    let k = e.get::<u32>("k")?;
    let picard = e.get::<usize>("picard_iters")?;
    let scheme = match e.raw("scheme") {
        None | Some((_, "euler")) => Scheme::EulerMild,
        Some((_, "caratheodory")) => Scheme::Caratheodory { k: k.ok_or(ConfigError::Missing("k"))?.1 },
        Some((_, "picard")) => {
            let (line, iters) = picard.ok_or(ConfigError::Missing("picard_iters"))?;
            check(iters >= 1, "picard_iters", Some(line), "must be at least 1")?;
            Scheme::Picard { iters }
        }
        Some((line, other)) => {
            return Err(Entries::invalid("scheme", line, format!("expected euler|caratheodory|picard, found {other:?}")))
        }
    };
    if let Scheme::Caratheodory { k } = scheme {
        let grid = TimeGrid::new(horizon, n_steps).expect("validated above");
        mvjump_core::solver::delay_steps(&grid, k)
            .map_err(|err| ConfigError::Invalid { key: "k", line: e.raw("k").map(|(l, _)| l), message: err.to_string() })?;
    }

    let (rl, reg) = e.f64_or("w2_reg", 0.05)?;
    check(reg > 0.0, "w2_reg", rl, "must be positive")?;
    let w2_mode = match e.raw("w2_mode") {
        None | Some((_, "auto")) => W2Mode::Auto,
        Some((_, "exact")) => W2Mode::Exact,
        Some((_, "entropic")) => W2Mode::Entropic { reg, iters: 2000 },
        Some((line, other)) => {
            return Err(Entries::invalid("w2_mode", line, format!("expected auto|exact|entropic, found {other:?}")))
        }
    };
    let mark_samples = match e.get::<usize>("mark_samples")? {
        Some((line, m)) => {
            check(m >= 1, "mark_samples", Some(line), "must be at least 1")?;
            m
        }
        None => DEFAULT_MARK_SAMPLES,
    };
    let eps = match e.list("eps")? {
        Some((line, v)) => {
            check_eps(&v, Some(line))?;
            v
        }
        None => vec![0.1, 0.05, 0.025, 0.0125],
    };
    let (al, alpha) = e.f64_or("alpha", 0.5)?;
    check(alpha > 0.0 && alpha < 1.0, "alpha", al, "must lie in (0, 1)")?;
    let l = match e.get::<f64>("L")? {
        Some((line, l)) => {
            check(l > 0.0 && l.is_finite(), "L", Some(line), "must be positive")?;
            Some(l)
        }
        None => None,
    };

    Ok(ExperimentConfig {
        dim,
        eigenvalues,
        damping,
        q_eigenvalues,
        jump_intensity,
        jump_mark,
        seed,
        model,
        a,
        b,
        c,
        sigma,
        j0,
        kappa,
        modulus,
        out_dir,
        n_particles,
        n_steps,
        horizon,
        x0_mean,
        x0_std,
        x1_mean,
        x1_std,
        scheme,
        w2_mode,
        mark_samples,
        eps,
        alpha,
        l,
    })
}

/// Every `ε` must lie in `(0, 1]`.
pub fn check_eps(eps: &[f64], line: Option<usize>) -> Result<()> {
    for &x in eps {
        check(x > 0.0 && x <= 1.0, "eps", line, format!("eps must lie in (0, 1], got {x}"))?;
    }
    Ok(())
}

fn parse_mark(line: usize, v: &str) -> Result<MarkDistribution> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    let nums: std::result::Result<Vec<f64>, _> = parts.iter().skip(1).map(|s| s.parse::<f64>()).collect();
    let bad = || Entries::invalid("jump_mark", line, format!("expected `dirac z0`, `gauss m s` or `uniform a b`, found {v:?}"));
    let nums = nums.map_err(|_| bad())?;
    let mark = match (parts.first().copied(), nums.as_slice()) {
        (Some("dirac"), [z]) => MarkDistribution::Dirac(*z),
        (Some("gauss"), [m, s]) if *s >= 0.0 => MarkDistribution::Gauss { mean: *m, std: *s },
        (Some("uniform"), [lo, hi]) if lo < hi => MarkDistribution::Uniform { lo: *lo, hi: *hi },
        _ => return Err(bad()),
    };
    Ok(mark)
}

impl ExperimentConfig {
    pub fn generator(&self) -> mvjump_core::Result<SpectralGenerator> {
        let d = self.dim;
        SpectralGenerator::new(
            self.eigenvalues.clone(),
            DMatrix::identity(d, d),
            DMatrix::from_row_slice(d, d, &self.damping),
            None,
        )
    }

    pub fn family(&self) -> mvjump_core::Result<CosineFamily> {
        CosineFamily::new(self.generator()?, self.horizon)
    }

    pub fn noise(&self) -> mvjump_core::Result<NoiseModel> {
        let wiener = QWienerSpec::new(self.q_eigenvalues.clone())?;
        let jumps = if self.jump_intensity > 0.0 {
            Some(JumpSpec::new(self.jump_intensity, self.jump_mark, self.dim)?)
        } else {
            None
        };
        Ok(NoiseModel::new(wiener, jumps))
    }

    pub fn modulus(&self) -> mvjump_core::Result<Modulus> {
        match self.modulus {
            ModulusKind::Linear { gamma } => Modulus::linear(gamma),
            ModulusKind::Log { delta } => Modulus::log(delta),
            ModulusKind::LogLog { delta } => Modulus::loglog(delta),
        }
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.n_steps).expect("validated on parse")
    }

    pub fn linear_model(&self) -> mvjump_core::Result<LinearModel> {
        let p = LinearParams { a: self.a, b: self.b, c: self.c, sigma: self.sigma, j0: self.j0 };
        LinearModel::new(p, self.dim, &self.noise()?)?.with_modulus(self.modulus()?)
    }

    pub fn averaging_model(&self) -> mvjump_core::Result<AveragingModel> {
        let p = AveragingParams { a: self.a, b: self.b, kappa: self.kappa, c: self.c, sigma: self.sigma, j0: self.j0 };
        AveragingModel::new(p, self.dim, &self.noise()?)?.with_modulus(self.modulus()?)
    }

    pub fn solve_config(&self, seed: u64, exec: Parallelism) -> mvjump_core::Result<SolveConfig> {
        let initial = InitialLaw {
            x0_mean: self.x0_mean.clone(),
            x0_std: self.x0_std,
            x1_mean: self.x1_mean.clone(),
            x1_std: self.x1_std,
        };
        let mut cfg = SolveConfig::new(self.grid(), self.n_particles, seed, self.noise()?, initial)
            .with_scheme(self.scheme)
            .with_exec(exec);
        cfg.w2_mode = self.w2_mode;
        cfg.mark_samples = self.mark_samples;
        Ok(cfg)
    }
}
