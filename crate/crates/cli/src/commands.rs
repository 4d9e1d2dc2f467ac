//! Subcommand definitions and their drivers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mvjump_core::averaging::{averaging_sweep, AveragedCoefficients, AveragingModel, Frozen, SweepOptions};
use mvjump_core::coefficients::{check_h3, Coefficients, H3Options, LinearModel, Modulus};
use mvjump_core::cosine_family::{CosineFamily, SpectralGenerator};
use mvjump_core::exec::{configure_threads, Parallelism};
use mvjump_core::inequalities::{
    bihari_bound, fuzz_power_inequality, gronwall_bound, kunita_p2_check, BihariProblem, KunitaOptions,
};
use mvjump_core::measure::{w2_entropic, w2_exact, w2_quantile_1d, EmpiricalMeasure, EXACT_CAP};
use mvjump_core::noise::{JumpSpec, MarkDistribution};
use mvjump_core::solver::{cauchy_diagnostic, solve, TimeGrid};

use crate::config::{check_eps, parse_config, ExperimentConfig, ModelKind};
use crate::output::{num, opt, Sink, Table};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mvjump", version, about = "Particle experiments for second-order McKean-Vlasov equations with jumps")]
pub struct Cli {
    /// Master seed; overrides the `seed` key of a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the data-parallel core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the cosine-family identities at random time pairs.
    Identities(IdentitiesArgs),
    /// Simulate the particle system and write paths and moments.
    Simulate(SimulateArgs),
    /// Run the Carathéodory convergence table.
    Cauchy(CauchyArgs),
    /// Sweep ε and compare the standard and averaged equations.
    Averaging(AveragingArgs),
    /// Wasserstein-2 distance between two point clouds stored as CSV.
    W2(W2Args),
    /// Fuzz and spot-check the analytic inequalities.
    CheckInequalities(InequalityArgs),
}

#[derive(Debug, Args)]
pub struct IdentitiesArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "identities.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 32)]
    pub vectors: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "paths.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "moments.csv")]
    pub moments: PathBuf,
    /// Particles written to the paths table.
    #[arg(long, default_value_t = 16)]
    pub max_paths: usize,
}

#[derive(Debug, Args)]
pub struct CauchyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub k: Vec<u32>,
    #[arg(long, default_value = "cauchy.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AveragingArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated, strictly decreasing; defaults to the config list.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub l: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct W2Args {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, conflicts_with = "entropic")]
    pub exact: bool,
    /// Entropic regularisation; selects the Sinkhorn surrogate.
    #[arg(long, value_name = "REG")]
    pub entropic: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InequalityArgs {
    /// Number of random tuples for the power inequality (accepts `1e6`).
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    pub fuzz: usize,
    #[arg(long, default_value_t = 10_000, value_parser = parse_count)]
    pub replicas: usize,
    #[arg(long, default_value = "inequalities.csv")]
    pub out: PathBuf,
}

fn parse_count(s: &str) -> Result<usize, String> {
    let x: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(format!("expected a nonnegative integer, got {s}"))
    }
}

struct Run {
    seed: u64,
    exec: Parallelism,
    started: Instant,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        configure_threads(t);
    }
    let run = |seed: u64| Run { seed: cli.seed.unwrap_or(seed), exec: Parallelism::Rayon, started: Instant::now() };
    match &cli.command {
        Command::Identities(a) => {
            let cfg = a.config.as_deref().map(load).transpose()?;
            identities(a, cfg.as_ref(), &run(cfg.as_ref().map_or(0, |c| c.seed)))
        }
        Command::Simulate(a) => {
            let cfg = load(&a.config)?;
            simulate(a, &cfg, &run(cfg.seed))
        }
        Command::Cauchy(a) => {
            let cfg = load(&a.config)?;
            cauchy(a, &cfg, &run(cfg.seed))
        }
        Command::Averaging(a) => {
            let cfg = load(&a.config)?;
            averaging(a, &cfg, &run(cfg.seed))
        }
        Command::W2(a) => w2(a, &run(0)),
        Command::CheckInequalities(a) => inequalities(a, &run(0)),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    Ok(parse_config(&text)?)
}

fn sink(path: &Path, cfg: Option<&ExperimentConfig>) -> Sink {
    Sink::resolve(path, cfg.map(|c| c.out_dir.as_path()))
}

/// The coefficient set selected by the `model` key.
enum Model {
    Linear(LinearModel),
    Averaging(AveragingModel),
}

impl Model {
    fn build(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        Ok(match cfg.model {
            ModelKind::Linear => Model::Linear(cfg.linear_model()?),
            ModelKind::Averaging => Model::Averaging(cfg.averaging_model()?),
        })
    }

    fn coefficients(&self) -> &dyn Coefficients {
        match self {
            Model::Linear(m) => m,
            Model::Averaging(m) => m,
        }
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "true"
    } else {
        "false"
    }
}

fn identities(a: &IdentitiesArgs, cfg: Option<&ExperimentConfig>, run: &Run) -> Result<(), CliError> {
    let fam = match cfg {
        Some(c) => c.family()?,
        None => CosineFamily::new(SpectralGenerator::diagonal(vec![-1.0], 0.0)?, 1.0)?,
    };
    if a.points == 0 || a.vectors == 0 {
        return Err(CliError::Input("--points and --vectors must be positive".into()));
    }
    // Additive recurrence with the plastic-number constants: a low-discrepancy
    // cover of [0, T]² that is identical on every run.
    let horizon = fam.horizon();
    let (g1, g2) = (0.754_877_666_246_692_7, 0.569_840_290_998_053_3);
    let pairs: Vec<(f64, f64)> = (1..=a.points)
        .map(|i| {
            let i = i as f64;
            (horizon * (0.5 + g1 * i).fract(), horizon * (0.5 + g2 * i).fract())
        })
        .collect();
    let res = fam.identity_residuals(&pairs, a.vectors, run.seed)?;
    let cos_sup = pairs.iter().flat_map(|&(t, s)| [fam.cosine_norm(t), fam.cosine_norm(s)]).fold(0.0, f64::max);
    let m1_ok = cos_sup <= fam.m1_bound() * (1.0 + 1e-12);

    let mut table = Table::new(&["identity", "value", "bound", "pass"])?;
    for (name, v) in [
        ("dalembert", res.dalembert),
        ("product", res.product_identity),
        ("generator_integral", res.generator_integral),
        ("sine_integral", res.sine_integral),
    ] {
        table.row([name.to_string(), num(v), num(a.tol), verdict(v <= a.tol).into()])?;
    }
    let lip_ok = res.sine_lipschitz <= res.ns_bound * (1.0 + 1e-12);
    table.row(["sine_lipschitz".into(), num(res.sine_lipschitz), num(res.ns_bound), verdict(lip_ok).into()])?;
    table.row(["cosine_norm".into(), num(cos_sup), num(fam.m1_bound()), verdict(m1_ok).into()])?;
    table.note("points", a.points);
    table.note("vectors", a.vectors);
    let pass = res.passes(a.tol) && m1_ok;
    table.note("pass", pass);
    table.finish(&sink(&a.out, cfg), run.seed, run.started)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("identity residual {} exceeds {}", res.max_residual(), a.tol)))
    }
}

fn simulate(a: &SimulateArgs, cfg: &ExperimentConfig, run: &Run) -> Result<(), CliError> {
    let model = Model::build(cfg)?;
    let fam = cfg.family()?;
    let noise = cfg.noise()?;
    let solve_cfg = cfg.solve_config(run.seed, run.exec)?;
    let h3 = check_h3(
        model.coefficients(),
        &noise,
        &H3Options {
            seed: run.seed,
            horizon: cfg.horizon,
            mark_samples: cfg.mark_samples,
            exec: run.exec,
            ..H3Options::default()
        },
    )?;
    let ens = solve(model.coefficients(), &fam, &solve_cfg)?;
    let grid = ens.grid();
    let d = ens.dim();

    let mut header = vec!["particle".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    let mut paths = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for p in 0..ens.n_particles().min(a.max_paths) {
        for j in 0..ens.n_nodes() {
            let mut row = vec![p.to_string(), num(grid.node(j))];
            row.extend(ens.state(p, j).iter().map(|&x| num(x)));
            paths.row(row)?;
        }
    }
    paths.note("n_particles", ens.n_particles());
    paths.finish(&sink(&a.out, Some(cfg)), run.seed, run.started)?;

    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("mean_{i}")));
    header.push("second_moment".into());
    header.push("e_sup_running".into());
    let mut moments = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    let running = ens.running_e_sup_sq();
    for j in 0..ens.n_nodes() {
        let mut row = vec![num(grid.node(j))];
        row.extend(ens.mean(j).iter().map(|&x| num(x)));
        row.push(num(ens.second_moment(j)));
        row.push(num(running[j]));
        moments.row(row)?;
    }
    moments.note("h3_continuity_ratio", num(h3.continuity_ratio));
    moments.note("h3_growth_ratio", num(h3.growth_ratio));
    moments.note("h3_tolerance", num(h3.tolerance));
    moments.note("h3_pass", h3.pass);
    moments.finish(&sink(&a.moments, Some(cfg)), run.seed, run.started)?;
    if h3.pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("hypothesis check: worst ratio {} at sample {}", h3.worst_ratio, h3.worst_sample)))
    }
}

fn cauchy(a: &CauchyArgs, cfg: &ExperimentConfig, run: &Run) -> Result<(), CliError> {
    let model = Model::build(cfg)?;
    let fam = cfg.family()?;
    let solve_cfg = cfg.solve_config(run.seed, run.exec)?;
    let table = cauchy_diagnostic(model.coefficients(), &fam, &solve_cfg, &a.k)?;
    let mut out = Table::new(&["k_coarse", "k_fine", "distance", "std_error", "terminal_w2"])?;
    for r in &table.rows {
        out.row([r.k_coarse.to_string(), r.k_fine.to_string(), num(r.distance), num(r.std_error), opt(r.terminal_w2)])?;
    }
    for (k, m) in &table.sup_moments {
        out.note(&format!("sup_moment_k{k}"), num(*m));
    }
    out.note("pass", table.pass);
    out.finish(&sink(&a.out, Some(cfg)), run.seed, run.started)?;
    if table.pass {
        Ok(())
    } else {
        Err(CliError::Failed("Carathéodory distances do not contract".into()))
    }
}

fn averaging(a: &AveragingArgs, cfg: &ExperimentConfig, run: &Run) -> Result<(), CliError> {
    let eps = a.eps.clone().unwrap_or_else(|| cfg.eps.clone());
    check_eps(&eps, None)?;
    let alpha = a.alpha.unwrap_or(cfg.alpha);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Input(format!("--alpha must lie in (0, 1), got {alpha}")));
    }
    let opts = SweepOptions { alpha, l: a.l.or(cfg.l), bootstrap: a.bootstrap, ..SweepOptions::default() };
    let fam = cfg.family()?;
    let solve_cfg = cfg.solve_config(run.seed, run.exec)?;
    let report = match Model::build(cfg)? {
        Model::Averaging(m) => {
            let avg = m.averaged();
            averaging_sweep(&m, &avg as &dyn AveragedCoefficients, &fam, &solve_cfg, &eps, &opts)?
        }
        Model::Linear(m) => averaging_sweep(&m, &Frozen::new(&m), &fam, &solve_cfg, &eps, &opts)?,
    };
    let mut out = Table::new(&["eps", "horizon", "error", "ci_low", "ci_high"])?;
    for i in 0..report.eps.len() {
        out.row([
            num(report.eps[i]),
            num(report.horizons[i]),
            num(report.errors[i]),
            num(report.ci_low[i]),
            num(report.ci_high[i]),
        ])?;
    }
    let (lo, hi) = report.slope_ci.map_or((None, None), |(l, h)| (Some(l), Some(h)));
    out.row(["slope".to_string(), String::new(), opt(report.slope), opt(lo), opt(hi)])?;
    out.note("alpha", num(report.alpha));
    out.note("L", num(report.l));
    out.note("monotone", report.monotone);
    out.note("pass", report.pass);
    out.finish(&sink(&a.out, Some(cfg)), run.seed, run.started)?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Failed("averaging errors are not monotone with the required slope".into()))
    }
}

/// Reads a point cloud: one point per row, optional header, `#` comments.
pub fn read_cloud(path: &Path) -> Result<EmpiricalMeasure, CliError> {
    let bad = |msg: String| CliError::Input(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(bad(format!("row {} is not numeric", i + 1))),
        }
    }
    if points.is_empty() {
        return Err(bad("no points".into()));
    }
    if points.iter().any(|p| p.len() != points[0].len() || p.iter().any(|x| !x.is_finite())) {
        return Err(bad("rows must have equal length and finite entries".into()));
    }
    EmpiricalMeasure::from_points(&points).map_err(|e| bad(e.to_string()))
}

fn w2(a: &W2Args, run: &Run) -> Result<(), CliError> {
    let mu = read_cloud(&a.a)?;
    let nu = read_cloud(&a.b)?;
    if mu.dim() != nu.dim() {
        return Err(CliError::Input(format!("clouds have dimensions {} and {}", mu.dim(), nu.dim())));
    }
    let entropic = |reg: f64| -> Result<(&'static str, f64, bool), CliError> {
        let r = w2_entropic(&mu, &nu, reg, a.iters)?;
        Ok(("entropic", r.value, r.converged))
    };
    let (method, value, converged) = if let Some(reg) = a.entropic {
        entropic(reg)?
    } else if a.exact {
        ("exact", w2_exact(&mu, &nu)?, true)
    } else if mu.dim() == 1 && mu.len() == nu.len() {
        ("quantile", w2_quantile_1d(&mu, &nu)?, true)
    } else if mu.len() == nu.len() && mu.len() <= EXACT_CAP {
        ("exact", w2_exact(&mu, &nu)?, true)
    } else {
        entropic(0.05)?
    };
    let mut out = Table::new(&["method", "value", "converged"])?;
    out.row([method.to_string(), num(value), converged.to_string()])?;
    out.finish(&Sink::resolve(&a.out, None), run.seed, run.started)
}

fn inequalities(a: &InequalityArgs, run: &Run) -> Result<(), CliError> {
    let mut out = Table::new(&["check", "trials", "statistic", "threshold", "pass"])?;
    let mut all = true;
    let mut row = |out: &mut Table, name: &str, trials: usize, stat: f64, thr: f64, pass: bool| {
        all &= pass;
        out.row([name.to_string(), trials.to_string(), num(stat), num(thr), verdict(pass).into()])
    };

    let fuzz = fuzz_power_inequality(a.fuzz, run.seed, run.exec);
    row(&mut out, "power_fuzz", fuzz.trials, fuzz.worst_ratio, 1.0, fuzz.failures == 0)?;

    // Linear Ψ: the Bihari bound must reproduce Gronwall's exponential.
    let grid = TimeGrid::new(2.0, 200)?;
    let times = grid.nodes();
    let v: Vec<f64> = times.iter().map(|t| 1.0 + t.sin()).collect();
    let pb = BihariProblem::new(1.5, times.clone(), v.clone(), Modulus::linear(1.0)?)?;
    let mut worst = 0.0f64;
    for &t in &times {
        let g = gronwall_bound(1.5, &times, &v, t)?;
        worst = worst.max((bihari_bound(&pb, t).value - g).abs() / g);
    }
    row(&mut out, "bihari_gronwall", times.len(), worst, 1e-10, worst <= 1e-10)?;

    // Ψ(u) = √u with v ≡ 1 and u₀ = 1 has the closed form (1 + t/2)².
    let pb = BihariProblem::from_fn(1.0, &grid, |_| 1.0, Modulus::custom("sqrt", f64::sqrt, false))?;
    let mut worst = 0.0f64;
    for &t in &times {
        let want = (1.0 + t / 2.0).powi(2);
        worst = worst.max((bihari_bound(&pb, t).value - want).abs() / want);
    }
    row(&mut out, "bihari_sqrt", times.len(), worst, 1e-8, worst <= 1e-8)?;

    let pb = BihariProblem::from_fn(0.0, &grid, |_| 1.0, Modulus::log(0.25)?)?;
    let zero = times.iter().map(|&t| bihari_bound(&pb, t).value.abs()).fold(0.0, f64::max);
    row(&mut out, "osgood_zero", times.len(), zero, 0.0, zero == 0.0)?;

    let spec = JumpSpec::new(2.0, MarkDistribution::Gauss { mean: 0.0, std: 1.0 }, 1)?;
    let kgrid = TimeGrid::new(1.0, 32)?;
    let opts = KunitaOptions { replicas: a.replicas, seed: run.seed, exec: run.exec, ..KunitaOptions::default() };
    let k = kunita_p2_check(&spec, &kgrid, 1, |j, z, o| o[0] = (1.0 + 0.1 * j as f64) * z[0], &opts)?;
    row(&mut out, "kunita", a.replicas, k.sup_moment + 3.0 * k.std_error, k.bound, k.holds)?;

    out.note("pass", all);
    out.finish(&Sink::resolve(&a.out, None), run.seed, run.started)?;
    if all {
        Ok(())
    } else {
        Err(CliError::Failed("an inequality check failed".into()))
    }
}
