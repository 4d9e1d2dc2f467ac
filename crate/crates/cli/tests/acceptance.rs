//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs under `cargo test` with `harness = false`.

use std::process::Command;
use std::time::{Duration, Instant};

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use mvjump_core::averaging::{averaging_sweep, AveragingModel, AveragingParams, SweepOptions};
use mvjump_core::coefficients::{make_linear_model, LinearParams};
use mvjump_core::cosine_family::{CosineFamily, SpectralGenerator};
use mvjump_core::inequalities::{
    bihari_bound, fuzz_power_inequality, gronwall_bound, kunita_p2_check, BihariProblem, KunitaOptions,
};
use mvjump_core::measure::{w2_exact, w2_quantile_1d, EmpiricalMeasure};
use mvjump_core::noise::{JumpSpec, MarkDistribution, NoiseModel, QWienerSpec};
use mvjump_core::solver::{cauchy_diagnostic, solve_caratheodory, solve_euler_mild, InitialLaw, SolveConfig, TimeGrid};
use mvjump_core::stats;
use mvjump_core::{coefficients::Modulus, Parallelism};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 8] = [
        ("cosine-family identities", 10, identities),
        ("W2 oracle equivalence", 30, w2_oracle),
        ("linear moment oracle", 120, moment_oracle),
        ("Caratheodory Cauchy table", 300, cauchy_table),
        ("sup-moment has no positive trend in k", 300, sup_moment_trend),
        ("averaging sweep", 600, averaging),
        ("inequality fuzz", 300, inequality_fuzz),
        ("CLI determinism across thread counts", 300, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut out = check();
        let took = start.elapsed();
        if took > Duration::from_secs(*budget) {
            out.pass = false;
            out.detail.push_str(&format!("; over the {budget} s budget"));
        }
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{}] {name}: {} ({:.1} s)", i + 1, out.detail, took.as_secs_f64());
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn random_orthogonal(d: usize, rng: &mut StdRng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    m.qr().q()
}

fn identities() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut lip_ok = true;
    for d in [1usize, 4, 16] {
        let eig: Vec<f64> = (1..=d).map(|i| -(i as f64 * std::f64::consts::PI).powi(2)).collect();
        let basis = random_orthogonal(d, &mut rng);
        let gen = SpectralGenerator::new(eig, basis, DMatrix::zeros(d, d), None).unwrap();
        let fam = CosineFamily::new(gen, 1.0).unwrap();
        let pts: Vec<(f64, f64)> = (0..1000).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let r = fam.identity_residuals(&pts, 32, d as u64).unwrap();
        worst = worst.max(r.max_residual());
        lip_ok &= r.sine_lipschitz <= r.ns_bound * (1.0 + 1e-12);
    }
    outcome(worst <= 1e-8 && lip_ok, format!("max residual {worst:.2e} over d in {{1, 4, 16}}"))
}

fn cloud(rng: &mut StdRng, n: usize, d: usize) -> EmpiricalMeasure {
    let pts: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    EmpiricalMeasure::uniform(d, pts).unwrap()
}

fn brute_force_w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let n = a.len();
    let cost = |i: usize, j: usize| -> f64 { a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y).powi(2)).sum() };
    let best = (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    (best / n as f64).sqrt()
}

fn w2_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst_exact = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=7);
        let d = rng.random_range(1..=3);
        let (a, b) = (cloud(&mut rng, n, d), cloud(&mut rng, n, d));
        worst_exact = worst_exact.max((w2_exact(&a, &b).unwrap() - brute_force_w2(&a, &b)).abs());
    }
    let mut worst_1d = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=60);
        let (a, b) = (cloud(&mut rng, n, 1), cloud(&mut rng, n, 1));
        worst_1d = worst_1d.max((w2_exact(&a, &b).unwrap() - w2_quantile_1d(&a, &b).unwrap()).abs());
    }
    outcome(
        worst_exact <= 1e-10 && worst_1d <= 1e-10,
        format!("exact vs permutations {worst_exact:.1e}, quantile vs exact {worst_1d:.1e}"),
    )
}

/// `|E X(T) − (x₀ + x₁T)|` for the balanced linear model `c = a²`, where the
/// mean obeys `m″ = 0`.
fn free_flight_error(h: f64, n: usize, std: f64, seed: u64) -> f64 {
    let noise = NoiseModel::silent(1);
    let m = make_linear_model(LinearParams { a: 1.0, b: 0.0, c: 1.0, sigma: 0.0, j0: 0.0 }, 1, &noise).unwrap();
    let fam = CosineFamily::new(m.generator().unwrap(), 1.0).unwrap();
    let steps = (1.0 / h).round() as usize;
    let initial = InitialLaw { x0_mean: vec![0.5], x0_std: std, x1_mean: vec![1.0], x1_std: std };
    let cfg = SolveConfig::new(TimeGrid::new(1.0, steps).unwrap(), n, seed, noise, initial);
    let ens = solve_euler_mild(&m, &fam, &cfg).unwrap();
    (ens.mean(steps)[0] - 1.5).abs()
}

fn moment_oracle() -> Outcome {
    let (s0, s1, horizon) = (0.3f64, 0.3f64, 1.0f64);
    // Discretisation error alone, from single deterministic particles.
    let e_coarse = free_flight_error(1e-2, 1, 0.0, 0);
    let e_fine = free_flight_error(5e-3, 1, 0.0, 0);
    let ratio = e_coarse / e_fine;
    // Statistical part: the sample mean of x₀ + x₁T has standard deviation
    // sqrt(s₀² + T²s₁²)/√N; three of those plus twice the observed
    // first-order discretisation constant.
    let c = (3.0 * (s0 * s0 + horizon * horizon * s1 * s1).sqrt()).max(2.0 * e_coarse / 1e-2);
    let mut ok = (1.5..=2.5).contains(&ratio);
    let mut parts = vec![format!("halving ratio {ratio:.3}, C = {c:.3}")];
    for (h, n) in [(1e-2, 1000usize), (5e-3, 4000)] {
        let err = free_flight_error(h, n, s0, 17);
        let bound = c * (h + 1.0 / (n as f64).sqrt());
        ok &= err <= bound;
        parts.push(format!("h={h}: {err:.2e} <= {bound:.2e}"));
    }
    outcome(ok, parts.join("; "))
}

fn noisy_linear() -> (mvjump_core::coefficients::LinearModel, CosineFamily, SolveConfig) {
    let noise = NoiseModel::new(
        QWienerSpec::new(vec![1.0]).unwrap(),
        Some(JumpSpec::new(2.0, MarkDistribution::Gauss { mean: 0.0, std: 1.0 }, 1).unwrap()),
    );
    let m = make_linear_model(LinearParams { a: 1.0, b: 0.2, c: 0.5, sigma: 0.5, j0: 0.3 }, 1, &noise).unwrap();
    let fam = CosineFamily::new(m.generator().unwrap(), 1.0).unwrap();
    let initial = InitialLaw { x0_mean: vec![1.0], x0_std: 0.5, x1_mean: vec![0.0], x1_std: 0.5 };
    let cfg = SolveConfig::new(TimeGrid::new(1.0, 128).unwrap(), 4000, 2024, noise, initial);
    (m, fam, cfg)
}

fn cauchy_table() -> Outcome {
    let (m, fam, cfg) = noisy_linear();
    let table = cauchy_diagnostic(&m, &fam, &cfg, &[4, 8, 16, 32]).unwrap();
    let d: Vec<f64> = table.rows.iter().map(|r| r.distance).collect();
    let strict = d.windows(2).all(|w| w[1] < w[0]);
    let halved = d[2] <= d[0] / 2.0;
    outcome(strict && halved, format!("D(2k,k) = {}", d.iter().map(|x| format!("{x:.3e}")).join(", ")))
}

fn sup_moment_trend() -> Outcome {
    let (m, fam, cfg) = noisy_linear();
    let sups: Vec<Vec<f64>> =
        [4u32, 8, 16, 32].iter().map(|&k| solve_caratheodory(&m, &fam, &cfg, k).unwrap().sup_sq_per_particle()).collect();
    let base = stats::mean(&sups[0]);
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, s) in [8, 16, 32].iter().zip(&sups[1..]) {
        let w = stats::welch(&sups[0], s);
        let mean = stats::mean(s);
        ok &= w.p_greater > 0.05 && mean <= 1.5 * base;
        parts.push(format!("k={k}: mean {mean:.4} p={:.3}", w.p_greater));
    }
    outcome(ok, format!("k=4 mean {base:.4}; {}", parts.join(", ")))
}

fn rk4_path(eps: f64, forcing: impl Fn(f64) -> f64, h: f64, steps: usize) -> Vec<f64> {
    // y″ = −y + ε·forcing(t)·0.6·y with y(0) = 1, y′(0) = 0.
    let f = |t: f64, y: [f64; 2]| [y[1], -y[0] + eps * forcing(t) * 0.6 * y[0]];
    let mut y = [1.0, 0.0];
    let mut out = vec![1.0];
    let sub = 10;
    let dt = h / sub as f64;
    for j in 0..steps {
        for s in 0..sub {
            let t = j as f64 * h + s as f64 * dt;
            let k1 = f(t, y);
            let k2 = f(t + dt / 2.0, [y[0] + dt / 2.0 * k1[0], y[1] + dt / 2.0 * k1[1]]);
            let k3 = f(t + dt / 2.0, [y[0] + dt / 2.0 * k2[0], y[1] + dt / 2.0 * k2[1]]);
            let k4 = f(t + dt, [y[0] + dt * k3[0], y[1] + dt * k3[1]]);
            for i in 0..2 {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(y[0]);
    }
    out
}

fn averaging() -> Outcome {
    let eps = [0.1, 0.05, 0.025, 0.0125];
    let opts = SweepOptions::default();

    // Deterministic single particle against the ODE oracle.
    let params = AveragingParams { a: 1.0, b: 0.0, kappa: 0.4, c: 0.2, sigma: 0.0, j0: 0.0 };
    let noise = NoiseModel::silent(1);
    let model = AveragingModel::new(params, 1, &noise).unwrap();
    let fam = CosineFamily::new(model.generator().unwrap(), 10.0).unwrap();
    let (h, steps) = (1e-3, 10_000);
    let cfg = SolveConfig::new(TimeGrid::new(10.0, steps).unwrap(), 1, 0, noise, InitialLaw::deterministic(vec![1.0], vec![0.0]));
    let det = averaging_sweep(&model, &model.averaged(), &fam, &cfg, &eps, &opts).unwrap();
    let mut worst_rel = 0.0f64;
    let mut oracle = Vec::new();
    for (i, &e) in eps.iter().enumerate() {
        let x = rk4_path(e, |t| 1.0 + (-t).exp(), h, steps);
        let z = rk4_path(e, |_| 1.0, h, steps);
        let last = (det.horizons[i] / h + 1e-9).floor() as usize;
        let want = (0..=last).map(|j| (x[j] - z[j]).powi(2)).fold(0.0, f64::max);
        worst_rel = worst_rel.max((det.errors[i] - want).abs() / want);
        oracle.push(want);
    }
    let oracle_decreasing = oracle.windows(2).all(|w| w[1] < w[0]);
    let det_ok = worst_rel <= 0.01 && oracle_decreasing;

    // Noisy sweep at N = 10⁴.
    let params = AveragingParams { a: 1.0, b: 0.0, kappa: 0.4, c: 0.2, sigma: 0.5, j0: 0.3 };
    let noise = NoiseModel::new(
        QWienerSpec::new(vec![1.0]).unwrap(),
        Some(JumpSpec::new(1.0, MarkDistribution::Gauss { mean: 0.0, std: 1.0 }, 1).unwrap()),
    );
    let model = AveragingModel::new(params, 1, &noise).unwrap();
    let fam = CosineFamily::new(model.generator().unwrap(), 5.0).unwrap();
    let initial = InitialLaw { x0_mean: vec![1.0], x0_std: 0.5, x1_mean: vec![0.0], x1_std: 0.5 };
    let cfg = SolveConfig::new(TimeGrid::new(5.0, 200).unwrap(), 10_000, 77, noise, initial);
    let noisy = averaging_sweep(&model, &model.averaged(), &fam, &cfg, &eps, &opts).unwrap();
    let (lo, _) = noisy.slope_ci.unwrap_or((f64::NAN, f64::NAN));
    let noisy_ok = noisy.pass && noisy.monotone && lo >= 0.5;

    outcome(
        det_ok && noisy_ok,
        format!(
            "deterministic max rel. gap {worst_rel:.2e} (oracle decreasing: {oracle_decreasing}); noisy slope {:.3} CI low {lo:.3}, monotone {}",
            noisy.slope.unwrap_or(f64::NAN),
            noisy.monotone
        ),
    )
}

fn inequality_fuzz() -> Outcome {
    let fuzz = fuzz_power_inequality(1_000_000, 3, Parallelism::Rayon);

    let grid = TimeGrid::new(2.0, 200).unwrap();
    let times = grid.nodes();
    let v: Vec<f64> = times.iter().map(|t| 1.0 + t.sin()).collect();
    let pb = BihariProblem::new(1.5, times.clone(), v.clone(), Modulus::linear(1.0).unwrap()).unwrap();
    let gronwall = times
        .iter()
        .map(|&t| {
            let g = gronwall_bound(1.5, &times, &v, t).unwrap();
            (bihari_bound(&pb, t).value - g).abs() / g
        })
        .fold(0.0, f64::max);

    let pb = BihariProblem::from_fn(1.0, &grid, |_| 1.0, Modulus::custom("sqrt", f64::sqrt, false)).unwrap();
    let sqrt_case = times
        .iter()
        .map(|&t| {
            let want = (1.0 + t / 2.0).powi(2);
            (bihari_bound(&pb, t).value - want).abs() / want
        })
        .fold(0.0, f64::max);

    let spec = JumpSpec::new(2.0, MarkDistribution::Gauss { mean: 0.0, std: 1.0 }, 1).unwrap();
    let opts = KunitaOptions { replicas: 10_000, seed: 4, ..KunitaOptions::default() };
    let k = kunita_p2_check(&spec, &TimeGrid::new(1.0, 32).unwrap(), 1, |j, z, o| o[0] = (1.0 + 0.1 * j as f64) * z[0], &opts)
        .unwrap();

    let ok = fuzz.failures == 0 && gronwall <= 1e-10 && sqrt_case <= 1e-8 && k.holds;
    outcome(
        ok,
        format!(
            "power: {} failures in {} (worst ratio {:.6}); Gronwall gap {gronwall:.1e}; sqrt gap {sqrt_case:.1e}; Kunita {:.3} + 3se <= {:.3}",
            fuzz.failures, fuzz.trials, fuzz.worst_ratio, k.sup_moment, k.bound
        ),
    )
}

const DET_CONFIG: &str = "\
dim = 2
a = 1
b = 0.1
c = 0.5
sigma = 0.4
j0 = 0.2
jump_intensity = 2
jump_mark = gauss 0 1
n_particles = 300
n_steps = 64
T = 1
x0_mean = 1, 0
x0_std = 0.3
x1_std = 0.3
";

const DET_AVG_CONFIG: &str = "\
dim = 1
model = averaging
kappa = 0.4
c = 0.2
sigma = 0.5
j0 = 0.3
jump_intensity = 1
jump_mark = gauss 0 1
n_particles = 300
n_steps = 100
T = 2
x0_mean = 1
x0_std = 0.5
";

/// Runs the binary with `--threads` and returns stdout without the
/// wall-clock footer line.
fn run_cli(dir: &std::path::Path, threads: usize, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mvjump"))
        .current_dir(dir)
        .args(["--threads", &threads.to_string(), "--seed", "42"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?} exited with {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    let text = String::from_utf8_lossy(&o.stdout);
    Ok(text.lines().filter(|l| !l.starts_with("# wall_time_s=")).join("\n"))
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("mvjump-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("lin.cfg"), DET_CONFIG).unwrap();
    std::fs::write(dir.join("avg.cfg"), DET_AVG_CONFIG).unwrap();
    let mut a = StdRng::seed_from_u64(8);
    let rows = |rng: &mut StdRng| (0..40).map(|_| format!("{},{}\n", rng.random::<f64>(), rng.random::<f64>())).collect::<String>();
    std::fs::write(dir.join("a.csv"), rows(&mut a)).unwrap();
    std::fs::write(dir.join("b.csv"), rows(&mut a)).unwrap();

    let commands: [(&str, Vec<&str>); 7] = [
        ("identities", vec!["identities", "--out", "-", "--points", "200"]),
        ("simulate", vec!["simulate", "--config", "lin.cfg", "--out", "-", "--moments", "-"]),
        ("cauchy", vec!["cauchy", "--config", "lin.cfg", "--out", "-"]),
        ("averaging", vec!["averaging", "--config", "avg.cfg", "--eps", "0.1,0.05", "--bootstrap", "200", "--out", "-"]),
        ("w2 exact", vec!["w2", "a.csv", "b.csv", "--out", "-"]),
        ("w2 entropic", vec!["w2", "a.csv", "b.csv", "--entropic", "0.1", "--out", "-"]),
        ("check-inequalities", vec!["check-inequalities", "--fuzz", "1e5", "--replicas", "2000", "--out", "-"]),
    ];
    let mut mismatched = Vec::new();
    for (name, args) in &commands {
        let runs: Result<Vec<String>, String> = [1usize, 4, 8].iter().map(|&t| run_cli(&dir, t, args)).collect();
        match runs {
            Ok(r) if r.iter().all(|x| *x == r[0]) => {}
            Ok(_) => mismatched.push(name.to_string()),
            Err(e) => mismatched.push(format!("{name} ({e})")),
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    if mismatched.is_empty() {
        outcome(true, format!("{} subcommand invocations identical for threads 1, 4, 8", commands.len()))
    } else {
        outcome(false, format!("differences in: {}", mismatched.join(", ")))
    }
}
