use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mvjump_core::coefficients::{make_linear_model, LinearParams};
use mvjump_core::cosine_family::CosineFamily;
use mvjump_core::exec::Parallelism;
use mvjump_core::measure::{w2_exact_with_cap, EmpiricalMeasure};
use mvjump_core::noise::{JumpSpec, MarkDistribution, NoiseModel, QWienerSpec};
use mvjump_core::solver::{solve_euler_mild, InitialLaw, SolveConfig, TimeGrid};

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)]
}

fn bench_solver(c: &mut Criterion) {
    let noise = NoiseModel::new(
        QWienerSpec::new(vec![1.0, 0.5]).unwrap(),
        Some(JumpSpec::new(2.0, MarkDistribution::Gauss { mean: 0.0, std: 1.0 }, 2).unwrap()),
    );
    let params = LinearParams { a: 1.0, b: 0.2, c: 0.5, sigma: 0.5, j0: 0.3 };
    let model = make_linear_model(params, 2, &noise).unwrap();
    let fam = CosineFamily::new(model.generator().unwrap(), 1.0).unwrap();
    let initial = InitialLaw { x0_mean: vec![1.0, 0.0], x0_std: 0.2, x1_mean: vec![0.0, 1.0], x1_std: 0.2 };
    let mut group = c.benchmark_group("euler_mild");
    group.sample_size(10);
    for n in [500usize, 2000] {
        for (name, mode) in modes() {
            let cfg = SolveConfig::new(TimeGrid::new(1.0, 64).unwrap(), n, 1, noise.clone(), initial.clone()).with_exec(mode);
            group.bench_with_input(BenchmarkId::new(name, n), &cfg, |b, cfg| {
                b.iter(|| solve_euler_mild(&model, &fam, cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_w2(c: &mut Criterion) {
    let cloud = |shift: f64| {
        let pts: Vec<f64> = (0..400).map(|i| ((i as f64 * 0.618_034).fract() - 0.5) * 3.0 + shift).collect();
        EmpiricalMeasure::uniform(2, pts).unwrap()
    };
    let (mu, nu) = (cloud(0.0), cloud(0.4));
    let mut group = c.benchmark_group("w2_exact_200");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(name, |b| b.iter(|| w2_exact_with_cap(&mu, &nu, 512, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_solver, bench_w2);
criterion_main!(benches);
