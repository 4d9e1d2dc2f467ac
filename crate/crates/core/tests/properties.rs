use proptest::prelude::*;

use mvjump_core::cosine_family::{CosineFamily, SpectralGenerator};
use mvjump_core::inequalities::{bihari_bound, power_inequality_check, BihariProblem};
use mvjump_core::coefficients::Modulus;
use mvjump_core::grid::TimeGrid;
use mvjump_core::measure::{w2_exact, w2_quantile_1d, EmpiricalMeasure};

fn cloud(dim: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-3.0f64..3.0, dim * n).prop_map(move |pts| EmpiricalMeasure::uniform(dim, pts).unwrap())
}

fn triple() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, EmpiricalMeasure)> {
    (1usize..4, 1usize..7).prop_flat_map(|(d, n)| (cloud(d, n), cloud(d, n), cloud(d, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w2_is_a_metric((a, b, c) in triple()) {
        let ab = w2_exact(&a, &b).unwrap();
        let ba = w2_exact(&b, &a).unwrap();
        let bc = w2_exact(&b, &c).unwrap();
        let ac = w2_exact(&a, &c).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert_eq!(w2_exact(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn quantile_and_assignment_agree_in_one_dimension((a, b) in (1usize..9).prop_flat_map(|n| (cloud(1, n), cloud(1, n)))) {
        let q = w2_quantile_1d(&a, &b).unwrap();
        let e = w2_exact(&a, &b).unwrap();
        prop_assert!((q - e).abs() <= 1e-10, "{} vs {}", q, e);
    }

    #[test]
    fn translation_shifts_w2_by_the_offset(a in cloud(2, 5), dx in -2.0f64..2.0, dy in -2.0f64..2.0) {
        let b = a.translated(&[dx, dy]);
        let w = w2_exact(&a, &b).unwrap();
        prop_assert!((w - (dx * dx + dy * dy).sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn power_inequality_holds(a in -100.0f64..100.0, b in -100.0f64..100.0, p in 2.0f64..8.0, r in 1e-3f64..1e3) {
        prop_assert!(power_inequality_check(a, b, p, r).unwrap().holds);
    }

    #[test]
    fn dalembert_holds_pointwise(l1 in -9.0f64..0.0, l2 in -9.0f64..0.0, t in 0.0f64..3.0, s in 0.0f64..3.0) {
        let fam = CosineFamily::new(SpectralGenerator::diagonal(vec![l1, l2], 0.0).unwrap(), 6.0).unwrap();
        for i in 0..2 {
            let r = fam.cos_entry(i, t + s) + fam.cos_entry(i, t - s) - 2.0 * fam.cos_entry(i, t) * fam.cos_entry(i, s);
            prop_assert!(r.abs() <= 1e-12);
            prop_assert!(fam.sin_entry(i, t).abs() <= t + 1e-15);
        }
    }

    #[test]
    fn gronwall_is_the_linear_bihari_case(u0 in 0.01f64..5.0, v in 0.0f64..2.0, t in 0.0f64..2.0) {
        let pb = BihariProblem::from_fn(u0, &TimeGrid::new(2.0, 50).unwrap(), |_| v, Modulus::Linear { gamma: 1.0 }).unwrap();
        let want = u0 * (v * t).exp();
        prop_assert!((bihari_bound(&pb, t).value - want).abs() <= 1e-10 * want);
    }
}
