use approx::assert_relative_eq;
use hybrid_core::mmps::{AffineTerm, MmpsFunction};
use proptest::prelude::*;

const N: usize = 2;
const M: usize = 2;
const D: usize = N + M;

fn term() -> impl Strategy<Value = AffineTerm> {
    (prop::collection::vec(-5.0..5.0f64, N), prop::collection::vec(-5.0..5.0f64, M), -5.0..5.0f64)
        .prop_map(|(a, b, h)| AffineTerm::new(a, b, h))
}

fn function() -> impl Strategy<Value = MmpsFunction> {
    (prop::collection::vec(term(), 1..5), prop::collection::vec(term(), 1..5))
        .prop_map(|(plus, minus)| MmpsFunction::new(N, M, plus, minus).unwrap())
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, D)
}

fn lipschitz(f: &MmpsFunction) -> f64 {
    let slope = |t: &AffineTerm| t.a.iter().chain(&t.b).map(|v| v * v).sum::<f64>().sqrt();
    f.plus_terms()
        .iter()
        .chain(f.minus_terms())
        .map(slope)
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn difference_of_maxima_equals_max_min(f in function(), z in point()) {
        let dc = f
            .plus_terms()
            .iter()
            .map(|p| {
                f.minus_terms()
                    .iter()
                    .map(|q| p.eval(&z) - q.eval(&z))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let v = f.eval(&z);
        prop_assert!((v - dc).abs() <= 1e-12 * v.abs().max(1.0), "{} vs {}", v, dc);
    }

    #[test]
    fn no_jump_exceeds_the_lipschitz_bound(f in function(), z1 in point(), z2 in point()) {
        let steps = 200;
        let dist = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bound = 2.0 * lipschitz(&f) * dist / steps as f64 + 1e-12;
        let at = |t: f64| -> Vec<f64> { z1.iter().zip(&z2).map(|(a, b)| a + t * (b - a)).collect() };
        let mut prev = f.eval(&z1);
        for k in 1..=steps {
            let cur = f.eval(&at(k as f64 / steps as f64));
            prop_assert!((cur - prev).abs() <= bound, "jump {} > {}", (cur - prev).abs(), bound);
            prev = cur;
        }
    }

    #[test]
    fn common_affine_shift_leaves_values_unchanged(f in function(), c in term(), z in point()) {
        let shift = |t: &AffineTerm| {
            AffineTerm::new(
                t.a.iter().zip(&c.a).map(|(x, y)| x + y).collect(),
                t.b.iter().zip(&c.b).map(|(x, y)| x + y).collect(),
                t.h + c.h,
            )
        };
        let g = MmpsFunction::new(
            N,
            M,
            f.plus_terms().iter().map(shift).collect(),
            f.minus_terms().iter().map(shift).collect(),
        )
        .unwrap();
        assert_relative_eq!(f.eval(&z), g.eval(&z), epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn flat_parameters_round_trip(f in function(), z in point()) {
        let theta = f.flatten();
        let g = MmpsFunction::unflatten(N, M, f.plus_terms().len(), f.minus_terms().len(), &theta).unwrap();
        prop_assert_eq!(f.eval(&z), g.eval(&z));
        let packed = f.layout().eval(&theta, &z);
        prop_assert!((packed - f.eval(&z)).abs() <= 1e-12 * packed.abs().max(1.0));
    }

    #[test]
    fn active_terms_reproduce_the_value(f in function(), z in point()) {
        let (p, q) = f.active_indices(&z);
        let v = f.plus_terms()[p].eval(&z) - f.minus_terms()[q].eval(&z);
        prop_assert_eq!(v, f.eval(&z));
    }
}
