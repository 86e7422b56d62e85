use hybrid_core::optim::{
    multi_start_lsq, solve_lsq, solve_pso, uniform_init, JacobianBuilder, LsqConfig, LsqProblem,
    MultiStartConfig, PsoConfig, PsoProblem, SparseJacobian,
};
use proptest::prelude::*;

/// `a * exp(b * t_i) + c - y_i`.
#[derive(Debug)]
struct ExpFit {
    t: Vec<f64>,
    y: Vec<f64>,
}

impl LsqProblem for ExpFit {
    fn dim(&self) -> usize {
        3
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        self.t
            .iter()
            .zip(&self.y)
            .map(|(t, y)| x[0] * (x[1] * t).exp() + x[2] - y)
            .collect()
    }

    fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, SparseJacobian) {
        let mut jac = JacobianBuilder::new(3);
        for t in &self.t {
            let e = (x[1] * t).exp();
            jac.push_dense(&[e, x[0] * t * e, 1.0]);
        }
        (self.residuals(x), jac.finish())
    }
}

struct Rastrigin {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shift: Vec<f64>,
}

impl PsoProblem for Rastrigin {
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lo
    }
    fn upper(&self) -> &[f64] {
        &self.hi
    }
    fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.shift)
            .map(|(v, s)| {
                let d = v - s;
                d * d - 10.0 * (std::f64::consts::TAU * d).cos() + 10.0
            })
            .sum()
    }
}

fn exp_problem() -> impl Strategy<Value = ExpFit> {
    (0.5..2.0f64, -1.0..1.0f64, -1.0..1.0f64, prop::collection::vec(-0.05..0.05f64, 20)).prop_map(
        |(a, b, c, noise)| {
            let t: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
            let y = t.iter().zip(&noise).map(|(t, n)| a * (b * t).exp() + c + n).collect();
            ExpFit { t, y }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lm_cost_never_increases(p in exp_problem(), x0 in prop::collection::vec(-2.0..2.0f64, 3)) {
        if let Ok(out) = solve_lsq(&p, &x0, &LsqConfig::default()) {
            prop_assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(*out.cost_history.last().unwrap(), out.cost);
        }
    }

    #[test]
    fn multi_start_winner_is_the_log_minimum(p in exp_problem(), seed in any::<u64>()) {
        let cfg = MultiStartConfig { n_starts: 6, seed, ..MultiStartConfig::default() };
        let a = multi_start_lsq(&p, &cfg, uniform_init(3, 2.0), &[]).unwrap();
        let b = multi_start_lsq(&p, &cfg, uniform_init(3, 2.0), &[]).unwrap();
        prop_assert_eq!(&a, &b);
        let min = a.log.iter().map(|s| s.final_cost).filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(a.best.cost, min);
        prop_assert_eq!(a.log[a.best_idx].final_cost, min);
    }

    #[test]
    fn pso_global_best_never_increases(shift in prop::collection::vec(-2.0..2.0f64, 3), seed in any::<u64>()) {
        let p = Rastrigin { lo: vec![-5.0; 3], hi: vec![5.0; 3], shift };
        let cfg = PsoConfig { iterations: 40, seed, ..PsoConfig::default() };
        let out = solve_pso(&p, &cfg, &[]).unwrap();
        prop_assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*out.history.last().unwrap(), out.cost);
        prop_assert_eq!(p.objective(&out.x), out.cost);
        prop_assert!(out.x.iter().all(|v| (-5.0..=5.0).contains(v)));
    }
}
