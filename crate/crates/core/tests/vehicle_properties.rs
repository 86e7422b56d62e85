use approx::assert_relative_eq;
use hybrid_core::vehicle::{
    constraint_value, dynamics, f_lambda, split_point, tire_quantities, Bounds, ControlInput,
    State, VehicleParams,
};
use proptest::prelude::*;

fn domain_point() -> impl Strategy<Value = Vec<f64>> {
    let b = Bounds::vehicle_default();
    (0..6)
        .map(|k| b.lower[k]..b.upper[k])
        .collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn friction_never_exceeds_its_zero_slip_value(z in domain_point()) {
        let p = VehicleParams::default();
        let (x, u) = split_point(&z);
        if let Ok(t) = tire_quantities(&p, &x, &u) {
            prop_assert!(t.front.mu <= p.mu_0);
            prop_assert!(t.rear.mu <= p.mu_0);
        }
    }

    #[test]
    fn mirrored_manoeuvre_has_the_same_constraint(z in domain_point()) {
        let p = VehicleParams::default();
        let (x, u) = split_point(&z);
        let xm = State::new(x.v_x, -x.v_y, -x.r);
        let um = ControlInput::new(u.f_xf, u.f_xr, -u.delta);
        match (constraint_value(&p, &x, &u), constraint_value(&p, &xm, &um)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "asymmetric outcome {:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn mirrored_manoeuvre_mirrors_lateral_dynamics(z in domain_point()) {
        let p = VehicleParams::default();
        let (x, u) = split_point(&z);
        let xm = State::new(x.v_x, -x.v_y, -x.r);
        let um = ControlInput::new(u.f_xf, u.f_xr, -u.delta);
        if let (Ok(a), Ok(b)) = (dynamics(&p, &x, &u), dynamics(&p, &xm, &um)) {
            assert_relative_eq!(a.v_x_dot, b.v_x_dot, epsilon = 1e-9, max_relative = 1e-9);
            assert_relative_eq!(a.v_y_dot, -b.v_y_dot, epsilon = 1e-9, max_relative = 1e-9);
            assert_relative_eq!(a.r_dot, -b.r_dot, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn constraint_is_continuous_where_defined(z in domain_point(), dir in prop::collection::vec(-1.0..1.0f64, 6)) {
        let p = VehicleParams::default();
        let b = Bounds::vehicle_default();
        let h = 1e-9;
        let z2: Vec<f64> = z.iter().zip(&dir).enumerate().map(|(k, (v, d))| v + h * d * b.width(k)).collect();
        let (x1, u1) = split_point(&z);
        let (x2, u2) = split_point(&z2);
        if let (Ok(a), Ok(c)) = (constraint_value(&p, &x1, &u1), constraint_value(&p, &x2, &u2)) {
            prop_assert!((a - c).abs() <= 1e-4 * a.abs().max(1.0), "{} vs {}", a, c);
        }
    }

    #[test]
    fn f_lambda_is_continuous_and_bounded(l in 0.0..5.0f64) {
        let v = f_lambda(l);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((f_lambda(l + 1e-9) - v).abs() <= 1e-8);
    }
}

#[test]
fn friction_is_exactly_nominal_without_slip() {
    let p = VehicleParams::default();
    for v_x in [5.0, 17.0, 50.0] {
        let t = tire_quantities(&p, &State::new(v_x, 0.0, 0.0), &ControlInput::default()).unwrap();
        assert_eq!((t.front.kappa, t.front.alpha), (0.0, 0.0));
        assert_eq!(t.front.mu, p.mu_0);
        assert_eq!(t.rear.mu, p.mu_0);
    }
}
