use mkoop::dynamics::*;
use nalgebra::DVector;
use proptest::prelude::*;

fn models() -> Vec<ManipulatorModel> {
    vec![
        ManipulatorModel::thin_rod_chain(2, 1.0, 0.5, Topology::Planar).unwrap(),
        ManipulatorModel::three_link_arm(),
        ManipulatorModel::seven_link_arm(),
    ]
}

fn vector(n: usize, range: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-range..range, n).prop_map(DVector::from_vec)
}

fn config(n: usize) -> impl Strategy<Value = (DVector<f64>, DVector<f64>)> {
    (vector(n, std::f64::consts::PI), vector(n, 3.0))
}

/// `q̇ᵀ Ṁ q̇` with `Ṁ` from a five-point stencil along `q̇`.
fn mdot_quadratic(model: &ManipulatorModel, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    let h = 3e-4;
    let at = |s: f64| mass_matrix(model, &(q + qd * s)).unwrap();
    let mdot = (at(-2.0 * h) - at(2.0 * h) + (at(h) - at(-h)) * 8.0) / (12.0 * h);
    qd.dot(&(mdot * qd))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_matrix_is_symmetric_positive_definite((q, _) in config(3)) {
        for model in models().iter().filter(|m| m.n == 3) {
            let m = mass_matrix(model, &q).unwrap();
            prop_assert!((&m - m.transpose()).amax() < 1e-12);
            prop_assert!(m.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn coriolis_term_is_passive((q, qd) in config(3)) {
        let model = ManipulatorModel::three_link_arm();
        let (_, cqd, _) = dynamics_terms(&model, &q, &qd).unwrap();
        let residual = mdot_quadratic(&model, &q, &qd) - 2.0 * qd.dot(&cqd);
        prop_assert!(residual.abs() < 1e-8, "{residual}");
    }

    #[test]
    fn momentum_round_trip((q, qd) in config(7)) {
        let model = ManipulatorModel::seven_link_arm();
        let state = momentum_state(&model, &q, &qd).unwrap();
        let back = velocity_from_momentum(&model, &state).unwrap();
        prop_assert!((back - &qd).amax() < 1e-10 * qd.amax().max(1.0));
    }

    #[test]
    fn jacobian_matches_finite_differences((q, _) in config(7)) {
        let model = ManipulatorModel::seven_link_arm();
        let jac = ee_jacobian(&model, &q).unwrap();
        let h = 1e-6;
        for i in 0..7 {
            let mut e = DVector::zeros(7);
            e[i] = h;
            let fd = (ee_position(&model, &(&q + &e)).unwrap() - ee_position(&model, &(&q - &e)).unwrap()) / (2.0 * h);
            prop_assert!((jac.column(i) - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn forward_dynamics_inverts_the_equation_of_motion((q, qd) in config(3), tau in vector(3, 5.0)) {
        let model = ManipulatorModel::three_link_arm();
        let qdd = forward_dynamics(&model, &q, &qd, &tau, &DisturbanceSpec::none(), 0.0).unwrap();
        let (m, cqd, g) = dynamics_terms(&model, &q, &qd).unwrap();
        prop_assert!((m * qdd + cqd + g - &tau).amax() < 1e-9);
    }
}

#[test]
fn unactuated_energy_is_conserved() {
    for model in models() {
        let n = model.n;
        let mut q = DVector::from_fn(n, |i, _| 0.3 + 0.2 * i as f64);
        let mut qd = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.5 } else { -0.4 });
        let energy = |q: &DVector<f64>, qd: &DVector<f64>| {
            kinetic_energy(&model, q, qd).unwrap() + potential_energy(&model, q).unwrap()
        };
        let e0 = energy(&q, &qd);
        let zero = DVector::zeros(n);
        // the light wrist links of the 7-link arm need a finer step
        let dt: f64 = if n == 7 { 2.5e-4 } else { 1e-3 };
        for k in 0..(10.0 / dt).round() as usize {
            (q, qd) = step_explicit(&model, &q, &qd, &zero, &DisturbanceSpec::none(), k as f64 * dt, dt).unwrap();
        }
        let drift = (energy(&q, &qd) - e0).abs();
        assert!(drift < 1e-6, "{n}-link drift {drift:e}");
    }
}

#[test]
fn friction_dissipates_energy() {
    let mut model = ManipulatorModel::three_link_arm();
    model.friction = vec![0.05; 3];
    let energy = |q: &DVector<f64>, qd: &DVector<f64>| {
        kinetic_energy(&model, q, qd).unwrap() + potential_energy(&model, q).unwrap()
    };
    let (mut q, mut qd) = (DVector::from_element(3, 0.4), DVector::from_element(3, 1.0));
    let mut last = energy(&q, &qd);
    for k in 0..500 {
        (q, qd) = step_explicit(&model, &q, &qd, &DVector::zeros(3), &DisturbanceSpec::none(), k as f64 * 0.01, 0.01).unwrap();
        let e = energy(&q, &qd);
        assert!(e <= last + 1e-9);
        last = e;
    }
}
