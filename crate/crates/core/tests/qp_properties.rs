use mkoop::qp::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Random strictly convex boxed QP: `P = GGᵀ + 0.1 I`, bounds straddling zero.
fn boxed_qp(n: usize) -> impl Strategy<Value = QpProblem> {
    (
        prop::collection::vec(-1.0..1.0f64, n * n),
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(0.05..2.0f64, n),
        prop::collection::vec(0.05..2.0f64, n),
    )
        .prop_map(move |(g, q, lo, hi)| {
            let g = DMatrix::from_vec(n, n, g);
            let p = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            QpProblem::boxed(p, DVector::from_vec(q), -DVector::from_vec(lo), DVector::from_vec(hi))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn boxed_solutions_are_exactly_feasible_and_optimal(problem in boxed_qp(6)) {
        let sol = solve_qp(&problem, &QpSettings::default(), &WarmStart::default()).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Solved);
        for i in 0..6 {
            prop_assert!(sol.x[i] >= problem.l[i] && sol.x[i] <= problem.u[i]);
        }
        prop_assert!(sol.residuals.max() < 1e-6, "{:?}", sol.residuals);
    }

    #[test]
    fn warm_start_from_the_solution_converges_immediately(problem in boxed_qp(5)) {
        let cold = solve_qp(&problem, &QpSettings::default(), &WarmStart::default()).unwrap();
        let warm = WarmStart { x: Some(cold.x.clone()), y: Some(cold.y.clone()) };
        let hot = solve_qp(&problem, &QpSettings::default(), &warm).unwrap();
        prop_assert!(hot.iterations <= cold.iterations);
        prop_assert!((hot.x - cold.x).amax() < 1e-6);
    }
}

fn sample_problems(count: usize, n: usize) -> Vec<QpProblem> {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;

    let mut runner = TestRunner::deterministic();
    (0..count).map(|_| boxed_qp(n).new_tree(&mut runner).unwrap().current()).collect()
}

// ADMM iterates may be infeasible with a cost below the optimum, so the raw
// objective is not monotone. The relaxed fixed-point residual is, for a fixed ρ.
#[test]
fn fixed_point_residual_is_non_increasing_at_fixed_rho() {
    let settings = QpSettings {
        adaptive_rho_interval: 0,
        max_iterations: 20_000,
        ..QpSettings::default()
    };
    for problem in sample_problems(100, 6) {
        let sol = solve_qp(&problem, &settings, &WarmStart::default()).unwrap();
        let r = &sol.fixed_point_residual;
        assert_eq!(r.len(), sol.iterations);
        for k in 1..r.len() {
            assert!(r[k] <= r[k - 1] * (1.0 + 1e-9) + 1e-12, "iteration {k}: {} > {}", r[k], r[k - 1]);
        }
    }
}

#[test]
fn objective_settles_on_the_optimum() {
    for problem in sample_problems(100, 6) {
        let sol = solve_qp(&problem, &QpSettings::default(), &WarmStart::default()).unwrap();
        let h = &sol.objective_history;
        let scale = 1.0 + sol.objective.abs();
        let last = h[h.len() - 1];
        assert!((last - sol.objective).abs() < 1e-6 * scale, "{last} vs {}", sol.objective);
    }
}
