mod common;

use common::{enumerate_qp, random_qp};
use dmpc::qp::{kkt_residuals, solve_qp, QpProblem, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance() -> impl Strategy<Value = QpProblem> {
    (any::<u64>(), 1usize..=6, 0usize..=8).prop_map(|(seed, n, m)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_qp(&mut rng, n, m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn agrees_with_enumeration(p in instance()) {
        let sol = solve_qp(&p, None, 1e-10, 500).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let (best, _) = enumerate_qp(&p);
        prop_assert!((p.objective(&sol.u_star) - best).abs() <= 1e-7 * (1.0 + best.abs()));
        prop_assert!(kkt_residuals(&p, &sol.u_star, &sol.lambda).max() <= 1e-8);
        prop_assert!(sol.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn warm_start_returns_the_same_point(p in instance(), seed in any::<u64>()) {
        let cold = solve_qp(&p, None, 1e-10, 500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let hint = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-2.0..2.0));
        let mut solver = QpSolver::default();
        for start in [Some(&cold.u_star), Some(&hint)] {
            let warm = solver.solve(&p, start).unwrap();
            prop_assert_eq!(warm.status, QpStatus::Optimal);
            prop_assert!((&warm.u_star - &cold.u_star).amax() <= 1e-7);
        }
    }
}

#[test]
fn box_constraints_clip_the_unconstrained_minimum() {
    // Bound rows in the shape the OCP produces: +e_i and -e_i pairs.
    let n = 4;
    let h = DMatrix::identity(n, n);
    let target = DVector::from_vec(vec![3.0, -7.0, 0.5, 1.9]);
    let f = -&target;
    let mut a = DMatrix::zeros(2 * n, n);
    let mut b = DVector::zeros(2 * n);
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        b[2 * i] = 2.0;
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i + 1] = 5.0;
    }
    let p = QpProblem::new(h, f, a, b).unwrap();
    let sol = solve_qp(&p, None, 1e-10, 100).unwrap();
    let want = [2.0, -5.0, 0.5, 1.9];
    for (got, want) in sol.u_star.iter().zip(want) {
        assert!((got - want).abs() < 1e-12);
    }
    let (best, _) = enumerate_qp(&p);
    assert!((p.objective(&sol.u_star) - best).abs() < 1e-12);
}

#[test]
fn contradictory_rows_are_infeasible() {
    let h = DMatrix::identity(2, 2);
    let f = DVector::zeros(2);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]);
    let b = DVector::from_vec(vec![-1.0, -1.0]);
    let p = QpProblem::new(h, f, a, b).unwrap();
    assert_eq!(
        solve_qp(&p, None, 1e-10, 100).unwrap().status,
        QpStatus::Infeasible
    );
}
