use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use srot_core::ot::{solve_exact, CostKind, CostMatrix};
use srot_core::rng::seeded_rng;

mod common;
use common::permutation_oracle;

fn random_cost(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * 10.0)
}

fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

#[test]
fn matches_permutation_enumeration() {
    for n in 1..=6 {
        for seed in 0..20 {
            let c = random_cost(n, n, 100 * n as u64 + seed);
            let cost = CostMatrix::new(c.clone(), CostKind::Euclidean).unwrap();
            let plan = solve_exact(uniform(n).view(), uniform(n).view(), &cost).unwrap();
            let oracle = permutation_oracle(&c);
            assert!((plan.objective - oracle).abs() <= 1e-9, "n={n} seed={seed}: {} vs {oracle}", plan.objective);
        }
    }
}

#[test]
fn integer_costs_with_ties_match_oracle() {
    let mut rng = seeded_rng(7);
    for _ in 0..50 {
        let c = Array2::from_shape_fn((5, 5), |_| rng.random_range(0..3) as f64);
        let cost = CostMatrix::new(c.clone(), CostKind::Euclidean).unwrap();
        let plan = solve_exact(uniform(5).view(), uniform(5).view(), &cost).unwrap();
        assert!((plan.objective - permutation_oracle(&c)).abs() <= 1e-12);
    }
}

/// Dual certificate: feasibility `f_i + g_j <= C_ij`, complementary
/// slackness on the support, and zero gap.
fn check_certificate(a: &Array1<f64>, b: &Array1<f64>, c: &Array2<f64>, tol: f64) {
    let cost = CostMatrix::new(c.clone(), CostKind::Euclidean).unwrap();
    let plan = solve_exact(a.view(), b.view(), &cost).unwrap();
    let pot = plan.potentials.as_ref().expect("exact solver returns potentials");
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for ((i, j), &cij) in c.indexed_iter() {
        let slack = cij - pot.source[i] - pot.target[j];
        assert!(slack >= -tol * scale, "dual infeasible at ({i},{j}): {slack}");
        if plan.coupling[[i, j]] > 1e-12 {
            assert!(slack.abs() <= tol * scale, "slackness violated at ({i},{j}): {slack}");
        }
    }
    let dual = a.dot(&pot.source) + b.dot(&pot.target);
    assert!((plan.objective - dual).abs() <= 1e-7 * scale.max(1.0));
    assert!((plan.row_marginals.clone() - a).iter().all(|d| d.abs() <= 1e-9));
    assert!((plan.col_marginals.clone() - b).iter().all(|d| d.abs() <= 1e-9));
}

fn weights(raw: Vec<f64>) -> Array1<f64> {
    let s: f64 = raw.iter().sum();
    Array1::from(raw) / s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_certificate_holds(
        (n, m) in (1usize..9, 1usize..9),
        seed in any::<u64>(),
        wa in proptest::collection::vec(0.05f64..1.0, 9),
        wb in proptest::collection::vec(0.05f64..1.0, 9),
    ) {
        let a = weights(wa[..n].to_vec());
        let b = weights(wb[..m].to_vec());
        check_certificate(&a, &b, &random_cost(n, m, seed), 1e-9);
    }

    #[test]
    fn vertex_solution_is_sparse(n in 1usize..12, m in 1usize..12, seed in any::<u64>()) {
        let c = random_cost(n, m, seed);
        let cost = CostMatrix::new(c, CostKind::Euclidean).unwrap();
        let plan = solve_exact(uniform(n).view(), uniform(m).view(), &cost).unwrap();
        prop_assert!(plan.support_size(0.0) < n + m);
        prop_assert!(plan.coupling.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn transposed_problem_has_same_value(n in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
        let c = random_cost(n, m, seed);
        let fwd = solve_exact(uniform(n).view(), uniform(m).view(), &CostMatrix::new(c.clone(), CostKind::Euclidean).unwrap()).unwrap();
        let bwd = solve_exact(uniform(m).view(), uniform(n).view(), &CostMatrix::new(c.t().to_owned(), CostKind::Euclidean).unwrap()).unwrap();
        prop_assert!((fwd.objective - bwd.objective).abs() <= 1e-9);
    }
}

#[test]
fn mass_mismatch_is_rejected() {
    let c = random_cost(2, 2, 0);
    let cost = CostMatrix::new(c, CostKind::Euclidean).unwrap();
    let a = Array1::from(vec![0.5, 0.5]);
    let b = Array1::from(vec![0.5, 0.6]);
    assert!(solve_exact(a.view(), b.view(), &cost).is_err());
}
