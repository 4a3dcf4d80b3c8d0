//! Outlier-robust OT variants reduced to the exact solver.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{check_dims, check_weights, solve_exact, CostKind, CostMatrix, SolverTag, TransportPlan, MASS_TOL};
use crate::error::{Error, Result};

/// Transports exactly `mass` units, leaving the rest of both measures
/// unmatched.
///
/// Solved as a balanced problem with one dummy row and one dummy column: real
/// points reach the dummy at zero cost, and the dummy-dummy cell costs
/// `2 max(C) + 1` so it is never used.
pub fn partial_ot(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix, mass: f64) -> Result<TransportPlan> {
    check_dims(a, b, cost)?;
    let sa = check_weights(a, "source")?;
    let sb = check_weights(b, "target")?;
    if !(mass > 0.0) || mass > sa.min(sb) + MASS_TOL {
        return Err(Error::InvalidMass(mass));
    }
    let (n, m) = (a.len(), b.len());
    let mut aug = Array2::zeros((n + 1, m + 1));
    aug.slice_mut(s![..n, ..m]).assign(cost.values());
    aug[[n, m]] = 2.0 * cost.max() + 1.0;
    let mut a_aug = Array1::zeros(n + 1);
    a_aug.slice_mut(s![..n]).assign(&a);
    a_aug[n] = (sb - mass).max(0.0);
    let mut b_aug = Array1::zeros(m + 1);
    b_aug.slice_mut(s![..m]).assign(&b);
    b_aug[m] = (sa - mass).max(0.0);

    let aug_cost = CostMatrix::new(aug, CostKind::Euclidean)?;
    let full = solve_exact(a_aug.view(), b_aug.view(), &aug_cost)?;
    let coupling = full.coupling.slice(s![..n, ..m]).to_owned();
    let objective = (&coupling * cost.values()).sum();
    let mut plan = TransportPlan::from_coupling(coupling, objective, SolverTag::Partial);
    plan.iterations = full.iterations;
    Ok(plan)
}

/// Exact OT on the truncated cost `min(C, 2 lambda)`.
pub fn truncated_ot(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix, lambda: f64) -> Result<TransportPlan> {
    let truncated = cost.truncated(lambda)?;
    let mut plan = solve_exact(a, b, &truncated)?;
    plan.solver = SolverTag::Truncated;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotMode {
    Partial,
    Truncated,
}

/// Truncation level used by [`rot`] in truncated mode: half the empirical
/// `(1 - rho)`-quantile (nearest rank) of the cost entries, so that the
/// costliest `rho` fraction of pairs is capped.
pub fn rot_lambda(cost: &CostMatrix, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let mut v: Vec<f64> = cost.values().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let rank = ((1.0 - rho) * v.len() as f64).ceil() as usize;
    let q = v[rank.clamp(1, v.len()) - 1];
    if q <= 0.0 {
        return Err(Error::InvalidParameter(format!("cost quantile at rho = {rho} is zero")));
    }
    Ok(q / 2.0)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..0.5).contains(&rho) {
        return Err(Error::InvalidParameter(format!("rho must lie in [0, 0.5), got {rho}")));
    }
    Ok(())
}

/// Robust OT with a contamination budget `rho`.
///
/// `Partial` trims `rho` of the mass on each side (transports
/// `(1 - 2 rho) min(|a|, |b|)`); `Truncated` caps the cost at the level given by
/// [`rot_lambda`]. `rho = 0` is plain exact OT.
pub fn rot(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix, rho: f64, mode: RotMode) -> Result<TransportPlan> {
    check_rho(rho)?;
    if rho == 0.0 {
        return solve_exact(a, b, cost);
    }
    match mode {
        RotMode::Partial => {
            let mass = (1.0 - 2.0 * rho) * check_weights(a, "source")?.min(check_weights(b, "target")?);
            partial_ot(a, b, cost, mass)
        }
        RotMode::Truncated => truncated_ot(a, b, cost, rot_lambda(cost, rho)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cm(v: Array2<f64>) -> CostMatrix {
        CostMatrix::new(v, CostKind::Euclidean).unwrap()
    }

    #[test]
    fn full_mass_equals_exact() {
        let c = cm(array![[0.3, 0.9, 0.1], [0.5, 0.2, 0.8], [0.7, 0.4, 0.6]]);
        let a = Array1::from_elem(3, 1.0 / 3.0);
        let exact = solve_exact(a.view(), a.view(), &c).unwrap();
        let partial = partial_ot(a.view(), a.view(), &c, 1.0).unwrap();
        assert!((exact.objective - partial.objective).abs() < 1e-12);
        assert!((partial.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cheapest_half() {
        // {0, 1} -> {0, 10}
        let c = cm(array![[0.0, 10.0], [1.0, 9.0]]);
        let a = array![0.5, 0.5];
        let plan = partial_ot(a.view(), a.view(), &c, 0.5).unwrap();
        assert_eq!(plan.objective, 0.0);
        assert!((plan.coupling[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((plan.total_mass() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn partial_respects_marginal_bounds() {
        let c = cm(array![[0.3, 0.9, 0.1], [0.5, 0.2, 0.8]]);
        let a = array![0.6, 0.4];
        let b = array![0.2, 0.3, 0.5];
        let plan = partial_ot(a.view(), b.view(), &c, 0.7).unwrap();
        assert!((plan.total_mass() - 0.7).abs() < 1e-9);
        assert!(plan.row_marginals.iter().zip(a.iter()).all(|(r, w)| *r <= w + 1e-12));
        assert!(plan.col_marginals.iter().zip(b.iter()).all(|(r, w)| *r <= w + 1e-12));
    }

    #[test]
    fn partial_mass_out_of_range() {
        let c = cm(array![[1.0]]);
        let a = array![1.0];
        assert!(matches!(partial_ot(a.view(), a.view(), &c, 0.0), Err(Error::InvalidMass(_))));
        assert!(matches!(partial_ot(a.view(), a.view(), &c, 1.5), Err(Error::InvalidMass(_))));
    }

    #[test]
    fn inactive_truncation_is_exact() {
        let c = cm(array![[0.3, 0.9], [0.5, 0.2]]);
        let a = array![0.5, 0.5];
        let exact = solve_exact(a.view(), a.view(), &c).unwrap();
        let t = truncated_ot(a.view(), a.view(), &c, 0.45).unwrap();
        assert_eq!(exact.coupling, t.coupling);
        assert_eq!(exact.objective, t.objective);
        assert_eq!(t.solver, SolverTag::Truncated);
    }

    #[test]
    fn tiny_lambda_caps_everything() {
        let c = cm(array![[0.3, 0.9], [0.5, 0.2]]);
        let a = array![0.5, 0.5];
        let t = truncated_ot(a.view(), a.view(), &c, 1e-6).unwrap();
        assert!((t.objective - 2e-6).abs() < 1e-15);
    }

    #[test]
    fn rot_modes() {
        let c = cm(array![[0.3, 0.9], [0.5, 0.2]]);
        let a = array![0.5, 0.5];
        let exact = solve_exact(a.view(), a.view(), &c).unwrap();
        let r0 = rot(a.view(), a.view(), &c, 0.0, RotMode::Partial).unwrap();
        assert_eq!(r0.coupling, exact.coupling);
        let rp = rot(a.view(), a.view(), &c, 0.05, RotMode::Partial).unwrap();
        assert!((rp.total_mass() - 0.9).abs() < 1e-9);
        assert!(rot(a.view(), a.view(), &c, 0.5, RotMode::Partial).is_err());
        // quantile of {0.2, 0.3, 0.5, 0.9} at 0.75 -> rank 3 -> 0.5
        assert_eq!(rot_lambda(&c, 0.25).unwrap(), 0.25);
    }
}
