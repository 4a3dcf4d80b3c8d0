//! Discrete optimal transport solvers.
//!
//! * [`solve_exact`]: transportation LP via the network simplex.
//! * [`sinkhorn`] / [`sinkhorn_unbalanced`]: entropic balanced and KL-penalized
//!   unbalanced OT, in the scaling or the log domain.
//! * [`partial_ot`], [`truncated_ot`], [`rot`]: outlier-robust variants built on
//!   the exact solver.

mod network_simplex;
mod robust;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

pub use network_simplex::solve_exact;
pub use robust::{partial_ot, rot, rot_lambda, truncated_ot, RotMode};
pub use sinkhorn::{sinkhorn, sinkhorn_unbalanced, sinkhorn_with_trace};

/// Entries above this count are built in parallel.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    Euclidean,
    SquaredEuclidean,
    /// `min(c, 2 lambda)` applied to the Euclidean cost.
    Truncated {
        lambda: f64,
    },
    /// Euclidean cost plus classifier-based terms scaled by `gamma`.
    SrotSoft {
        gamma: f64,
    },
}

/// Pairwise ground costs between a source and a target support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    values: Array2<f64>,
    kind: CostKind,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>, kind: CostKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!("cost entry {v} is not a finite nonnegative value")));
        }
        if let CostKind::Truncated { lambda } = kind {
            if values.iter().any(|v| *v > 2.0 * lambda) {
                return Err(Error::InvalidParameter(format!("truncated cost exceeds 2 lambda = {}", 2.0 * lambda)));
            }
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn source_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Elementwise `min(c, 2 lambda)`.
    pub fn truncated(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        let cap = 2.0 * lambda;
        Ok(Self { values: self.values.mapv(|c| c.min(cap)), kind: CostKind::Truncated { lambda } })
    }
}

fn pairwise(x: &Array2<f64>, y: &Array2<f64>, f: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64 + Sync) -> Array2<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    let fill_row = |i: usize, row: &mut [f64]| {
        let xi = x.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = f(xi, y.row(j));
        }
    };
    let mut data = vec![0.0; n * m];
    if n * m >= PAR_THRESHOLD {
        data.par_chunks_mut(m).enumerate().for_each(|(i, row)| fill_row(i, row));
    } else {
        data.chunks_mut(m).enumerate().for_each(|(i, row)| fill_row(i, row));
    }
    Array2::from_shape_vec((n, m), data).expect("shape matches buffer")
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Euclidean distances between the rows of `x` and `y`.
pub fn euclidean_matrix(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    pairwise(x, y, |a, b| sq_dist(a, b).sqrt())
}

pub fn cost_matrix(source: &DiscreteMeasure, target: &DiscreteMeasure, kind: CostKind) -> Result<CostMatrix> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: source.dim(), found: target.dim() });
    }
    let (x, y) = (source.points(), target.points());
    match kind {
        CostKind::Euclidean => CostMatrix::new(euclidean_matrix(x, y), kind),
        CostKind::SquaredEuclidean => CostMatrix::new(pairwise(x, y, sq_dist), kind),
        CostKind::Truncated { lambda } => CostMatrix::new(euclidean_matrix(x, y), CostKind::Euclidean)?.truncated(lambda),
        CostKind::SrotSoft { .. } => Err(Error::UnsupportedCost(kind)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    Exact,
    Sinkhorn,
    Unbalanced,
    Partial,
    Truncated,
    SrotHard,
    SrotSoft,
}

/// Entropic / unbalanced solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Entropic regularization.
    pub epsilon: f64,
    /// Marginal KL penalty of the unbalanced problem.
    pub tau: f64,
    pub max_iters: usize,
    /// Stopping threshold: marginal violation (balanced) or potential change (unbalanced).
    pub tol: f64,
    pub log_domain: bool,
}

impl SolverConfig {
    pub const LOG_DOMAIN_BELOW: f64 = 0.05;

    /// Defaults for a given epsilon; the log domain is used below `0.05`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, log_domain: epsilon < Self::LOG_DOMAIN_BELOW, ..Self::default() }
    }

    pub fn tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, tau: 1.0, max_iters: 10_000, tol: 1e-9, log_domain: false }
    }
}

/// Dual potentials `(f, g)` with the sign convention `f_i + g_j <= C_ij` for
/// the exact problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub source: Array1<f64>,
    pub target: Array1<f64>,
}

/// A coupling together with its marginals and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub objective: f64,
    pub row_marginals: Array1<f64>,
    pub col_marginals: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub solver: SolverTag,
    pub potentials: Option<Potentials>,
    pub config: Option<SolverConfig>,
}

impl TransportPlan {
    pub(crate) fn from_coupling(coupling: Array2<f64>, objective: f64, solver: SolverTag) -> Self {
        let row_marginals = coupling.sum_axis(Axis(1));
        let col_marginals = coupling.sum_axis(Axis(0));
        Self { coupling, objective, row_marginals, col_marginals, iterations: 0, converged: true, solver, potentials: None, config: None }
    }

    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.coupling * cost.values()).sum()
    }

    /// Number of entries strictly above `threshold`.
    pub fn support_size(&self, threshold: f64) -> usize {
        self.coupling.iter().filter(|v| **v > threshold).count()
    }
}

pub(crate) fn check_weights(w: ArrayView1<f64>, what: &str) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if let Some(v) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidWeights(format!("{what} weight {v}")));
    }
    Ok(w.sum())
}

pub(crate) fn check_dims(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix) -> Result<()> {
    if a.len() != cost.source_dim() {
        return Err(Error::DimensionMismatch { expected: cost.source_dim(), found: a.len() });
    }
    if b.len() != cost.target_dim() {
        return Err(Error::DimensionMismatch { expected: cost.target_dim(), found: b.len() });
    }
    Ok(())
}

pub(crate) const MASS_TOL: f64 = 1e-9;

pub(crate) fn check_balanced(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, f64)> {
    let sa = check_weights(a, "source")?;
    let sb = check_weights(b, "target")?;
    if (sa - sb).abs() > MASS_TOL {
        return Err(Error::MassMismatch { source_mass: sa, target_mass: sb });
    }
    Ok((sa, sb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn measure(points: Array2<f64>) -> DiscreteMeasure {
        DiscreteMeasure::new(points, None, "m").unwrap()
    }

    #[test]
    fn identical_supports_have_zero_diagonal() {
        let m = measure(array![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]]);
        let c = cost_matrix(&m, &m, CostKind::Euclidean).unwrap();
        for i in 0..3 {
            assert_eq!(c.values()[[i, i]], 0.0);
        }
    }

    #[test]
    fn three_four_five() {
        let m = measure(array![[0.0, 0.0], [3.0, 4.0]]);
        let c = cost_matrix(&m, &m, CostKind::Euclidean).unwrap();
        assert_eq!(c.values()[[0, 1]], 5.0);
        assert_eq!(c.values()[[1, 0]], 5.0);
        let t = cost_matrix(&m, &m, CostKind::Truncated { lambda: 2.0 }).unwrap();
        assert_eq!(t.values()[[0, 1]], 4.0);
        assert_eq!(t.kind(), CostKind::Truncated { lambda: 2.0 });
        let sq = cost_matrix(&m, &m, CostKind::SquaredEuclidean).unwrap();
        assert_eq!(sq.values()[[0, 1]], 25.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = measure(array![[0.0, 0.0]]);
        let b = measure(array![[0.0, 0.0, 0.0]]);
        assert!(matches!(cost_matrix(&a, &b, CostKind::Euclidean), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_negative_entries() {
        assert!(CostMatrix::new(array![[0.0, -1.0]], CostKind::Euclidean).is_err());
        assert!(CostMatrix::new(array![[0.0, 5.0]], CostKind::Truncated { lambda: 2.0 }).is_err());
    }

    #[test]
    fn parallel_build_matches_serial() {
        let pts = Array2::from_shape_fn((200, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64 * 0.1);
        let big = euclidean_matrix(&pts, &pts);
        for i in (0..200).step_by(37) {
            for j in (0..200).step_by(11) {
                assert_eq!(big[[i, j]], sq_dist(pts.row(i), pts.row(j)).sqrt());
            }
        }
    }
}
