//! Classifier-based outlier mitigation for OT.
//!
//! A sample is flagged when the source/target classifier assigns it to the
//! opposite side. Two strategies use the flags:
//!
//! * hard: flagged samples get zero weight and the rest are renormalized to
//!   uniform weights, then the base solver runs on the Euclidean cost;
//! * soft: the ground cost is inflated by `gamma / CE` terms that blow up for
//!   samples confidently predicted on the wrong side, and a robust solver
//!   (partial OT by default) is left to skip them.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_side, ClassifierModel};
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Side};
use crate::ot::{
    cost_matrix, partial_ot, sinkhorn, sinkhorn_unbalanced, solve_exact, truncated_ot, CostKind, CostMatrix, SolverConfig, SolverTag,
    TransportPlan,
};

pub const DEFAULT_CE_FLOOR: f64 = 1e-6;

/// Per-sample detection result for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierMask {
    /// `true` marks a detected outlier.
    pub flags: Vec<bool>,
    /// Probability of the predicted side.
    pub confidences: Vec<f64>,
    pub side: Side,
}

impl OutlierMask {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn n_flagged(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn keep(&self) -> Vec<bool> {
        self.flags.iter().map(|f| !f).collect()
    }

    /// Mask flagging nothing.
    pub fn none(n: usize, side: Side) -> Self {
        Self { flags: vec![false; n], confidences: vec![1.0; n], side }
    }
}

/// Flags every sample of `measure` that the classifier assigns to the side
/// opposite to `assigned`.
pub fn detect_outliers(model: &ClassifierModel, measure: &DiscreteMeasure, assigned: Side) -> Result<OutlierMask> {
    let sides = vec![assigned; measure.len()];
    let preds = predict_side(model, measure.points().view(), &sides)?;
    Ok(OutlierMask {
        flags: preds.iter().map(|p| p.side != assigned).collect(),
        confidences: preds.iter().map(|p| p.confidence).collect(),
        side: assigned,
    })
}

/// Source and target masks.
pub fn detect_both(model: &ClassifierModel, source: &DiscreteMeasure, target: &DiscreteMeasure) -> Result<(OutlierMask, OutlierMask)> {
    Ok((detect_outliers(model, source, Side::Source)?, detect_outliers(model, target, Side::Target)?))
}

/// Zero weight on flagged samples, `1 / n_unflagged` elsewhere.
pub fn hard_weights(mask: &OutlierMask) -> Result<Array1<f64>> {
    let kept = mask.len() - mask.n_flagged();
    if kept == 0 {
        return Err(Error::EmptyMeasure);
    }
    let w = 1.0 / kept as f64;
    Ok(mask.flags.iter().map(|f| if *f { 0.0 } else { w }).collect())
}

/// Largest entry of a Euclidean cost matrix.
pub fn default_gamma(euclid: &CostMatrix) -> Result<f64> {
    let g = euclid.max();
    if !(g > 0.0) {
        return Err(Error::InvalidGamma(g));
    }
    Ok(g)
}

fn check_gamma(gamma: f64) -> Result<f64> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(gamma)
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// Inverse cross-entropy terms of the soft cost, without the `gamma` factor:
/// `rows[i] = 1 / max(CE(target, f(x_i)), floor)` for source samples and
/// `cols[j] = 1 / max(CE(source, f(z_j)), floor)` for target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTerms {
    pub rows: Array1<f64>,
    pub cols: Array1<f64>,
}

fn inverse_ce(model: &ClassifierModel, points: &Array2<f64>, label: Side, floor: f64) -> Result<Array1<f64>> {
    let logits = model.logits(points.view())?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|z| {
            let mx = z[0].max(z[1]);
            let lse = mx + ((z[0] - mx).exp() + (z[1] - mx).exp()).ln();
            let ce = lse - z[label.class_index()];
            1.0 / ce.max(floor)
        })
        .collect())
}

pub fn soft_terms(model: &ClassifierModel, source: &DiscreteMeasure, target: &DiscreteMeasure, ce_floor: f64) -> Result<SoftTerms> {
    if !(ce_floor > 0.0) {
        return Err(Error::InvalidParameter(format!("ce_floor must be positive, got {ce_floor}")));
    }
    Ok(SoftTerms {
        rows: inverse_ce(model, source.points(), Side::Target, ce_floor)?,
        cols: inverse_ce(model, target.points(), Side::Source, ce_floor)?,
    })
}

/// `euclid[i, j] + gamma (rows[i] + cols[j])`.
pub fn soft_cost_from_terms(euclid: &CostMatrix, terms: &SoftTerms, gamma: f64) -> Result<CostMatrix> {
    let gamma = check_gamma(gamma)?;
    let mut values = euclid.values().clone();
    for ((i, j), v) in values.indexed_iter_mut() {
        *v += gamma * (terms.rows[i] + terms.cols[j]);
    }
    CostMatrix::new(values, CostKind::SrotSoft { gamma })
}

/// Euclidean cost plus `gamma / max(CE, ce_floor)` terms for both samples of
/// each pair.
pub fn soft_cost(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    model: &ClassifierModel,
    gamma: f64,
    ce_floor: f64,
) -> Result<CostMatrix> {
    let euclid = cost_matrix(source, target, CostKind::Euclidean)?;
    soft_cost_from_terms(&euclid, &soft_terms(model, source, target, ce_floor)?, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSolver {
    Exact,
    Sinkhorn,
    Uot,
    Partial,
    Truncated { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrotConfig {
    /// `None` selects [`default_gamma`].
    pub gamma: Option<f64>,
    /// Rescale the less contaminated side to the transported mass before a
    /// soft solve.
    pub rescale: bool,
    /// `None` selects exact OT for the hard strategy and partial OT for the
    /// soft one.
    pub base_solver: Option<BaseSolver>,
    pub solver: SolverConfig,
    /// Mass moved by a partial base solver; `None` picks the full mass for the
    /// hard strategy and the smaller unflagged mass for the soft one.
    pub partial_mass: Option<f64>,
    pub ce_floor: f64,
}

impl Default for SrotConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            rescale: false,
            base_solver: None,
            solver: SolverConfig::default(),
            partial_mass: None,
            ce_floor: DEFAULT_CE_FLOOR,
        }
    }
}

/// Runs a base solver; `mass` is only read by the partial solver and defaults
/// to the smaller total mass.
pub fn solve_base(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    cost: &CostMatrix,
    base: BaseSolver,
    solver: &SolverConfig,
    mass: Option<f64>,
) -> Result<TransportPlan> {
    match base {
        BaseSolver::Exact => solve_exact(a, b, cost),
        BaseSolver::Sinkhorn => sinkhorn(a, b, cost, solver),
        BaseSolver::Uot => sinkhorn_unbalanced(a, b, cost, solver),
        BaseSolver::Partial => partial_ot(a, b, cost, mass.unwrap_or_else(|| a.sum().min(b.sum()))),
        BaseSolver::Truncated { lambda } => truncated_ot(a, b, cost, lambda),
    }
}

/// Hard strategy with precomputed masks.
pub fn srot_hard_masked(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    source_mask: &OutlierMask,
    target_mask: &OutlierMask,
    config: &SrotConfig,
) -> Result<TransportPlan> {
    check_mask(source_mask, source)?;
    check_mask(target_mask, target)?;
    let a = hard_weights(source_mask)?;
    let b = hard_weights(target_mask)?;
    let cost = cost_matrix(source, target, CostKind::Euclidean)?;
    let base = config.base_solver.unwrap_or(BaseSolver::Exact);
    let mut plan = solve_base(a.view(), b.view(), &cost, base, &config.solver, config.partial_mass)?;
    plan.solver = SolverTag::SrotHard;
    Ok(plan)
}

/// Detects outliers on both sides, zeroes their weights and solves on the
/// Euclidean cost.
pub fn srot_hard(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    model: &ClassifierModel,
    config: &SrotConfig,
) -> Result<TransportPlan> {
    let (sm, tm) = detect_both(model, source, target)?;
    srot_hard_masked(source, target, &sm, &tm, config)
}

fn check_mask(mask: &OutlierMask, measure: &DiscreteMeasure) -> Result<()> {
    if mask.len() != measure.len() {
        return Err(Error::DimensionMismatch { expected: measure.len(), found: mask.len() });
    }
    Ok(())
}

fn unflagged_mass(weights: &Array1<f64>, mask: &OutlierMask) -> f64 {
    weights.iter().zip(&mask.flags).filter(|(_, f)| !**f).map(|(w, _)| w).sum()
}

/// Marginals and transported mass of the soft strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSetup {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub mass: f64,
}

/// Chooses the partial mass and applies the optional rescaling.
///
/// The default mass is the smaller unflagged mass of the two sides. With
/// `rescale`, the side carrying less flagged mass (the target on ties) is
/// scaled to total mass `mass`, so a partial solve moves all of it.
pub fn soft_setup(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    source_mask: &OutlierMask,
    target_mask: &OutlierMask,
    config: &SrotConfig,
) -> Result<SoftSetup> {
    check_mask(source_mask, source)?;
    check_mask(target_mask, target)?;
    let mut a = source.weights().clone();
    let mut b = target.weights().clone();
    let (ua, ub) = (unflagged_mass(&a, source_mask), unflagged_mass(&b, target_mask));
    let mass = config.partial_mass.unwrap_or(ua.min(ub));
    if !(mass > 0.0) {
        return Err(Error::InvalidMass(mass));
    }
    if config.rescale {
        let (fa, fb) = (a.sum() - ua, b.sum() - ub);
        let side = if fa < fb { &mut a } else { &mut b };
        let total = side.sum();
        side.mapv_inplace(|w| w * mass / total);
    }
    Ok(SoftSetup { a, b, mass })
}

/// Soft strategy with precomputed masks and cost terms.
pub fn srot_soft_with_terms(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    source_mask: &OutlierMask,
    target_mask: &OutlierMask,
    terms: &SoftTerms,
    config: &SrotConfig,
) -> Result<TransportPlan> {
    let euclid = cost_matrix(source, target, CostKind::Euclidean)?;
    let gamma = match config.gamma {
        Some(g) => check_gamma(g)?,
        None => default_gamma(&euclid)?,
    };
    let cost = soft_cost_from_terms(&euclid, terms, gamma)?;
    let setup = soft_setup(source, target, source_mask, target_mask, config)?;
    let base = config.base_solver.unwrap_or(BaseSolver::Partial);
    let mut plan = solve_base(setup.a.view(), setup.b.view(), &cost, base, &config.solver, Some(setup.mass))?;
    plan.solver = SolverTag::SrotSoft;
    Ok(plan)
}

/// Builds the soft cost (gamma defaults to the largest Euclidean distance),
/// optionally rescales, and solves with the base solver.
pub fn srot_soft(
    source: &DiscreteMeasure,
    target: &DiscreteMeasure,
    model: &ClassifierModel,
    config: &SrotConfig,
) -> Result<TransportPlan> {
    let (sm, tm) = detect_both(model, source, target)?;
    let terms = soft_terms(model, source, target, config.ce_floor)?;
    srot_soft_with_terms(source, target, &sm, &tm, &terms, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{init_model, Activation};
    use ndarray::array;

    fn mask(flags: &[bool]) -> OutlierMask {
        OutlierMask { flags: flags.to_vec(), confidences: vec![0.9; flags.len()], side: Side::Source }
    }

    /// Linear model predicting target for x0 > 0 with logit gap `scale * x0`.
    fn split_model(scale: f64) -> ClassifierModel {
        let mut m = init_model(&[2, 2], Activation::Relu, 0).unwrap();
        m.weights_mut()[0].assign(&array![[-scale / 2.0, scale / 2.0], [0.0, 0.0]]);
        m
    }

    fn measure(points: Array2<f64>) -> DiscreteMeasure {
        DiscreteMeasure::new(points, None, "m").unwrap()
    }

    #[test]
    fn hard_weight_examples() {
        let w = hard_weights(&mask(&[true, false, false, false])).unwrap();
        assert_eq!(w, array![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(hard_weights(&mask(&[false; 4])).unwrap(), Array1::from_elem(4, 0.25));
        assert!(matches!(hard_weights(&mask(&[true; 3])), Err(Error::EmptyMeasure)));
    }

    #[test]
    fn gamma_defaults() {
        let c = CostMatrix::new(array![[1.0, 5.0], [2.0, 3.0]], CostKind::Euclidean).unwrap();
        assert_eq!(default_gamma(&c).unwrap(), 5.0);
        let z = CostMatrix::new(Array2::zeros((2, 2)), CostKind::Euclidean).unwrap();
        assert!(matches!(default_gamma(&z), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn detection_follows_prediction() {
        let m = split_model(10.0);
        let src = measure(array![[-1.0, 0.0], [-0.5, 1.0], [0.7, 0.0]]);
        let mask = detect_outliers(&m, &src, Side::Source).unwrap();
        assert_eq!(mask.flags, vec![false, false, true]);
        assert!(mask.confidences.iter().all(|c| *c > 0.5));
    }

    #[test]
    fn soft_cost_dominates_euclidean_and_is_linear_in_gamma() {
        let m = split_model(4.0);
        let src = measure(array![[-1.0, 0.0], [0.5, 0.3]]);
        let tgt = measure(array![[1.0, 0.0], [-0.4, 0.2], [2.0, 1.0]]);
        let e = cost_matrix(&src, &tgt, CostKind::Euclidean).unwrap();
        let c1 = soft_cost(&src, &tgt, &m, 1.0, DEFAULT_CE_FLOOR).unwrap();
        let c2 = soft_cost(&src, &tgt, &m, 2.0, DEFAULT_CE_FLOOR).unwrap();
        assert_eq!(c1.kind(), CostKind::SrotSoft { gamma: 1.0 });
        for ((ev, v1), v2) in e.values().iter().zip(c1.values()).zip(c2.values()) {
            assert!(v1 >= ev);
            assert!(((v2 - ev) - 2.0 * (v1 - ev)).abs() < 1e-9 * (v2 - ev).abs().max(1.0));
        }
        // the misplaced source sample (row 1) costs more than the clean one
        assert!(c1.values()[[1, 0]] - e.values()[[1, 0]] > c1.values()[[0, 0]] - e.values()[[0, 0]]);
    }

    #[test]
    fn floor_caps_the_extra_term() {
        let m = split_model(1e4);
        let src = measure(array![[1.0, 0.0]]);
        let tgt = measure(array![[-1.0, 0.0]]);
        let terms = soft_terms(&m, &src, &tgt, 1e-6).unwrap();
        assert_eq!(terms.rows[0], 1e6);
        assert_eq!(terms.cols[0], 1e6);
    }

    #[test]
    fn hard_without_detections_recovers_base() {
        let m = split_model(10.0);
        let src = measure(array![[-1.0, 0.0], [-0.5, 1.0], [-2.0, 0.3]]);
        let tgt = measure(array![[1.0, 0.0], [0.5, 0.5], [2.0, -1.0]]);
        let plan = srot_hard(&src, &tgt, &m, &SrotConfig::default()).unwrap();
        let c = cost_matrix(&src, &tgt, CostKind::Euclidean).unwrap();
        let base = solve_exact(src.weights().view(), tgt.weights().view(), &c).unwrap();
        assert_eq!(plan.coupling, base.coupling);
        assert_eq!(plan.objective, base.objective);
        assert_eq!(plan.solver, SolverTag::SrotHard);
    }

    #[test]
    fn hard_zeroes_flagged_rows() {
        let m = split_model(10.0);
        let src = measure(array![[-1.0, 0.0], [-0.5, 1.0], [1.5, 0.3], [-2.0, 0.0]]);
        let tgt = measure(array![[1.0, 0.0], [0.5, 0.5], [2.0, -1.0], [1.0, 1.0]]);
        let plan = srot_hard(&src, &tgt, &m, &SrotConfig::default()).unwrap();
        assert!(plan.coupling.row(2).iter().all(|v| *v == 0.0));
        assert!((plan.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_partial_skips_flagged_rows() {
        let m = split_model(20.0);
        let src = measure(array![[-1.0, 0.0], [-0.5, 1.0], [1.5, 0.3], [-2.0, 0.0]]);
        let tgt = measure(array![[1.0, 0.0], [0.5, 0.5], [2.0, -1.0], [1.0, 1.0]]);
        let plan = srot_soft(&src, &tgt, &m, &SrotConfig::default()).unwrap();
        assert!((plan.total_mass() - 0.75).abs() < 1e-9);
        assert!(plan.coupling.row(2).iter().all(|v| *v == 0.0));
        assert_eq!(plan.solver, SolverTag::SrotSoft);
    }

    #[test]
    fn rescale_targets_cleaner_side() {
        let src = measure(array![[-1.0, 0.0], [-0.5, 1.0], [1.5, 0.3], [-2.0, 0.0]]);
        let tgt = measure(array![[1.0, 0.0], [0.5, 0.5], [2.0, -1.0], [1.0, 1.0]]);
        let sm = mask(&[false, false, true, false]);
        let tm = OutlierMask::none(4, Side::Target);
        let cfg = SrotConfig { rescale: true, ..SrotConfig::default() };
        let setup = soft_setup(&src, &tgt, &sm, &tm, &cfg).unwrap();
        assert_eq!(setup.mass, 0.75);
        assert_eq!(setup.a, *src.weights());
        assert!((setup.b.sum() - 0.75).abs() < 1e-12);
    }
}
