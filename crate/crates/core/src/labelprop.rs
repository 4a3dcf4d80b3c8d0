//! Label propagation through transport plans.
//!
//! A target point takes the label of the source point sending it the most
//! mass, provided that mass reaches a fraction of the target's weight.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{init_model, train, Activation, TrainConfig};
use crate::error::{Error, Result};
use crate::measures::{ContaminatedDataset, DiscreteMeasure, OutlierType};
use crate::ot::{cost_matrix, partial_ot, rot, CostKind, RotMode, TransportPlan};
use crate::rng::stream;
use crate::srot::{detect_both, hard_weights};

/// Points with class labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMeasure {
    pub measure: DiscreteMeasure,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledMeasure {
    pub fn new(measure: DiscreteMeasure, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        check_labels(&labels, measure.len(), n_classes)?;
        Ok(Self { measure, labels, n_classes })
    }
}

fn check_labels(labels: &[usize], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidDataset(format!("label {bad} outside 0..{n_classes}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagatedLabel {
    Class(usize),
    Unclassified,
}

impl PropagatedLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            PropagatedLabel::Class(c) => Some(c),
            PropagatedLabel::Unclassified => None,
        }
    }
}

/// Labels target `j` with the label of `argmax_i pi_ij` (lowest index on
/// ties) when that entry is positive and at least `threshold_frac * b_j`.
pub fn propagate_labels(
    plan: &TransportPlan,
    source_labels: &[usize],
    b: ArrayView1<f64>,
    threshold_frac: f64,
) -> Result<Vec<PropagatedLabel>> {
    let (n, m) = plan.coupling.dim();
    if source_labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: source_labels.len() });
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: b.len() });
    }
    if !(0.0..=1.0).contains(&threshold_frac) {
        return Err(Error::InvalidParameter(format!("threshold_frac must lie in [0, 1], got {threshold_frac}")));
    }
    Ok(plan
        .coupling
        .columns()
        .into_iter()
        .zip(b.iter())
        .map(|(col, &bj)| {
            let (best, mass) = col.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if mass > 0.0 && mass >= threshold_frac * bj {
                PropagatedLabel::Class(source_labels[best])
            } else {
                PropagatedLabel::Unclassified
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Correctly labeled clean targets over the number of clean targets.
    pub accuracy: f64,
    /// Correctly labeled clean targets over the number of classified targets;
    /// `None` when nothing was classified.
    pub labeled_accuracy: Option<f64>,
    pub n_classified: usize,
}

/// Accuracy metrics; outliers never count as correct.
pub fn accuracy(pred: &[PropagatedLabel], truth: &[usize], clean: &[bool]) -> Result<Accuracy> {
    if truth.len() != pred.len() {
        return Err(Error::DimensionMismatch { expected: pred.len(), found: truth.len() });
    }
    if clean.len() != pred.len() {
        return Err(Error::DimensionMismatch { expected: pred.len(), found: clean.len() });
    }
    let n_clean = clean.iter().filter(|c| **c).count();
    if n_clean == 0 {
        return Err(Error::InvalidDataset("no clean targets to score".into()));
    }
    let n_classified = pred.iter().filter(|p| p.class().is_some()).count();
    let correct = pred.iter().zip(truth).zip(clean).filter(|((p, t), c)| **c && p.class() == Some(**t)).count();
    Ok(Accuracy {
        accuracy: correct as f64 / n_clean as f64,
        labeled_accuracy: (n_classified > 0).then(|| correct as f64 / n_classified as f64),
        n_classified,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Row `j` is the plan-weighted mean of the source points; NaN when
    /// column `j` carries no mass.
    pub points: Array2<f64>,
    pub unprojected: Vec<bool>,
}

/// Barycentric projection `sum_i pi_ij x_i / sum_i pi_ij` of every target.
pub fn barycentric_projection(plan: &TransportPlan, source_points: ArrayView2<f64>) -> Result<Projection> {
    let (n, m) = plan.coupling.dim();
    if source_points.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: source_points.nrows() });
    }
    let mut points = plan.coupling.t().dot(&source_points);
    let mass = plan.coupling.sum_axis(Axis(0));
    let mut unprojected = vec![false; m];
    for ((mut row, &w), flag) in points.rows_mut().into_iter().zip(mass.iter()).zip(unprojected.iter_mut()) {
        if w > 0.0 {
            row /= w;
        } else {
            row.fill(f64::NAN);
            *flag = true;
        }
    }
    Ok(Projection { points, unprojected })
}

/// Contaminated dataset with class labels on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub data: ContaminatedDataset,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(data: ContaminatedDataset, source_labels: Vec<usize>, target_labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        check_labels(&source_labels, data.source.len(), n_classes)?;
        check_labels(&target_labels, data.target.len(), n_classes)?;
        Ok(Self { data, source_labels, target_labels, n_classes })
    }

    pub fn clean_targets(&self) -> Vec<bool> {
        self.data.target_outlier_truth.iter().map(|t| !t).collect()
    }
}

const LP_CLEAN_PER_CLASS: usize = 200;
const LP_FAR_CLASS: usize = 100;
const LP_TYPE2_PER_CLASS: usize = 50;
const LP_CLASS_OFFSET: f64 = 4.0;
const LP_FAR_OFFSET: f64 = 8.0;
const LP_DOMAIN_SHIFT: f64 = 4.0;
const LP_STD: f64 = 0.5;

/// Gaussian stand-in for the digits transfer task, in dimension `d >= 4`.
///
/// Source: classes 0 and 1 (200 each) around `4 e_0` and `4 e_1`, plus 100
/// type-I points of class 2 around `8 e_2`. Target: classes 0 and 1 (200 each)
/// shifted by `4 e_3`, plus 50 per class drawn from the unshifted source
/// distribution, which are type-II outliers.
pub fn gen_labelprop_analog(d: usize, seed: u64) -> Result<LabeledDataset> {
    if d < 4 {
        return Err(Error::InvalidParameter(format!("d must be at least 4, got {d}")));
    }
    let mut rng = stream(seed, 0x0001_ABE1);
    let mut sample = |class: usize, shifted: bool| -> Array1<f64> {
        let mut x: Array1<f64> = (0..d).map(|_| LP_STD * rng.sample::<f64, _>(StandardNormal)).collect();
        x[class] += if class == 2 { LP_FAR_OFFSET } else { LP_CLASS_OFFSET };
        if shifted {
            x[3] += LP_DOMAIN_SHIFT;
        }
        x
    };
    let mut src = Vec::new();
    let mut src_labels = Vec::new();
    let mut src_types = Vec::new();
    for class in 0..2 {
        for _ in 0..LP_CLEAN_PER_CLASS {
            src.push(sample(class, false));
            src_labels.push(class);
            src_types.push(None);
        }
    }
    for _ in 0..LP_FAR_CLASS {
        src.push(sample(2, false));
        src_labels.push(2);
        src_types.push(Some(OutlierType::TypeI));
    }
    let mut tgt = Vec::new();
    let mut tgt_labels = Vec::new();
    let mut tgt_types = Vec::new();
    for class in 0..2 {
        for _ in 0..LP_CLEAN_PER_CLASS {
            tgt.push(sample(class, true));
            tgt_labels.push(class);
            tgt_types.push(None);
        }
    }
    for class in 0..2 {
        for _ in 0..LP_TYPE2_PER_CLASS {
            tgt.push(sample(class, false));
            tgt_labels.push(class);
            tgt_types.push(Some(OutlierType::TypeII));
        }
    }
    let stack = |rows: &[Array1<f64>]| Array2::from_shape_fn((rows.len(), d), |(i, k)| rows[i][k]);
    let data = ContaminatedDataset::new(
        DiscreteMeasure::new(stack(&src), None, "source")?,
        DiscreteMeasure::new(stack(&tgt), None, "target")?,
        src_types,
        tgt_types,
    )?;
    LabeledDataset::new(data, src_labels, tgt_labels, 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelpropMethod {
    /// Partial OT moving mass `m`.
    Partial,
    /// Truncated-cost ROT with `rho = (1 - m) / 2`.
    Truncated,
    /// Hard SROT weights, then partial OT moving mass `m`.
    SrotHardPartial,
}

impl LabelpropMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelpropMethod::Partial => "partial",
            LabelpropMethod::Truncated => "truncated",
            LabelpropMethod::SrotHardPartial => "srot_hard_partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelpropConfig {
    pub threshold_frac: f64,
    /// Hidden layer widths of the side classifier.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classifier: TrainConfig,
}

impl Default for LabelpropConfig {
    fn default() -> Self {
        Self { threshold_frac: 0.25, hidden: vec![128, 128], activation: Activation::Relu, classifier: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelpropRow {
    pub method: LabelpropMethod,
    pub m: f64,
    pub accuracy: f64,
    pub labeled_accuracy: Option<f64>,
    pub n_classified: usize,
}

/// Source/target marginals and plan for one method at mass `m`.
fn solve_method(
    ds: &LabeledDataset,
    method: LabelpropMethod,
    m: f64,
    srot_weights: Option<&(Array1<f64>, Array1<f64>)>,
) -> Result<(TransportPlan, Array1<f64>)> {
    let (s, t) = (&ds.data.source, &ds.data.target);
    let cost = cost_matrix(s, t, CostKind::Euclidean)?;
    match method {
        LabelpropMethod::Partial => Ok((partial_ot(s.weights().view(), t.weights().view(), &cost, m)?, t.weights().clone())),
        LabelpropMethod::Truncated => {
            Ok((rot(s.weights().view(), t.weights().view(), &cost, (1.0 - m) / 2.0, RotMode::Truncated)?, t.weights().clone()))
        }
        LabelpropMethod::SrotHardPartial => {
            let (a, b) = srot_weights.expect("classifier weights are computed for SROT methods");
            Ok((partial_ot(a.view(), b.view(), &cost, m)?, b.clone()))
        }
    }
}

/// Accuracy of every method at every transported mass. The SROT method
/// trains the side classifier once on the dataset.
pub fn run_labelprop_experiment(
    ds: &LabeledDataset,
    methods: &[LabelpropMethod],
    mass_grid: &[f64],
    config: &LabelpropConfig,
) -> Result<Vec<LabelpropRow>> {
    if let Some(bad) = mass_grid.iter().find(|m| !(**m > 0.0 && **m <= 1.0)) {
        return Err(Error::InvalidMass(*bad));
    }
    if methods.is_empty() || mass_grid.is_empty() {
        return Ok(Vec::new());
    }
    let srot_weights = if methods.contains(&LabelpropMethod::SrotHardPartial) {
        let mut dims = vec![ds.data.source.dim()];
        dims.extend(&config.hidden);
        dims.push(2);
        let model = init_model(&dims, config.activation, config.classifier.seed)?;
        let (model, _) = train(model, &ds.data, &config.classifier)?;
        let (sm, tm) = detect_both(&model, &ds.data.source, &ds.data.target)?;
        Some((hard_weights(&sm)?, hard_weights(&tm)?))
    } else {
        None
    };
    let clean = ds.clean_targets();
    let jobs: Vec<(LabelpropMethod, f64)> = methods.iter().flat_map(|&me| mass_grid.iter().map(move |&m| (me, m))).collect();
    jobs.into_par_iter()
        .map(|(method, m)| {
            let (plan, b) = solve_method(ds, method, m, srot_weights.as_ref())?;
            let pred = propagate_labels(&plan, &ds.source_labels, b.view(), config.threshold_frac)?;
            let acc = accuracy(&pred, &ds.target_labels, &clean)?;
            Ok(LabelpropRow { method, m, accuracy: acc.accuracy, labeled_accuracy: acc.labeled_accuracy, n_classified: acc.n_classified })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{solve_exact, CostMatrix};
    use ndarray::array;

    fn plan(coupling: Array2<f64>) -> TransportPlan {
        let c = CostMatrix::new(Array2::zeros(coupling.raw_dim()), CostKind::Euclidean).unwrap();
        let a = coupling.sum_axis(Axis(1));
        let b = coupling.sum_axis(Axis(0));
        let mut p = solve_exact(a.view(), b.view(), &c).unwrap();
        p.coupling = coupling;
        p
    }

    #[test]
    fn identity_coupling_propagates_matched_labels() {
        let p = plan(Array2::eye(3) / 3.0);
        let b = Array1::from_elem(3, 1.0 / 3.0);
        let out = propagate_labels(&p, &[2, 0, 1], b.view(), 0.25).unwrap();
        assert_eq!(out, vec![PropagatedLabel::Class(2), PropagatedLabel::Class(0), PropagatedLabel::Class(1)]);
    }

    #[test]
    fn empty_column_and_threshold() {
        let p = plan(array![[0.5, 0.0, 0.05], [0.0, 0.0, 0.05]]);
        let b = array![0.5, 0.3, 0.2];
        let out = propagate_labels(&p, &[0, 1], b.view(), 0.25).unwrap();
        // ties go to the lowest source index; 0.05 >= 0.25 * 0.2
        assert_eq!(out, vec![PropagatedLabel::Class(0), PropagatedLabel::Unclassified, PropagatedLabel::Class(0)]);
        let zero = propagate_labels(&p, &[0, 1], b.view(), 0.0).unwrap();
        assert_eq!(zero[1], PropagatedLabel::Unclassified);
        let strict = propagate_labels(&p, &[0, 1], b.view(), 0.3).unwrap();
        assert_eq!(strict[2], PropagatedLabel::Unclassified);
        assert!(propagate_labels(&p, &[0, 1], b.view(), 1.5).is_err());
    }

    #[test]
    fn accuracy_definitions() {
        use PropagatedLabel::*;
        let all = accuracy(&[Class(0), Class(1)], &[0, 1], &[true, true]).unwrap();
        assert_eq!((all.accuracy, all.labeled_accuracy), (1.0, Some(1.0)));
        let none = accuracy(&[Unclassified, Unclassified], &[0, 1], &[true, true]).unwrap();
        assert_eq!((none.accuracy, none.labeled_accuracy), (0.0, None));
        // 8 targets, 6 clean: clean correct at 0, 1, 2; clean wrong at 3;
        // clean unclassified at 4, 5; outliers classified at 6, 7
        let pred = [Class(0), Class(1), Class(0), Class(0), Unclassified, Unclassified, Class(1), Class(0)];
        let truth = [0, 1, 0, 1, 0, 1, 1, 0];
        let clean = [true, true, true, true, true, true, false, false];
        let r = accuracy(&pred, &truth, &clean).unwrap();
        assert_eq!(r.accuracy, 3.0 / 6.0);
        assert_eq!(r.labeled_accuracy, Some(3.0 / 6.0));
        assert_eq!(r.n_classified, 6);
    }

    #[test]
    fn projection_cases() {
        let x = array![[0.0], [2.0], [5.0]];
        let p = plan(array![[0.25, 0.0, 0.0], [0.25, 0.0, 0.0], [0.0, 0.5, 0.0]]);
        let proj = barycentric_projection(&p, x.view()).unwrap();
        assert_eq!(proj.points[[0, 0]], 1.0);
        assert_eq!(proj.points[[1, 0]], 5.0);
        assert!(proj.points[[2, 0]].is_nan());
        assert_eq!(proj.unprojected, vec![false, false, true]);
    }

    #[test]
    fn analog_has_expected_structure() {
        let ds = gen_labelprop_analog(6, 0).unwrap();
        assert_eq!(ds.data.source.len(), 500);
        assert_eq!(ds.data.target.len(), 500);
        assert_eq!(ds.clean_targets().iter().filter(|c| **c).count(), 400);
        assert_eq!(ds.source_labels.iter().filter(|&&l| l == 2).count(), 100);
        ds.data.verify_definitions().unwrap();
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        let ds = gen_labelprop_analog(4, 1).unwrap();
        let rows = run_labelprop_experiment(&ds, &[LabelpropMethod::Partial], &[], &LabelpropConfig::default()).unwrap();
        assert!(rows.is_empty());
        let one = run_labelprop_experiment(&ds, &[LabelpropMethod::Partial], &[0.7], &LabelpropConfig::default()).unwrap();
        assert_eq!(one.len(), 1);
    }
}
