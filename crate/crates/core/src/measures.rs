//! Discrete measures and seeded contaminated datasets.
//!
//! A [`ContaminatedDataset`] holds a source and a target measure together with
//! ground-truth outlier masks. Two kinds of contamination are generated:
//!
//! * type I: outliers farther from the other measure than the clean samples,
//!   i.e. `W(clean, other) <= W(outliers, other)`;
//! * type II: outliers closer to the other measure than the clean samples,
//!   i.e. `W(outliers, other) < W(clean, other)`.
//!
//! Every generator verifies the relevant inequality with the exact solver and
//! refuses to return a dataset that violates it.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{cost_matrix, solve_exact, CostKind};
use crate::rng::{stream, SeededRng};

const PROBABILITY_TOL: f64 = 1e-9;

/// Which of the two compared measures a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    /// Class index used by the classifier: source = 0, target = 1.
    pub fn class_index(self) -> usize {
        match self {
            Side::Source => 0,
            Side::Target => 1,
        }
    }

    pub fn from_class_index(k: usize) -> Self {
        if k == 0 {
            Side::Source
        } else {
            Side::Target
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Side::Source),
            "target" => Ok(Side::Target),
            other => Err(Error::Parse(format!("unknown side '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutlierType {
    TypeI,
    TypeII,
}

impl OutlierType {
    pub fn as_str(self) -> &'static str {
        match self {
            OutlierType::TypeI => "type1",
            OutlierType::TypeII => "type2",
        }
    }
}

/// Weighted point cloud `sum_i w_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
    name: String,
}

impl DiscreteMeasure {
    /// Builds a measure, defaulting to uniform `1/n` weights.
    pub fn new(points: Array2<f64>, weights: Option<Array1<f64>>, name: impl Into<String>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::EmptyMeasure);
        }
        for (index, row) in points.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPoint { index });
            }
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::InvalidWeights(format!("{} weights for {} points", w.len(), n)));
                }
                if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
                    return Err(Error::InvalidWeights(format!("weight {i} is {v}")));
                }
                w
            }
            None => Array1::from_elem(n, 1.0 / n as f64),
        };
        Ok(Self { points, weights, name: name.into() })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= PROBABILITY_TOL
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    /// Same weights and name, new support. Used by flows to move particles.
    pub fn with_points(&self, points: Array2<f64>) -> Result<Self> {
        if points.nrows() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: points.nrows() });
        }
        Self::new(points, Some(self.weights.clone()), self.name.clone())
    }

    pub fn with_weights(&self, weights: Array1<f64>) -> Result<Self> {
        Self::new(self.points.clone(), Some(weights), self.name.clone())
    }

    /// Uniform probability measure on the selected indices.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let pts = self.points.select(Axis(0), indices);
        Self::new(pts, None, name)
    }
}

/// Uniform empirical measure unless `weights` is given.
pub fn make_empirical(points: Array2<f64>, weights: Option<Array1<f64>>) -> Result<DiscreteMeasure> {
    DiscreteMeasure::new(points, weights, "empirical")
}

/// Scales the weights so that the total mass equals `m`.
pub fn rescale_mass(measure: &DiscreteMeasure, m: f64) -> Result<DiscreteMeasure> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::InvalidMass(m));
    }
    let total = measure.total_mass();
    if total <= 0.0 {
        return Err(Error::InvalidMass(total));
    }
    let weights = measure.weights.mapv(|w| w * (m / total));
    measure.with_weights(weights)
}

/// Drops the samples with `keep[i] == false` and gives the rest weight `1/n_kept`.
pub fn apply_hard_mask(measure: &DiscreteMeasure, keep: &[bool]) -> Result<DiscreteMeasure> {
    if keep.len() != measure.len() {
        return Err(Error::DimensionMismatch { expected: measure.len(), found: keep.len() });
    }
    let kept: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
    if kept.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if kept.len() == measure.len() {
        return Ok(measure.clone());
    }
    measure.subset(&kept, measure.name.clone())
}

/// Source/target pair with per-sample outlier ground truth.
///
/// The truth columns are for evaluation only; no solver reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct ContaminatedDataset {
    pub source: DiscreteMeasure,
    pub target: DiscreteMeasure,
    pub source_outlier_truth: Vec<bool>,
    pub target_outlier_truth: Vec<bool>,
    pub source_outlier_types: Vec<Option<OutlierType>>,
    pub target_outlier_types: Vec<Option<OutlierType>>,
}

impl ContaminatedDataset {
    pub fn new(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        source_outlier_types: Vec<Option<OutlierType>>,
        target_outlier_types: Vec<Option<OutlierType>>,
    ) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch { expected: source.dim(), found: target.dim() });
        }
        if source_outlier_types.len() != source.len() {
            return Err(Error::DimensionMismatch { expected: source.len(), found: source_outlier_types.len() });
        }
        if target_outlier_types.len() != target.len() {
            return Err(Error::DimensionMismatch { expected: target.len(), found: target_outlier_types.len() });
        }
        Ok(Self {
            source_outlier_truth: source_outlier_types.iter().map(Option::is_some).collect(),
            target_outlier_truth: target_outlier_types.iter().map(Option::is_some).collect(),
            source,
            target,
            source_outlier_types,
            target_outlier_types,
        })
    }

    pub fn side(&self, side: Side) -> &DiscreteMeasure {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn truth(&self, side: Side) -> &[bool] {
        match side {
            Side::Source => &self.source_outlier_truth,
            Side::Target => &self.target_outlier_truth,
        }
    }

    pub fn types(&self, side: Side) -> &[Option<OutlierType>] {
        match side {
            Side::Source => &self.source_outlier_types,
            Side::Target => &self.target_outlier_types,
        }
    }

    /// Indices on `side` carrying the given tag (`None` selects clean samples).
    pub fn indices_of(&self, side: Side, tag: Option<OutlierType>) -> Vec<usize> {
        self.types(side).iter().enumerate().filter(|(_, t)| **t == tag).map(|(i, _)| i).collect()
    }

    pub fn n_outliers(&self) -> usize {
        self.source_outlier_truth.iter().chain(&self.target_outlier_truth).filter(|t| **t).count()
    }

    /// Checks the type-I / type-II inequalities on both sides with the exact
    /// Euclidean solver. Returns the measured distances on success.
    pub fn verify_definitions(&self) -> Result<Vec<DefinitionCheck>> {
        let mut checks = Vec::new();
        for side in [Side::Source, Side::Target] {
            let measure = self.side(side);
            let other = self.side(side.opposite());
            let clean = self.indices_of(side, None);
            for ty in [OutlierType::TypeI, OutlierType::TypeII] {
                let outl = self.indices_of(side, Some(ty));
                if outl.is_empty() {
                    continue;
                }
                if clean.is_empty() {
                    return Err(Error::DefinitionCheck(format!("{} side has no clean samples", side.as_str())));
                }
                let w_clean = wasserstein(&measure.subset(&clean, "clean")?, other)?;
                let w_out = wasserstein(&measure.subset(&outl, "outliers")?, other)?;
                let holds = match ty {
                    OutlierType::TypeI => w_clean <= w_out,
                    OutlierType::TypeII => w_out < w_clean,
                };
                if !holds {
                    return Err(Error::DefinitionCheck(format!(
                        "{:?} outliers on {} side: W(clean, other) = {w_clean}, W(outliers, other) = {w_out}",
                        ty,
                        side.as_str()
                    )));
                }
                checks.push(DefinitionCheck { side, outlier_type: ty, w_clean, w_outliers: w_out });
            }
        }
        Ok(checks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefinitionCheck {
    pub side: Side,
    pub outlier_type: OutlierType,
    pub w_clean: f64,
    pub w_outliers: f64,
}

/// Exact Euclidean Wasserstein distance between two measures of equal mass.
pub fn wasserstein(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let c = cost_matrix(a, b, CostKind::Euclidean)?;
    Ok(solve_exact(a.weights().view(), b.weights().view(), &c)?.objective)
}

// Two-blob toy geometry. Blob centers sit at (-D/2, 0) and (D/2, 0).
const TOY_BLOB_DISTANCE: f64 = 1.0;
const TOY_BLOB_SIDE: f64 = 0.5;
const TOY_ANNULUS: (f64, f64) = (10.0, 12.0);

fn uniform_square(rng: &mut SeededRng, center: (f64, f64), side: f64) -> [f64; 2] {
    [center.0 + side * (rng.random::<f64>() - 0.5), center.1 + side * (rng.random::<f64>() - 0.5)]
}

fn uniform_annulus(rng: &mut SeededRng, center: (f64, f64), r_in: f64, r_out: f64) -> [f64; 2] {
    let r = (r_in * r_in + rng.random::<f64>() * (r_out * r_out - r_in * r_in)).sqrt();
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    [center.0 + r * theta.cos(), center.1 + r * theta.sin()]
}

fn rows_to_array(rows: &[[f64; 2]]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), 2));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    out
}

/// Two uniform square blobs with type-I outliers appended to the source and
/// type-II outliers appended to the target.
///
/// Type-I outliers are uniform on an annulus of radii `[10 D, 12 D]` around the
/// midpoint of the blobs (`D` = blob center distance). Type-II outliers are drawn
/// from the source blob itself. Clean samples come first on each side.
pub fn gen_toy_2d(n_clean_per_side: usize, n_type1: usize, n_type2: usize, seed: u64) -> Result<ContaminatedDataset> {
    if n_clean_per_side == 0 {
        return Err(Error::InvalidParameter("n_clean_per_side must be at least 1".into()));
    }
    let mut rng = stream(seed, 0x70_79);
    let src_center = (-TOY_BLOB_DISTANCE / 2.0, 0.0);
    let tgt_center = (TOY_BLOB_DISTANCE / 2.0, 0.0);

    let mut src: Vec<[f64; 2]> = (0..n_clean_per_side).map(|_| uniform_square(&mut rng, src_center, TOY_BLOB_SIDE)).collect();
    let mut tgt: Vec<[f64; 2]> = (0..n_clean_per_side).map(|_| uniform_square(&mut rng, tgt_center, TOY_BLOB_SIDE)).collect();
    let (r_in, r_out) = (TOY_ANNULUS.0 * TOY_BLOB_DISTANCE, TOY_ANNULUS.1 * TOY_BLOB_DISTANCE);
    src.extend((0..n_type1).map(|_| uniform_annulus(&mut rng, (0.0, 0.0), r_in, r_out)));
    tgt.extend((0..n_type2).map(|_| uniform_square(&mut rng, src_center, TOY_BLOB_SIDE)));

    let mut src_types = vec![None; n_clean_per_side];
    src_types.extend(std::iter::repeat_n(Some(OutlierType::TypeI), n_type1));
    let mut tgt_types = vec![None; n_clean_per_side];
    tgt_types.extend(std::iter::repeat_n(Some(OutlierType::TypeII), n_type2));

    let ds = ContaminatedDataset::new(
        DiscreteMeasure::new(rows_to_array(&src), None, "source")?,
        DiscreteMeasure::new(rows_to_array(&tgt), None, "target")?,
        src_types,
        tgt_types,
    )?;
    ds.verify_definitions()?;
    Ok(ds)
}

// Flow geometry: the initial flowing cloud is an isotropic Gaussian at the
// origin, the clean reference is a ring centered at (2, 0).
const FLOW_GAUSS_STD: f64 = 0.25;
const FLOW_RING_CENTER: (f64, f64) = (2.0, 0.0);
const FLOW_RING_RADII: (f64, f64) = (0.4, 0.8);

/// Gradient-flow dataset. The source is the fixed reference `alpha`: `n - k`
/// clean ring samples followed by `k = round(kappa * n)` type-II outliers drawn
/// from the distribution of the initial flowing cloud. The target is that cloud
/// (`beta_0`, `n` Gaussian samples, uncontaminated).
pub fn gen_flow_2d(n: usize, kappa: f64, seed: u64) -> Result<ContaminatedDataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidParameter(format!("kappa must lie in [0, 1), got {kappa}")));
    }
    let n_out = (kappa * n as f64).round() as usize;
    let n_clean = n - n_out;
    if n_clean == 0 {
        return Err(Error::InvalidParameter("no clean samples left".into()));
    }
    let mut rng = stream(seed, 0xF1_0E);
    let gauss = |rng: &mut SeededRng| -> [f64; 2] {
        [FLOW_GAUSS_STD * rng.sample::<f64, _>(StandardNormal), FLOW_GAUSS_STD * rng.sample::<f64, _>(StandardNormal)]
    };
    let mut alpha: Vec<[f64; 2]> =
        (0..n_clean).map(|_| uniform_annulus(&mut rng, FLOW_RING_CENTER, FLOW_RING_RADII.0, FLOW_RING_RADII.1)).collect();
    alpha.extend((0..n_out).map(|_| gauss(&mut rng)));
    let beta: Vec<[f64; 2]> = (0..n).map(|_| gauss(&mut rng)).collect();

    let mut src_types = vec![None; n_clean];
    src_types.extend(std::iter::repeat_n(Some(OutlierType::TypeII), n_out));
    let ds = ContaminatedDataset::new(
        DiscreteMeasure::new(rows_to_array(&alpha), None, "alpha")?,
        DiscreteMeasure::new(rows_to_array(&beta), None, "beta0")?,
        src_types,
        vec![None; n],
    )?;
    ds.verify_definitions()?;
    Ok(ds)
}

const HIGHDIM_NOISE_STD: f64 = 0.1; // N(0, 0.01 I_d)
const HIGHDIM_RANK: usize = 3;

/// High-dimensional analog of an image flow: the source holds `n_clean`
/// samples of a structured cluster (a mean vector plus a rank-3 linear
/// variation and small isotropic noise) followed by `n_outlier` draws from
/// `N(0, 0.01 I_d)`. The target holds `n_clean + n_outlier` draws from the same
/// Gaussian.
pub fn gen_highdim_analog(d: usize, n_clean: usize, n_outlier: usize, seed: u64) -> Result<ContaminatedDataset> {
    if d < 2 {
        return Err(Error::InvalidParameter("d must be at least 2".into()));
    }
    if n_clean == 0 {
        return Err(Error::InvalidParameter("n_clean must be at least 1".into()));
    }
    let mut rng = stream(seed, 0x4D_1D);
    let mean: Array1<f64> = (0..d).map(|_| 0.5 + 0.5 * rng.random::<f64>()).collect();
    let basis = Array2::from_shape_fn((HIGHDIM_RANK, d), |_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
    let n_total = n_clean + n_outlier;

    let mut alpha = Array2::zeros((n_total, d));
    for i in 0..n_clean {
        let z: Array1<f64> = (0..HIGHDIM_RANK).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut row = &mean + &z.dot(&basis);
        row.mapv_inplace(|v| v + 0.02 * rng.sample::<f64, _>(StandardNormal));
        alpha.row_mut(i).assign(&row);
    }
    for v in alpha.slice_mut(s![n_clean.., ..]).iter_mut() {
        *v = HIGHDIM_NOISE_STD * rng.sample::<f64, _>(StandardNormal);
    }
    let beta = Array2::from_shape_fn((n_total, d), |_| HIGHDIM_NOISE_STD * rng.sample::<f64, _>(StandardNormal));

    let mut src_types = vec![None; n_clean];
    src_types.extend(std::iter::repeat_n(Some(OutlierType::TypeII), n_outlier));
    let ds = ContaminatedDataset::new(
        DiscreteMeasure::new(alpha, None, "alpha")?,
        DiscreteMeasure::new(beta, None, "beta0")?,
        src_types,
        vec![None; n_total],
    )?;
    ds.verify_definitions()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_default_weights() {
        let m = make_empirical(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], None).unwrap();
        for w in m.weights() {
            assert_eq!(*w, 1.0 / 3.0);
        }
        assert!(m.is_probability());
    }

    #[test]
    fn explicit_weights_kept() {
        let m = make_empirical(array![[0.0], [1.0]], Some(array![0.9, 0.1])).unwrap();
        assert_eq!(m.weights(), &array![0.9, 0.1]);
        assert!(m.is_probability());
    }

    #[test]
    fn negative_weight_rejected() {
        let err = make_empirical(array![[0.0], [1.0]], Some(array![-0.1, 1.1])).unwrap_err();
        assert!(matches!(err, Error::InvalidWeights(_)));
    }

    #[test]
    fn nan_point_rejected() {
        let err = make_empirical(array![[0.0], [f64::NAN]], None).unwrap_err();
        assert!(matches!(err, Error::InvalidPoint { index: 1 }));
    }

    #[test]
    fn empty_rejected() {
        let err = make_empirical(Array2::zeros((0, 2)), None).unwrap_err();
        assert!(matches!(err, Error::EmptyMeasure));
    }

    #[test]
    fn rescale_examples() {
        let m = make_empirical(Array2::zeros((4, 2)), None).unwrap();
        let r = rescale_mass(&m, 0.9).unwrap();
        for w in r.weights() {
            assert!((w - 0.225).abs() < 1e-15);
        }
        assert!(!r.is_probability());
        let same = rescale_mass(&m, 1.0).unwrap();
        assert_eq!(same.weights(), m.weights());
        assert!(matches!(rescale_mass(&m, 0.0), Err(Error::InvalidMass(_))));
    }

    #[test]
    fn hard_mask_examples() {
        let m = make_empirical(array![[0.0], [1.0], [2.0], [3.0]], None).unwrap();
        let kept = apply_hard_mask(&m, &[true, true, true, false]).unwrap();
        assert_eq!(kept.len(), 3);
        assert_eq!(kept.points(), &array![[0.0], [1.0], [2.0]]);
        for w in kept.weights() {
            assert_eq!(*w, 1.0 / 3.0);
        }
        assert_eq!(apply_hard_mask(&m, &[true; 4]).unwrap(), m);
        assert!(matches!(apply_hard_mask(&m, &[false; 4]), Err(Error::EmptyMeasure)));
    }

    #[test]
    fn toy_counts_and_types() {
        let ds = gen_toy_2d(75, 6, 4, 0).unwrap();
        assert_eq!(ds.source.len(), 81);
        assert_eq!(ds.target.len(), 79);
        assert_eq!(ds.source_outlier_truth.iter().filter(|t| **t).count(), 6);
        assert_eq!(ds.target_outlier_truth.iter().filter(|t| **t).count(), 4);
        assert!(ds.source.is_probability() && ds.target.is_probability());
        let checks = ds.verify_definitions().unwrap();
        let t2 = checks.iter().find(|c| c.outlier_type == OutlierType::TypeII).unwrap();
        assert!(t2.w_outliers < t2.w_clean);
        let t1 = checks.iter().find(|c| c.outlier_type == OutlierType::TypeI).unwrap();
        assert!(t1.w_clean <= t1.w_outliers);
    }

    #[test]
    fn toy_without_contamination() {
        let ds = gen_toy_2d(10, 0, 0, 0).unwrap();
        assert!(ds.source_outlier_truth.iter().all(|t| !t));
        assert!(ds.target_outlier_truth.iter().all(|t| !t));
    }

    #[test]
    fn toy_is_deterministic() {
        assert_eq!(gen_toy_2d(20, 2, 2, 7).unwrap(), gen_toy_2d(20, 2, 2, 7).unwrap());
        assert_ne!(gen_toy_2d(20, 2, 2, 7).unwrap(), gen_toy_2d(20, 2, 2, 8).unwrap());
    }

    #[test]
    fn flow_counts() {
        let ds = gen_flow_2d(1000, 0.10, 0).unwrap();
        assert_eq!(ds.n_outliers(), 100);
        assert_eq!(ds.source.len(), 1000);
        assert_eq!(ds.target.len(), 1000);
        let clean = gen_flow_2d(100, 0.0, 1).unwrap();
        assert_eq!(clean.n_outliers(), 0);
        let small = gen_flow_2d(50, 0.2, 2).unwrap();
        assert_eq!(small.n_outliers(), 10);
        assert!(matches!(gen_flow_2d(10, 1.0, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn highdim_counts() {
        let ds = gen_highdim_analog(64, 270, 30, 0).unwrap();
        assert_eq!(ds.source.len(), 300);
        assert_eq!(ds.target.len(), 300);
        assert_eq!(ds.n_outliers(), 30);
        assert_eq!(ds.source.dim(), 64);
        assert_eq!(gen_highdim_analog(64, 100, 0, 0).unwrap().n_outliers(), 0);
        assert!(gen_highdim_analog(1, 10, 0, 0).is_err());
    }
}
