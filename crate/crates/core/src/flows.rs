//! Particle gradient flows against OT losses.
//!
//! The fixed measure `alpha` sits on the source side (rows of every cost
//! matrix) and the flowing cloud on the target side. Each iteration solves the
//! transport problem at the current positions, differentiates the loss with
//! the plan held fixed, and takes the explicit Euler step
//! `z <- z - lr * n * grad` with `n` the number of particles.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::measures::{wasserstein, DiscreteMeasure};
use crate::ot::{cost_matrix, partial_ot, sinkhorn, sinkhorn_unbalanced, solve_exact, CostKind, SolverConfig, TransportPlan};
use crate::srot::{
    detect_both, soft_cost_from_terms, soft_setup, soft_terms, srot_hard_masked, OutlierMask, SoftTerms, SrotConfig, DEFAULT_CE_FLOOR,
};

/// Gradient of `<pi, C(x, z)>` with respect to the target points `z`.
///
/// Euclidean: `sum_i pi_ij (z_j - x_i) / |z_j - x_i|`, with coincident pairs
/// contributing zero. Squared Euclidean: `sum_i 2 pi_ij (z_j - x_i)`.
pub fn ot_support_grad(plan: &TransportPlan, source: &DiscreteMeasure, target: &DiscreteMeasure, kind: CostKind) -> Result<Array2<f64>> {
    let (n, m) = plan.coupling.dim();
    if n != source.len() {
        return Err(Error::DimensionMismatch { expected: source.len(), found: n });
    }
    if m != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), found: m });
    }
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: source.dim(), found: target.dim() });
    }
    let squared = match kind {
        CostKind::Euclidean => false,
        CostKind::SquaredEuclidean => true,
        other => return Err(Error::UnsupportedCost(other)),
    };
    let (x, z) = (source.points(), target.points());
    let mut grad = Array2::zeros(z.raw_dim());
    for j in 0..m {
        let zj = z.row(j);
        let mut g = grad.row_mut(j);
        for i in 0..n {
            let p = plan.coupling[[i, j]];
            if p == 0.0 {
                continue;
            }
            let diff = &zj - &x.row(i);
            if squared {
                g.scaled_add(2.0 * p, &diff);
            } else {
                let norm = diff.dot(&diff).sqrt();
                if norm > 0.0 {
                    g.scaled_add(p / norm, &diff);
                }
            }
        }
    }
    Ok(grad)
}

/// Loss driving a flow, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    Wasserstein,
    Entropic {
        epsilon: f64,
    },
    Unbalanced {
        epsilon: f64,
        tau: f64,
    },
    Partial {
        mass: f64,
    },
    SrotHard,
    SrotSoft {
        #[serde(default)]
        mass: Option<f64>,
        #[serde(default)]
        rescale: bool,
        #[serde(default)]
        gamma: Option<f64>,
    },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Wasserstein => "wasserstein",
            LossSpec::Entropic { .. } => "entropic",
            LossSpec::Unbalanced { .. } => "unbalanced",
            LossSpec::Partial { .. } => "partial",
            LossSpec::SrotHard => "srot_hard",
            LossSpec::SrotSoft { .. } => "srot_soft",
        }
    }

    pub fn needs_classifier(&self) -> bool {
        matches!(self, LossSpec::SrotHard | LossSpec::SrotSoft { .. })
    }
}

/// A loss with everything that stays frozen during the flow resolved: the
/// classifier's masks and soft-cost terms are computed once on
/// `(alpha, beta_0)`.
#[derive(Debug, Clone)]
pub enum FlowObjective {
    Exact,
    Entropic(SolverConfig),
    Unbalanced(SolverConfig),
    Partial(f64),
    SrotHard { source_mask: OutlierMask, target_mask: OutlierMask },
    SrotSoft { terms: SoftTerms, gamma: f64, a: Array1<f64>, b: Array1<f64>, mass: f64 },
}

impl FlowObjective {
    pub fn resolve(spec: &LossSpec, alpha: &DiscreteMeasure, beta0: &DiscreteMeasure, model: Option<&ClassifierModel>) -> Result<Self> {
        let need_model = || model.ok_or_else(|| Error::InvalidParameter(format!("loss {} needs a trained classifier", spec.name())));
        Ok(match spec {
            LossSpec::Wasserstein => FlowObjective::Exact,
            LossSpec::Entropic { epsilon } => {
                let cfg = SolverConfig::with_epsilon(*epsilon);
                cfg.validate()?;
                FlowObjective::Entropic(cfg)
            }
            LossSpec::Unbalanced { epsilon, tau } => {
                let cfg = SolverConfig::with_epsilon(*epsilon).tau(*tau);
                cfg.validate()?;
                FlowObjective::Unbalanced(cfg)
            }
            LossSpec::Partial { mass } => FlowObjective::Partial(*mass),
            LossSpec::SrotHard => {
                let (source_mask, target_mask) = detect_both(need_model()?, alpha, beta0)?;
                FlowObjective::SrotHard { source_mask, target_mask }
            }
            LossSpec::SrotSoft { mass, rescale, gamma } => {
                let model = need_model()?;
                let (sm, tm) = detect_both(model, alpha, beta0)?;
                let terms = soft_terms(model, alpha, beta0, DEFAULT_CE_FLOOR)?;
                let gamma = match gamma {
                    Some(g) => *g,
                    None => crate::srot::default_gamma(&cost_matrix(alpha, beta0, CostKind::Euclidean)?)?,
                };
                let cfg = SrotConfig { partial_mass: *mass, rescale: *rescale, gamma: Some(gamma), ..SrotConfig::default() };
                let setup = soft_setup(alpha, beta0, &sm, &tm, &cfg)?;
                FlowObjective::SrotSoft { terms, gamma, a: setup.a, b: setup.b, mass: setup.mass }
            }
        })
    }

    /// Weights of the flowing measure under this objective.
    fn flowing_weights(&self, beta0: &DiscreteMeasure) -> Array1<f64> {
        match self {
            FlowObjective::SrotSoft { b, .. } => b.clone(),
            _ => beta0.weights().clone(),
        }
    }

    /// Plan and loss value at the current positions.
    fn solve(&self, alpha: &DiscreteMeasure, beta: &DiscreteMeasure, kind: CostKind) -> Result<(TransportPlan, f64)> {
        let (a, b) = (alpha.weights().view(), beta.weights().view());
        let plan = match self {
            FlowObjective::Exact => solve_exact(a, b, &cost_matrix(alpha, beta, kind)?)?,
            FlowObjective::Entropic(cfg) => sinkhorn(a, b, &cost_matrix(alpha, beta, kind)?, cfg)?,
            FlowObjective::Unbalanced(cfg) => sinkhorn_unbalanced(a, b, &cost_matrix(alpha, beta, kind)?, cfg)?,
            FlowObjective::Partial(mass) => partial_ot(a, b, &cost_matrix(alpha, beta, kind)?, *mass)?,
            FlowObjective::SrotHard { source_mask, target_mask } => {
                srot_hard_masked(alpha, beta, source_mask, target_mask, &SrotConfig::default())?
            }
            FlowObjective::SrotSoft { terms, gamma, a, mass, .. } => {
                let cost = soft_cost_from_terms(&cost_matrix(alpha, beta, CostKind::Euclidean)?, terms, *gamma)?;
                let mut plan = partial_ot(a.view(), b, &cost, *mass)?;
                plan.solver = crate::ot::SolverTag::SrotSoft;
                plan
            }
        };
        let value = plan.objective;
        Ok((plan, value))
    }

    /// Ground cost whose envelope gradient moves the particles. The soft
    /// strategy's classifier terms are frozen, so only its Euclidean part
    /// depends on the positions.
    fn gradient_kind(&self, kind: CostKind) -> CostKind {
        match self {
            FlowObjective::SrotHard { .. } | FlowObjective::SrotSoft { .. } => CostKind::Euclidean,
            _ => kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub lr: f64,
    pub iters: usize,
    /// Evaluation and snapshot period.
    pub log_every: usize,
    /// Ground cost of the non-SROT losses.
    pub cost: CostKind,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { lr: 0.01, iters: 400, log_every: 10, cost: CostKind::Euclidean }
    }
}

/// Record of one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub label: String,
    pub loss: LossSpec,
    pub config: FlowConfig,
    /// `(iteration, positions)`; the first entry is the initial cloud.
    pub snapshots: Vec<(usize, Array2<f64>)>,
    /// Loss before each update, one entry per completed iteration.
    pub loss_series: Vec<f64>,
    /// `(iteration, W(alpha_clean, beta_t))`.
    pub eval_series: Vec<(usize, f64)>,
    /// Fingerprint of the clean reference measure, if one was given.
    pub reference: Option<u64>,
    /// Solver error that stopped the flow early.
    pub failure: Option<String>,
}

impl FlowTrace {
    pub fn final_positions(&self) -> &Array2<f64> {
        &self.snapshots.last().expect("initial snapshot is always present").1
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.eval_series.last().map(|e| e.1)
    }
}

/// FNV-1a over the bit patterns of points and weights.
pub fn measure_fingerprint(m: &DiscreteMeasure) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let dims = [m.len() as u64, m.dim() as u64];
    for v in dims.into_iter().chain(m.points().iter().map(|x| x.to_bits())).chain(m.weights().iter().map(|x| x.to_bits())) {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Runs the explicit Euler flow of `beta0` toward `alpha`.
pub fn euler_flow(
    alpha: &DiscreteMeasure,
    beta0: &DiscreteMeasure,
    loss: &LossSpec,
    objective: &FlowObjective,
    config: &FlowConfig,
    alpha_clean: Option<&DiscreteMeasure>,
) -> Result<FlowTrace> {
    if !(config.lr > 0.0) || !config.lr.is_finite() {
        return Err(Error::InvalidParameter(format!("lr must be positive, got {}", config.lr)));
    }
    if config.log_every == 0 {
        return Err(Error::InvalidParameter("log_every must be at least 1".into()));
    }
    if alpha.dim() != beta0.dim() {
        return Err(Error::DimensionMismatch { expected: alpha.dim(), found: beta0.dim() });
    }
    let weights = objective.flowing_weights(beta0);
    let n = beta0.len() as f64;
    let eval = |z: &Array2<f64>| -> Result<Option<f64>> {
        match alpha_clean {
            Some(c) => Ok(Some(wasserstein(c, &DiscreteMeasure::new(z.clone(), None, "beta")?)?)),
            None => Ok(None),
        }
    };

    let mut z = beta0.points().clone();
    let mut trace = FlowTrace {
        label: loss.name().to_string(),
        loss: loss.clone(),
        config: config.clone(),
        snapshots: vec![(0, z.clone())],
        loss_series: Vec::with_capacity(config.iters),
        eval_series: Vec::new(),
        reference: alpha_clean.map(measure_fingerprint),
        failure: None,
    };
    if let Some(v) = eval(&z)? {
        trace.eval_series.push((0, v));
    }
    let kind = objective.gradient_kind(config.cost);
    for it in 0..config.iters {
        let step = DiscreteMeasure::new(z.clone(), Some(weights.clone()), "beta").and_then(|beta| {
            let (plan, value) = objective.solve(alpha, &beta, config.cost)?;
            if !value.is_finite() {
                return Err(Error::SolverFailure(format!("non-finite loss at iteration {it}")));
            }
            Ok((value, ot_support_grad(&plan, alpha, &beta, kind)?))
        });
        let (value, grad) = match step {
            Ok(s) => s,
            Err(e) => {
                trace.failure = Some(e.to_string());
                break;
            }
        };
        trace.loss_series.push(value);
        z.scaled_add(-config.lr * n, &grad);
        let done = it + 1;
        if done % config.log_every == 0 || done == config.iters {
            trace.snapshots.push((done, z.clone()));
            if let Some(v) = eval(&z)? {
                trace.eval_series.push((done, v));
            }
        }
    }
    if trace.failure.is_some() {
        let last = trace.loss_series.len();
        if trace.snapshots.last().map(|s| s.0) != Some(last) {
            trace.snapshots.push((last, z.clone()));
            if let Some(v) = eval(&z)? {
                trace.eval_series.push((last, v));
            }
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub label: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_eval: Option<f64>,
    /// 1-based rank by final evaluation (lower is better); traces without an
    /// evaluation come last in input order.
    pub rank: usize,
    pub failed: bool,
}

/// Tabulates final losses and evaluations. All traces must have been run
/// against the same clean reference.
pub fn compare_flows(traces: &[FlowTrace]) -> Result<Vec<FlowSummary>> {
    if let Some(first) = traces.first() {
        if traces.iter().any(|t| t.reference != first.reference) {
            return Err(Error::MismatchedReference);
        }
    }
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by(|&i, &j| match (traces[i].final_eval(), traces[j].final_eval()) {
        (Some(a), Some(b)) => a.total_cmp(&b).then(i.cmp(&j)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => i.cmp(&j),
    });
    let mut rank = vec![0; traces.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    Ok(traces
        .iter()
        .zip(rank)
        .map(|(t, rank)| FlowSummary {
            label: t.label.clone(),
            initial_loss: t.loss_series.first().copied(),
            final_loss: t.loss_series.last().copied(),
            final_eval: t.final_eval(),
            rank,
            failed: t.failure.is_some(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn measure(points: Array2<f64>) -> DiscreteMeasure {
        DiscreteMeasure::new(points, None, "m").unwrap()
    }

    #[test]
    fn coincident_points_give_zero_gradient() {
        let x = measure(array![[0.0, 0.0], [1.0, 1.0]]);
        let c = cost_matrix(&x, &x, CostKind::Euclidean).unwrap();
        let plan = solve_exact(x.weights().view(), x.weights().view(), &c).unwrap();
        let g = ot_support_grad(&plan, &x, &x, CostKind::Euclidean).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_direction_times_mass() {
        let x = measure(array![[0.0, 0.0]]);
        let z = measure(array![[3.0, 4.0]]);
        let c = cost_matrix(&x, &z, CostKind::Euclidean).unwrap();
        let plan = solve_exact(x.weights().view(), z.weights().view(), &c).unwrap();
        let g = ot_support_grad(&plan, &x, &z, CostKind::Euclidean).unwrap();
        assert!((g[[0, 0]] - 0.6).abs() < 1e-15 && (g[[0, 1]] - 0.8).abs() < 1e-15);
        let g2 = ot_support_grad(&plan, &x, &z, CostKind::SquaredEuclidean).unwrap();
        assert_eq!(g2, array![[6.0, 8.0]]);
        assert!(matches!(ot_support_grad(&plan, &x, &z, CostKind::Truncated { lambda: 1.0 }), Err(Error::UnsupportedCost(_))));
    }

    #[test]
    fn zero_iterations_keep_only_initial_snapshot() {
        let a = measure(array![[0.0, 0.0], [1.0, 0.0]]);
        let b = measure(array![[0.0, 1.0], [1.0, 1.0]]);
        let cfg = FlowConfig { iters: 0, ..FlowConfig::default() };
        let t = euler_flow(&a, &b, &LossSpec::Wasserstein, &FlowObjective::Exact, &cfg, Some(&a)).unwrap();
        assert_eq!(t.snapshots.len(), 1);
        assert_eq!(t.snapshots[0].1, *b.points());
        assert!(t.loss_series.is_empty());
        assert_eq!(t.eval_series.len(), 1);
    }

    #[test]
    fn flow_converges_on_clean_data() {
        let a = measure(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let b = measure(array![[3.0, 3.0], [3.5, 3.0], [3.0, 3.5], [3.5, 3.5]]);
        let cfg = FlowConfig { iters: 200, lr: 0.05, log_every: 5, ..FlowConfig::default() };
        let t = euler_flow(&a, &b, &LossSpec::Wasserstein, &FlowObjective::Exact, &cfg, Some(&a)).unwrap();
        assert_eq!(t.loss_series.len(), 200);
        assert!(t.loss_series.last().unwrap() < &(0.05 * t.loss_series[0]));
        assert!(t.final_eval().unwrap() < 0.05 * t.eval_series[0].1);
    }

    #[test]
    fn compare_checks_reference() {
        let a = measure(array![[0.0, 0.0], [1.0, 0.0]]);
        let c = measure(array![[0.0, 0.5], [1.0, 0.0]]);
        let b = measure(array![[0.0, 1.0], [1.0, 1.0]]);
        let cfg = FlowConfig { iters: 3, log_every: 1, ..FlowConfig::default() };
        let t1 = euler_flow(&a, &b, &LossSpec::Wasserstein, &FlowObjective::Exact, &cfg, Some(&a)).unwrap();
        let t2 = euler_flow(&a, &b, &LossSpec::Wasserstein, &FlowObjective::Exact, &cfg, Some(&c)).unwrap();
        assert_eq!(compare_flows(std::slice::from_ref(&t1)).unwrap().len(), 1);
        assert!(matches!(compare_flows(&[t1, t2]), Err(Error::MismatchedReference)));
    }

    #[test]
    fn failure_truncates_trace() {
        let a = measure(array![[0.0, 0.0], [1.0, 0.0]]);
        let b = measure(array![[0.0, 1.0], [1.0, 1.0]]);
        // mass above the total makes every solve fail
        let spec = LossSpec::Partial { mass: 2.0 };
        let obj = FlowObjective::resolve(&spec, &a, &b, None).unwrap();
        let t = euler_flow(&a, &b, &spec, &obj, &FlowConfig::default(), None).unwrap();
        assert!(t.failure.is_some());
        assert!(t.loss_series.is_empty());
        assert_eq!(t.snapshots.len(), 1);
    }

    #[test]
    fn srot_losses_require_a_model() {
        let a = measure(array![[0.0, 0.0]]);
        assert!(FlowObjective::resolve(&LossSpec::SrotHard, &a, &a, None).is_err());
    }
}
