//! Entropic OT (balanced) and KL-penalized unbalanced OT.
//!
//! Both solvers iterate on dual potentials `(f, g)` with the reference measure
//! `a (x) b`, so the coupling is
//!
//! ```text
//! pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)
//! ```
//!
//! and one half-step reads `f_i = -lam eps log sum_j b_j exp((g_j - C_ij) / eps)`
//! with `lam = 1` for the balanced problem and `lam = tau / (tau + eps)` for the
//! unbalanced one. The log-domain kernel evaluates that sum with a stabilized
//! log-sum-exp; the scaling kernel uses `exp(-C / eps)` directly and falls back
//! to the log domain if it under- or overflows.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use super::{check_balanced, check_dims, check_weights, CostMatrix, Potentials, SolverConfig, SolverTag, TransportPlan, PAR_THRESHOLD};
use crate::error::{Error, Result};

enum Kernel {
    /// `C / eps`, row-major, plus its transpose.
    Log { ce: Vec<f64>, cet: Vec<f64> },
    /// `exp(-C / eps)`, row-major, plus its transpose.
    Scaling { k: Vec<f64>, kt: Vec<f64> },
}

struct Problem<'a> {
    a: ArrayView1<'a, f64>,
    b: ArrayView1<'a, f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    cost: &'a CostMatrix,
    eps: f64,
    kernel: Kernel,
    parallel: bool,
}

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = v[i * cols + j];
        }
    }
    t
}

impl<'a> Problem<'a> {
    fn new(a: ArrayView1<'a, f64>, b: ArrayView1<'a, f64>, cost: &'a CostMatrix, eps: f64, log_domain: bool) -> Self {
        let (n, m) = (a.len(), b.len());
        let scaled: Vec<f64> = cost.values().iter().map(|c| c / eps).collect();
        let kernel = if log_domain {
            let cet = transpose(&scaled, n, m);
            Kernel::Log { ce: scaled, cet }
        } else {
            let k: Vec<f64> = scaled.iter().map(|c| (-c).exp()).collect();
            let kt = transpose(&k, n, m);
            Kernel::Scaling { k, kt }
        };
        Self {
            a,
            b,
            log_a: a.iter().map(|w| w.ln()).collect(),
            log_b: b.iter().map(|w| w.ln()).collect(),
            cost,
            eps,
            kernel,
            parallel: n * m >= PAR_THRESHOLD,
        }
    }

    fn into_log_domain(self) -> Self {
        Self::new(self.a, self.b, self.cost, self.eps, true)
    }

    /// Half-step producing the source potential from `g` (or, with `to_target`,
    /// the target potential from `f`). Returns `None` on a non-finite result.
    fn half_step(&self, other: &[f64], to_target: bool, lam: f64) -> Option<Vec<f64>> {
        let (log_w, w) = if to_target { (&self.log_a, self.a) } else { (&self.log_b, self.b) };
        let len = other.len();
        let scale = lam * self.eps;
        let out: Vec<f64> = match &self.kernel {
            Kernel::Log { ce, cet } => {
                let mat = if to_target { cet } else { ce };
                let h: Vec<f64> = other.iter().zip(log_w).map(|(p, lw)| p / self.eps + lw).collect();
                let row = |r: &[f64]| -> f64 {
                    let mut mx = f64::NEG_INFINITY;
                    for (hv, c) in h.iter().zip(r) {
                        mx = mx.max(hv - c);
                    }
                    let s: f64 = h.iter().zip(r).map(|(hv, c)| (hv - c - mx).exp()).sum();
                    -scale * (mx + s.ln())
                };
                if self.parallel {
                    mat.par_chunks(len).map(row).collect()
                } else {
                    mat.chunks(len).map(row).collect()
                }
            }
            Kernel::Scaling { k, kt } => {
                let mat = if to_target { kt } else { k };
                let v: Vec<f64> = other.iter().zip(w.iter()).map(|(p, wv)| wv * (p / self.eps).exp()).collect();
                let row = |r: &[f64]| -> f64 {
                    let s: f64 = v.iter().zip(r).map(|(x, y)| x * y).sum();
                    -scale * s.ln()
                };
                if self.parallel {
                    mat.par_chunks(len).map(row).collect()
                } else {
                    mat.chunks(len).map(row).collect()
                }
            }
        };
        out.iter().all(|x| x.is_finite()).then_some(out)
    }

    fn coupling(&self, f: &[f64], g: &[f64]) -> Array2<f64> {
        let values = self.cost.values();
        Array2::from_shape_fn((f.len(), g.len()), |(i, j)| {
            if self.a[i] == 0.0 || self.b[j] == 0.0 {
                0.0
            } else {
                (self.log_a[i] + self.log_b[j] + (f[i] + g[j] - values[[i, j]]) / self.eps).exp()
            }
        })
    }
}

/// Generalized KL divergence `sum x log(x / y) - x + y`.
fn kl_gen<'a>(x: impl Iterator<Item = &'a f64>, y: impl Iterator<Item = &'a f64>) -> f64 {
    x.zip(y)
        .map(|(&p, &q)| {
            let t = if p > 0.0 { p * (p / q).ln() } else { 0.0 };
            t - p + q
        })
        .sum()
}

fn entropic_term(plan: &Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut kl = 0.0;
    for ((i, j), &p) in plan.indexed_iter() {
        if p > 0.0 {
            kl += p * (p / (a[i] * b[j])).ln();
        }
        kl -= p;
    }
    kl + a.sum() * b.sum()
}

/// Dual objective of the balanced entropic problem; nondecreasing along the
/// Sinkhorn iterates.
fn balanced_dual(p: &Problem, f: &[f64], g: &[f64], f_next: &[f64]) -> f64 {
    let lin: f64 = f.iter().zip(p.a).map(|(x, w)| x * w).sum::<f64>() + g.iter().zip(p.b).map(|(x, w)| x * w).sum::<f64>();
    // sum_ij pi_ij = sum_i a_i exp((f_i - f_next_i) / eps)
    let mass: f64 = f.iter().zip(f_next).zip(p.a).map(|((x, y), w)| w * ((x - y) / p.eps).exp()).sum();
    lin - p.eps * (mass - p.a.sum() * p.b.sum())
}

struct Iterates {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn iterate_balanced(p: &Problem, config: &SolverConfig, mut trace: Option<&mut Vec<f64>>) -> Option<Iterates> {
    let (n, m) = (p.a.len(), p.b.len());
    let mut f = p.half_step(&vec![0.0; m], false, 1.0)?;
    let mut g = vec![0.0; m];
    for it in 1..=config.max_iters {
        g = p.half_step(&f, true, 1.0)?;
        let f_next = p.half_step(&g, false, 1.0)?;
        // row sums of pi(f, g) are a_i exp((f_i - f_next_i) / eps); columns are exact
        let violation = (0..n).map(|i| (p.a[i] * (((f[i] - f_next[i]) / p.eps).exp() - 1.0)).abs()).fold(0.0, f64::max);
        if let Some(t) = trace.as_deref_mut() {
            t.push(balanced_dual(p, &f, &g, &f_next));
        }
        if violation <= config.tol {
            return Some(Iterates { f, g, iterations: it, converged: true });
        }
        f = f_next;
    }
    Some(Iterates { f, g, iterations: config.max_iters, converged: false })
}

fn extremes(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn iterate_unbalanced(p: &Problem, config: &SolverConfig, lam: f64) -> Option<Iterates> {
    let m = p.b.len();
    let mut g = vec![0.0; m];
    let mut f = p.half_step(&g, false, lam)?;
    for it in 1..=config.max_iters {
        let g_new = p.half_step(&f, true, lam)?;
        let f_new = p.half_step(&g_new, false, lam)?;
        // The coupling depends on f_i + g_j only; near the balanced limit the
        // potentials drift along (f + c, g - c) long after the plan has settled.
        let (df_lo, df_hi) = extremes(f.iter().zip(&f_new).map(|(x, y)| y - x));
        let (dg_lo, dg_hi) = extremes(g.iter().zip(&g_new).map(|(x, y)| y - x));
        let residual = (df_hi + dg_hi).abs().max((df_lo + dg_lo).abs());
        f = f_new;
        g = g_new;
        if residual <= config.tol {
            return Some(Iterates { f, g, iterations: it, converged: true });
        }
    }
    Some(Iterates { f, g, iterations: config.max_iters, converged: false })
}

fn run<'a>(
    a: ArrayView1<'a, f64>,
    b: ArrayView1<'a, f64>,
    cost: &'a CostMatrix,
    config: &SolverConfig,
    unbalanced: bool,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(Problem<'a>, Iterates)> {
    let lam = if unbalanced { config.tau / (config.tau + config.epsilon) } else { 1.0 };
    let mut problem = Problem::new(a, b, cost, config.epsilon, config.log_domain);
    loop {
        let out = if unbalanced {
            iterate_unbalanced(&problem, config, lam)
        } else {
            if let Some(t) = trace.as_deref_mut() {
                t.clear();
            }
            iterate_balanced(&problem, config, trace.as_deref_mut())
        };
        match out {
            Some(it) => return Ok((problem, it)),
            None if matches!(problem.kernel, Kernel::Scaling { .. }) => problem = problem.into_log_domain(),
            None => return Err(Error::SolverFailure("non-finite Sinkhorn potentials".into())),
        }
    }
}

fn finish(p: &Problem, it: Iterates, objective: impl Fn(&Array2<f64>) -> f64, tag: SolverTag, config: &SolverConfig) -> TransportPlan {
    let coupling = p.coupling(&it.f, &it.g);
    let objective = objective(&coupling);
    let mut plan = TransportPlan::from_coupling(coupling, objective, tag);
    plan.iterations = it.iterations;
    plan.converged = it.converged;
    plan.potentials = Some(Potentials { source: Array1::from(it.f), target: Array1::from(it.g) });
    plan.config = Some(*config);
    plan
}

/// Balanced entropic OT. The objective is `<pi, C> + eps KL(pi | a (x) b)`.
///
/// Stops once the row-marginal violation is at most `config.tol` (columns are
/// matched exactly after each half-step); otherwise returns with
/// `converged = false`.
pub fn sinkhorn(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix, config: &SolverConfig) -> Result<TransportPlan> {
    sinkhorn_impl(a, b, cost, config, None)
}

/// [`sinkhorn`] that also returns the dual objective after every iteration.
pub fn sinkhorn_with_trace(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    cost: &CostMatrix,
    config: &SolverConfig,
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = sinkhorn_impl(a, b, cost, config, Some(&mut trace))?;
    Ok((plan, trace))
}

fn sinkhorn_impl(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    cost: &CostMatrix,
    config: &SolverConfig,
    trace: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    config.validate()?;
    check_dims(a, b, cost)?;
    check_balanced(a, b)?;
    let (p, it) = run(a, b, cost, config, false, trace)?;
    let eps = config.epsilon;
    Ok(finish(&p, it, |pi| (pi * cost.values()).sum() + eps * entropic_term(pi, a, b), SolverTag::Sinkhorn, config))
}

/// Entropic unbalanced OT with KL marginal penalties of weight `tau`.
///
/// The objective is
/// `<pi, C> + eps KL(pi | a (x) b) + tau KL(pi 1 | a) + tau KL(pi^T 1 | b)`,
/// all divergences in their generalized (mass-aware) form. Stops when no
/// `f_i + g_j` moves by more than `config.tol` in one iteration.
pub fn sinkhorn_unbalanced(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix, config: &SolverConfig) -> Result<TransportPlan> {
    config.validate()?;
    check_dims(a, b, cost)?;
    check_weights(a, "source")?;
    check_weights(b, "target")?;
    if a.sum() <= 0.0 || b.sum() <= 0.0 {
        return Err(Error::InvalidWeights("measures must carry positive mass".into()));
    }
    let (p, it) = run(a, b, cost, config, true, None)?;
    let (eps, tau) = (config.epsilon, config.tau);
    let objective = |pi: &Array2<f64>| {
        let rows = pi.sum_axis(ndarray::Axis(1));
        let cols = pi.sum_axis(ndarray::Axis(0));
        (pi * cost.values()).sum()
            + eps * entropic_term(pi, a, b)
            + tau * kl_gen(rows.iter(), a.iter())
            + tau * kl_gen(cols.iter(), b.iter())
    };
    Ok(finish(&p, it, objective, SolverTag::Unbalanced, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{solve_exact, CostKind};
    use ndarray::array;

    fn cm(v: Array2<f64>) -> CostMatrix {
        CostMatrix::new(v, CostKind::Euclidean).unwrap()
    }

    fn line_cost(n: usize) -> CostMatrix {
        cm(Array2::from_shape_fn((n, n), |(i, j)| (i as f64 - j as f64).abs() / n as f64))
    }

    #[test]
    fn self_transport_objective_is_small() {
        let n = 6;
        let c = line_cost(n);
        let a = Array1::from_elem(n, 1.0 / n as f64);
        let cfg = SolverConfig::with_epsilon(0.01);
        let plan = sinkhorn(a.view(), a.view(), &c, &cfg).unwrap();
        assert!(plan.converged);
        assert!(plan.objective >= 0.0);
        assert!(plan.objective <= 0.01 * (n as f64).ln());
    }

    #[test]
    fn large_epsilon_gives_product_coupling() {
        let c = cm(array![[0.0, 0.1, 0.2], [0.1, 0.0, 0.1], [0.2, 0.1, 0.05]]);
        let a = array![0.2, 0.3, 0.5];
        let b = array![0.4, 0.4, 0.2];
        let plan = sinkhorn(a.view(), b.view(), &c, &SolverConfig::with_epsilon(10.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((plan.coupling[[i, j]] - a[i] * b[j]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn scaling_and_log_domain_agree() {
        let c = line_cost(5);
        let a = Array1::from_elem(5, 0.2);
        let mut cfg = SolverConfig::with_epsilon(0.1);
        cfg.log_domain = false;
        let s = sinkhorn(a.view(), a.view(), &c, &cfg).unwrap();
        cfg.log_domain = true;
        let l = sinkhorn(a.view(), a.view(), &c, &cfg).unwrap();
        assert!((s.objective - l.objective).abs() < 1e-10);
        assert!((&s.coupling - &l.coupling).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn scaling_domain_falls_back_on_underflow() {
        let c = cm(array![[0.0, 50.0], [50.0, 0.0]]);
        let a = array![0.5, 0.5];
        let cfg = SolverConfig { epsilon: 1e-3, log_domain: false, ..SolverConfig::default() };
        let plan = sinkhorn(a.view(), a.view(), &c, &cfg).unwrap();
        assert!(plan.converged);
        assert!((plan.coupling[[0, 0]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn small_epsilon_approaches_exact() {
        let c = cm(array![[0.3, 0.9, 0.1], [0.5, 0.2, 0.8], [0.7, 0.4, 0.6]]);
        let a = Array1::from_elem(3, 1.0 / 3.0);
        let exact = solve_exact(a.view(), a.view(), &c).unwrap();
        let plan = sinkhorn(a.view(), a.view(), &c, &SolverConfig::with_epsilon(1e-3)).unwrap();
        assert!((plan.objective - exact.objective).abs() < 1e-2);
    }

    #[test]
    fn dual_trace_is_nondecreasing() {
        let c = line_cost(7);
        let a = Array1::from_elem(7, 1.0 / 7.0);
        let b = Array1::from_iter((1..=7).map(|k| k as f64 / 28.0));
        let (_, trace) = sinkhorn_with_trace(a.view(), b.view(), &c, &SolverConfig::with_epsilon(0.05)).unwrap();
        assert!(trace.len() > 1);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn unbalanced_large_tau_matches_balanced() {
        let c = cm(array![[0.3, 0.9, 0.1], [0.5, 0.2, 0.8], [0.7, 0.4, 0.6]]);
        let a = Array1::from_elem(3, 1.0 / 3.0);
        let cfg = SolverConfig::with_epsilon(0.05);
        let bal = sinkhorn(a.view(), a.view(), &c, &cfg).unwrap();
        let unb = sinkhorn_unbalanced(a.view(), a.view(), &c, &cfg.tau(1e6)).unwrap();
        assert!(unb.converged);
        assert!((&bal.coupling - &unb.coupling).iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn unbalanced_accepts_different_masses() {
        let c = cm(array![[0.0, 1.0], [1.0, 0.0]]);
        let plan = sinkhorn_unbalanced(array![1.0, 1.0].view(), array![0.5, 0.5].view(), &c, &SolverConfig::default()).unwrap();
        assert!(plan.converged);
        let mass = plan.total_mass();
        assert!(mass > 1.0 && mass < 2.0);
    }

    #[test]
    fn unbalanced_objective_matches_definition() {
        let c = cm(array![[0.1, 0.7], [0.4, 0.2]]);
        let a = array![0.6, 0.4];
        let b = array![0.3, 0.5];
        let cfg = SolverConfig::with_epsilon(0.1).tau(0.5);
        let plan = sinkhorn_unbalanced(a.view(), b.view(), &c, &cfg).unwrap();
        let pi = &plan.coupling;
        let mut direct = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let p = pi[[i, j]];
                direct += p * c.values()[[i, j]] + 0.1 * (p * (p / (a[i] * b[j])).ln() - p + a[i] * b[j]);
            }
        }
        for i in 0..2 {
            let r = plan.row_marginals[i];
            direct += 0.5 * (r * (r / a[i]).ln() - r + a[i]);
            let s = plan.col_marginals[i];
            direct += 0.5 * (s * (s / b[i]).ln() - s + b[i]);
        }
        assert!((direct - plan.objective).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let c = line_cost(5);
        let a = Array1::from_elem(5, 0.2);
        let b = array![0.1, 0.1, 0.2, 0.2, 0.4];
        let cfg = SolverConfig { epsilon: 1e-3, max_iters: 1, log_domain: true, ..SolverConfig::default() };
        let plan = sinkhorn(a.view(), b.view(), &c, &cfg).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 1);
    }

    #[test]
    fn rejects_bad_config() {
        let c = line_cost(2);
        let a = array![0.5, 0.5];
        let cfg = SolverConfig { epsilon: 0.0, ..SolverConfig::default() };
        assert!(sinkhorn(a.view(), a.view(), &c, &cfg).is_err());
    }
}
