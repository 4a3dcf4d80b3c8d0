//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use srot_core::classifier::{ar_loss_grad, ce_grad, ClassifierModel};
use srot_core::flows::ot_support_grad;
use srot_core::measures::DiscreteMeasure;
use srot_core::ot::{cost_matrix, sinkhorn, CostKind, SolverConfig};
use srot_core::rng::seeded_rng;

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

pub fn random_matrix(n: usize, m: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * scale)
}

/// Minimum of `(1/n) sum_i C[i, sigma(i)]` over all permutations.
pub fn permutation_oracle(c: &Array2<f64>) -> f64 {
    fn rec(c: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                rec(c, row + 1, used, acc + c[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
    best / c.nrows() as f64
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates,
/// with central differences of step `h`.
pub fn max_rel_error(analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64, h: f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let num = (f(k, h) - f(k, -h)) / (2.0 * h);
            (g - num).abs() / num.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Finite-difference check of the cross-entropy parameter gradient.
pub fn ce_param_check(model: &ClassifierModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let (_, g) = ce_grad(model, x, y).unwrap();
    let base = model.params();
    let mut probe = model.clone();
    max_rel_error(
        &g.flatten(),
        |k, h| {
            let mut p = base.clone();
            p[k] += h;
            probe.set_params(&p).unwrap();
            ce_grad(&probe, x, y).unwrap().0
        },
        1e-6,
    )
}

/// Finite-difference check of the adversarial-loss parameter gradient with
/// fixed perturbations and the clean prediction held constant.
pub fn ar_param_check(model: &ClassifierModel, x: ArrayView2<f64>, y: ArrayView2<f64>, omega: f64, r: ArrayView2<f64>) -> f64 {
    let (_, g) = ar_loss_grad(model, x, y, omega, r).unwrap();
    let base = model.params();
    let mut probe = model.clone();
    // the KL reference f(x) stays at the unperturbed parameters
    let log_p_ref = log_softmax(&model.logits(x).unwrap());
    let n = x.nrows() as f64;
    max_rel_error(
        &g.flatten(),
        |k, h| {
            let mut p = base.clone();
            p[k] += h;
            probe.set_params(&p).unwrap();
            let log_p = log_softmax(&probe.logits(x).unwrap());
            let ce = -(&log_p * &y).sum() / n;
            let shifted = &x + &r;
            let log_q = log_softmax(&probe.logits(shifted.view()).unwrap());
            let kl: f64 = (log_q.mapv(f64::exp) * (&log_q - &log_p_ref)).sum() / n;
            omega * ce + kl
        },
        1e-6,
    )
}

pub fn log_softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Entropic OT value as a function of the target support.
pub fn entropic_value(source: &DiscreteMeasure, target_points: &Array2<f64>, kind: CostKind, eps: f64) -> f64 {
    let target = DiscreteMeasure::new(target_points.clone(), None, "t").unwrap();
    let cost = cost_matrix(source, &target, kind).unwrap();
    let cfg = SolverConfig { tol: 1e-13, max_iters: 200_000, ..SolverConfig::with_epsilon(eps) };
    sinkhorn(source.weights().view(), target.weights().view(), &cost, &cfg).unwrap().objective
}

/// Finite-difference check of the envelope gradient of the entropic loss
/// with respect to the target points.
pub fn entropic_support_check(source: &DiscreteMeasure, target: &DiscreteMeasure, kind: CostKind, eps: f64) -> f64 {
    let cost = cost_matrix(source, target, kind).unwrap();
    let cfg = SolverConfig { tol: 1e-13, max_iters: 200_000, ..SolverConfig::with_epsilon(eps) };
    let plan = sinkhorn(source.weights().view(), target.weights().view(), &cost, &cfg).unwrap();
    let grad = ot_support_grad(&plan, source, target, kind).unwrap();
    let base = target.points().clone();
    let d = base.ncols();
    max_rel_error(
        grad.as_slice().unwrap(),
        |k, h| {
            let mut z = base.clone();
            z[[k / d, k % d]] += h;
            entropic_value(source, &z, kind, eps)
        },
        1e-5,
    )
}
