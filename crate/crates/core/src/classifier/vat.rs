//! Adversarial perturbation directions by power iteration.
//!
//! The direction maximizing `KL(f(x + r) | f(x))` over `|r| = eta` is the top
//! eigenvector of the local curvature of that divergence. One power-iteration
//! step replaces `d` by the input gradient of `KL(f(x + xi d) | f(x))`, which is
//! `xi H d` to first order, then renormalizes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{log_softmax_rows, ClassifierModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VatDirection {
    /// Perturbation with norm exactly `eta`.
    pub r: Array1<f64>,
    /// Set when the divergence gradient vanished at every power-iteration
    /// step; `r` is then the scaled random starting direction.
    pub degenerate: bool,
}

/// Row-wise `KL(q | p)` for log-probabilities, together with the gradient of
/// the summed divergence with respect to the logits behind `log_q` (`p` held
/// constant).
pub(crate) fn kl_rows_with_dlogits(log_q: &Array2<f64>, log_p: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let q = log_q.mapv(f64::exp);
    let diff = log_q - log_p;
    let kl = (&q * &diff).sum_axis(Axis(1));
    let mut dlogits = diff;
    for ((mut row, qrow), k) in dlogits.rows_mut().into_iter().zip(q.rows()).zip(kl.iter()) {
        row.zip_mut_with(&qrow, |d, &qv| *d = qv * (*d - k));
    }
    (kl, dlogits)
}

/// `KL(f(x_i + r_i) | f(x_i))` per row.
pub fn perturbation_kl(model: &ClassifierModel, x: ArrayView2<f64>, r: ArrayView2<f64>) -> Result<Array1<f64>> {
    let log_p = log_softmax_rows(&model.logits(x)?);
    let shifted = &x + &r;
    let log_q = log_softmax_rows(&model.logits(shifted.view())?);
    Ok(kl_rows_with_dlogits(&log_q, &log_p).0)
}

fn random_unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut d = Array2::zeros((rows, cols));
    for mut row in d.rows_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
                break;
            }
        }
    }
    d
}

/// Batched adversarial directions: row `i` of the result has norm `eta`.
pub fn vat_directions(
    model: &ClassifierModel,
    x: ArrayView2<f64>,
    eta: f64,
    power_iters: usize,
    xi: f64,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Vec<bool>)> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    if power_iters == 0 {
        return Err(Error::InvalidParameter("power_iters must be at least 1".into()));
    }
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(Error::InvalidParameter(format!("xi must be positive, got {xi}")));
    }
    model.check_input(x)?;
    let (n, dim) = x.dim();
    let log_p = log_softmax_rows(&model.logits(x)?);
    let mut d = random_unit_rows(n, dim, rng);
    let mut degenerate = vec![true; n];
    for _ in 0..power_iters {
        let probe = &x + &(&d * xi);
        let cache = model.forward_cache(probe.view());
        let log_q = log_softmax_rows(cache.logits());
        let (_, dlogits) = kl_rows_with_dlogits(&log_q, &log_p);
        let (_, grad) = model.backward(probe.view(), &cache, dlogits);
        for ((mut drow, grow), flag) in d.rows_mut().into_iter().zip(grad.rows()).zip(degenerate.iter_mut()) {
            let norm = grow.dot(&grow).sqrt();
            if norm > 0.0 && norm.is_finite() {
                drow.assign(&(&grow / norm));
                *flag = false;
            }
        }
    }
    // renormalize so |r| = eta holds to rounding
    for mut row in d.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm * eta);
    }
    Ok((d, degenerate))
}

/// Adversarial direction for a single point.
pub fn vat_direction(
    model: &ClassifierModel,
    x: ArrayView1<f64>,
    eta: f64,
    power_iters: usize,
    xi: f64,
    rng: &mut impl Rng,
) -> Result<VatDirection> {
    let (r, flags) = vat_directions(model, x.insert_axis(Axis(0)), eta, power_iters, xi, rng)?;
    Ok(VatDirection { r: r.row(0).to_owned(), degenerate: flags[0] })
}
