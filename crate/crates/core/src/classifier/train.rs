use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{decide, log_softmax_rows, one_hot, ClassifierModel, Gradients};
use super::vat::{kl_rows_with_dlogits, vat_directions};
use crate::error::{Error, Result};
use crate::measures::{ContaminatedDataset, Side};
use crate::rng::stream;

const TRAIN_STREAM: u64 = 0x7EA1;
const SELECT_STREAM: u64 = 0x5E1E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Cross-entropy only.
    Ce,
    /// Cross-entropy weighted by `omega` plus the adversarial KL term.
    Ar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term in the adversarial loss.
    pub omega: f64,
    /// Perturbation radius.
    pub eta: f64,
    pub power_iters: usize,
    /// Adam step size.
    pub lr: f64,
    pub epochs: usize,
    /// `0` means full batch.
    pub batch_size: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Finite-difference radius of the power iteration; `None` uses `1e-6`
    /// times the RMS spread of the training inputs.
    pub xi: Option<f64>,
    /// Return the parameters with the lowest full-data training objective
    /// seen at the end of an epoch instead of the last ones. Guards against
    /// late Adam spikes toward the constant classifier, which has zero KL.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            omega: 0.001,
            eta: 0.2,
            power_iters: 1,
            lr: 0.01,
            epochs: 300,
            batch_size: 0,
            mode: TrainMode::Ar,
            seed: 0,
            xi: None,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {}", self.eta)));
        }
        if self.power_iters == 0 {
            return Err(Error::InvalidParameter("power_iters must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidParameter(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::InvalidParameter(format!("omega must be nonnegative, got {}", self.omega)));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0) {
                return Err(Error::InvalidParameter(format!("xi must be positive, got {xi}")));
            }
        }
        Ok(())
    }
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &ClassifierModel, lr: f64) -> Self {
        Self { lr, t: 0, m: model.zero_gradients(), v: model.zero_gradients() }
    }

    pub fn step(&mut self, model: &mut ClassifierModel, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for l in 0..grads.weights.len() {
            ndarray::Zip::from(&mut model.weights_mut()[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut model.biases_mut()[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArLoss {
    /// `omega * ce + kl`.
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// Adversarial loss `omega CE(f(x), y) + mean KL(f(x + r) | f(x))` for given
/// perturbations `r`, with gradients. `f(x)` inside the KL term is a constant.
pub fn ar_loss_grad(
    model: &ClassifierModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    omega: f64,
    r: ArrayView2<f64>,
) -> Result<(ArLoss, Gradients)> {
    model.check_input(x)?;
    if x.nrows() == 0 {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    if y.dim() != (x.nrows(), 2) || r.dim() != x.dim() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.nrows().min(r.nrows()) });
    }
    let bsz = x.nrows() as f64;
    let clean = model.forward_cache(x);
    let log_p = log_softmax_rows(clean.logits());
    let ce = -(&log_p * &y).sum() / bsz;
    let d_clean = (log_p.mapv(f64::exp) - y) * (omega / bsz);
    let (mut grads, _) = model.backward(x, &clean, d_clean);

    let shifted = &x + &r;
    let pert = model.forward_cache(shifted.view());
    let log_q = log_softmax_rows(pert.logits());
    let (kl_rows, d_pert) = kl_rows_with_dlogits(&log_q, &log_p);
    let kl = kl_rows.sum() / bsz;
    let (g_pert, _) = model.backward(shifted.view(), &pert, d_pert / bsz);
    grads.add_scaled(&g_pert, 1.0);
    Ok((ArLoss { total: omega * ce + kl, ce, kl }, grads))
}

/// RMS distance of the rows of `x` to their mean.
pub fn data_scale(x: ArrayView2<f64>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let ss: f64 = x.rows().into_iter().map(|r| (&r - &mean).mapv(|v| v * v).sum()).sum();
    (ss / x.nrows() as f64).sqrt()
}

fn resolve_xi(config: &TrainConfig, x: ArrayView2<f64>) -> f64 {
    config.xi.unwrap_or_else(|| {
        let scale = data_scale(x);
        1e-6 * if scale > 0.0 { scale } else { 1.0 }
    })
}

/// Full-data adversarial objective without gradients.
fn ar_objective(
    model: &ClassifierModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    config: &TrainConfig,
    xi: f64,
    rng: &mut impl Rng,
) -> Result<ArLoss> {
    let (r, _) = vat_directions(model, x, config.eta, config.power_iters, xi, rng)?;
    let n = x.nrows() as f64;
    let log_p = log_softmax_rows(&model.logits(x)?);
    let ce = -(&log_p * &y).sum() / n;
    let shifted = &x + &r;
    let log_q = log_softmax_rows(&model.logits(shifted.view())?);
    let kl = kl_rows_with_dlogits(&log_q, &log_p).0.sum() / n;
    Ok(ArLoss { total: config.omega * ce + kl, ce, kl })
}

/// One Adam step on the adversarial loss.
pub fn ar_step(
    model: &mut ClassifierModel,
    opt: &mut Adam,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    config: &TrainConfig,
    xi: f64,
    rng: &mut impl Rng,
) -> Result<ArLoss> {
    let (r, _) = vat_directions(model, x, config.eta, config.power_iters, xi, rng)?;
    let (loss, grads) = ar_loss_grad(model, x, y, config.omega, r.view())?;
    opt.step(model, &grads);
    ensure_finite(model)?;
    Ok(loss)
}

/// One Adam step on the cross-entropy.
pub fn ce_step(model: &mut ClassifierModel, opt: &mut Adam, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let (loss, grads) = super::model::ce_grad(model, x, y)?;
    opt.step(model, &grads);
    ensure_finite(model)?;
    Ok(loss)
}

fn ensure_finite(model: &ClassifierModel) -> Result<()> {
    if model.is_finite() {
        Ok(())
    } else {
        Err(Error::SolverFailure("classifier parameters became non-finite".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Full-data cross-entropy after the epoch.
    pub ce_loss: f64,
    /// Full-data adversarial objective after the epoch (adversarial mode
    /// only), with freshly drawn perturbation directions.
    pub ar_loss: Option<f64>,
    /// Full-data accuracy after the epoch.
    pub accuracy: f64,
}

/// Mean cross-entropy and accuracy (ties count toward the assigned side).
pub fn evaluate(model: &ClassifierModel, x: ArrayView2<f64>, sides: &[Side]) -> Result<(f64, f64)> {
    let log_p = log_softmax_rows(&model.logits(x)?);
    let n = sides.len() as f64;
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (row, &s) in log_p.rows().into_iter().zip(sides) {
        ce -= row[s.class_index()];
        if decide(row[0].exp(), row[1].exp(), s).side == s {
            correct += 1;
        }
    }
    Ok((ce / n, correct as f64 / n))
}

/// Trains on points labeled by side (`source` = class 0, `target` = class 1).
pub fn train_sides(
    mut model: ClassifierModel,
    x: ArrayView2<f64>,
    sides: &[Side],
    config: &TrainConfig,
) -> Result<(ClassifierModel, Vec<EpochStats>)> {
    config.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidDataset("no training samples".into()));
    }
    if sides.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: sides.len() });
    }
    model.check_input(x)?;
    let n = x.nrows();
    let y = one_hot(sides);
    let xi = resolve_xi(config, x);
    let batch = if config.batch_size == 0 || config.batch_size >= n { n } else { config.batch_size };
    let mut rng = stream(config.seed, TRAIN_STREAM);
    let mut select_rng = stream(config.seed, SELECT_STREAM);
    let mut best: Option<(f64, ClassifierModel)> = None;
    let mut opt = Adam::new(&model, config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (xb, yb): (Array2<f64>, Array2<f64>) =
                if batch == n { (x.to_owned(), y.clone()) } else { (x.select(Axis(0), chunk), y.select(Axis(0), chunk)) };
            match config.mode {
                TrainMode::Ce => {
                    ce_step(&mut model, &mut opt, xb.view(), yb.view())?;
                }
                TrainMode::Ar => {
                    ar_step(&mut model, &mut opt, xb.view(), yb.view(), config, xi, &mut rng)?;
                }
            }
        }
        let (ce_loss, accuracy) = evaluate(&model, x, sides)?;
        let ar_loss = match config.mode {
            TrainMode::Ar => Some(ar_objective(&model, x, y.view(), config, xi, &mut select_rng)?.total),
            TrainMode::Ce => None,
        };
        history.push(EpochStats { epoch, ce_loss, ar_loss, accuracy });
        if config.select_best && best.as_ref().is_none_or(|(b, _)| ce_loss < *b) {
            best = Some((ce_loss, model.clone()));
        }
    }
    Ok((best.map_or(model, |(_, m)| m), history))
}

/// Trains the side classifier on both measures of a dataset.
pub fn train(model: ClassifierModel, dataset: &ContaminatedDataset, config: &TrainConfig) -> Result<(ClassifierModel, Vec<EpochStats>)> {
    let (x, sides) = stacked_sides(dataset)?;
    train_sides(model, x.view(), &sides, config)
}

/// Source points followed by target points, with their side labels.
pub fn stacked_sides(dataset: &ContaminatedDataset) -> Result<(Array2<f64>, Vec<Side>)> {
    let (s, t) = (&dataset.source, &dataset.target);
    if s.is_empty() && t.is_empty() {
        return Err(Error::InvalidDataset("dataset has no points".into()));
    }
    let x = ndarray::concatenate(Axis(0), &[s.points().view(), t.points().view()])
        .map_err(|_| Error::DimensionMismatch { expected: s.dim(), found: t.dim() })?;
    let mut sides = vec![Side::Source; s.len()];
    sides.extend(std::iter::repeat_n(Side::Target, t.len()));
    Ok((x, sides))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::model::{init_model, Activation};
    use ndarray::array;

    #[test]
    fn zero_omega_zero_response_is_kl_only() {
        let mut m = init_model(&[2, 4, 2], Activation::Relu, 0).unwrap();
        m.weights_mut()[0].fill(0.0);
        let x = array![[0.1, 0.2], [0.3, -0.1]];
        let y = one_hot(&[Side::Source, Side::Target]);
        let r = array![[0.5, 0.0], [0.0, 0.5]];
        let (loss, _) = ar_loss_grad(&m, x.view(), y.view(), 0.0, r.view()).unwrap();
        assert_eq!(loss.total, loss.kl);
        assert!(loss.kl.abs() < 1e-15);
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let x = array![[-1.0, 0.1], [-1.2, -0.3], [-0.8, 0.4], [1.0, 0.0], [1.1, 0.5], [0.9, -0.2]];
        let sides = [Side::Source, Side::Source, Side::Source, Side::Target, Side::Target, Side::Target];
        let m = init_model(&[2, 16, 2], Activation::Relu, 0).unwrap();
        let cfg = TrainConfig { mode: TrainMode::Ce, epochs: 200, ..TrainConfig::default() };
        let (_, hist) = train_sides(m, x.view(), &sides, &cfg).unwrap();
        assert_eq!(hist.len(), 200);
        assert_eq!(hist.last().unwrap().accuracy, 1.0);
        assert!(hist.last().unwrap().ar_loss.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let x = array![[-1.0, 0.1], [-1.2, -0.3], [1.0, 0.0], [1.1, 0.5]];
        let sides = [Side::Source, Side::Source, Side::Target, Side::Target];
        let cfg = TrainConfig { epochs: 20, batch_size: 2, ..TrainConfig::default() };
        let run = || train_sides(init_model(&[2, 8, 2], Activation::Relu, 4).unwrap(), x.view(), &sides, &cfg).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = init_model(&[2, 2], Activation::Relu, 0).unwrap();
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(train_sides(m, x.view(), &[], &TrainConfig::default()), Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut m = init_model(&[1, 2], Activation::Relu, 0).unwrap();
        let before = m.params();
        let mut opt = Adam::new(&m, 0.1);
        let x = array![[1.0]];
        let y = one_hot(&[Side::Target]);
        let (_, g) = super::super::model::ce_grad(&m, x.view(), y.view()).unwrap();
        opt.step(&mut m, &g);
        for ((a, b), gv) in before.iter().zip(m.params()).zip(g.flatten()) {
            if gv != 0.0 {
                assert!((b - a) * gv < 0.0);
            }
        }
    }
}
