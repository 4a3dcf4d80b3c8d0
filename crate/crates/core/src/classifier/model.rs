use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Side;
use crate::rng::stream;

const INIT_STREAM: u64 = 0x1A17;
/// Probabilities returned by [`ClassifierModel::forward`] are kept inside
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Feedforward network with a two-way softmax head. Weights are stored as
/// `fan_in x fan_out` so a batch is propagated as `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
}

/// Parameter gradients laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub(crate) fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.scaled_add(s, o);
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            b.scaled_add(s, o);
        }
    }
}

pub(crate) struct Cache {
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl Cache {
    pub(crate) fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!("need at least input and output layers, got {dims:?}")));
    }
    if dims[dims.len() - 1] != 2 {
        return Err(Error::InvalidArchitecture(format!("output layer must have 2 units, got {}", dims[dims.len() - 1])));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArchitecture(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(dims: &[usize], activation: Activation, seed: u64) -> Result<ClassifierModel> {
    validate_dims(dims)?;
    let mut rng = stream(seed, INIT_STREAM);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit)));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(ClassifierModel { dims: dims.to_vec(), weights, biases, activation })
}

pub(crate) fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl ClassifierModel {
    /// Rebuilds a model from [`ClassifierModel::params`] output.
    pub fn from_params(dims: &[usize], activation: Activation, params: &[f64]) -> Result<Self> {
        validate_dims(dims)?;
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut off = 0;
        for w in dims.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            weights.push(Array2::from_shape_vec((fi, fo), params[off..off + fi * fo].to_vec()).expect("sized slice"));
            off += fi * fo;
            biases.push(Array1::from(params[off..off + fo].to_vec()));
            off += fo;
        }
        Ok(Self { dims: dims.to_vec(), weights, biases, activation })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flattened parameters, layer by layer: weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        Gradients { weights: self.weights.clone(), biases: self.biases.clone() }.flatten()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        *self = Self::from_params(&self.dims, self.activation, params)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub(crate) fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        Ok(())
    }

    pub(crate) fn forward_cache(&self, x: ArrayView2<f64>) -> Cache {
        let last = self.weights.len() - 1;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = if l == 0 { x } else { post[l - 1].view() };
            let z = input.dot(w) + b;
            if l < last {
                post.push(z.mapv(|v| self.activation.apply(v)));
            }
            pre.push(z);
        }
        Cache { pre, post }
    }

    /// Backpropagates `dlogits` (gradient of the loss with respect to the
    /// output logits). Returns parameter gradients and the input gradient.
    pub(crate) fn backward(&self, x: ArrayView2<f64>, cache: &Cache, dlogits: Array2<f64>) -> (Gradients, Array2<f64>) {
        let layers = self.weights.len();
        let mut grads = self.zero_gradients();
        let mut delta = dlogits;
        for l in (0..layers).rev() {
            let input = if l == 0 { x } else { cache.post[l - 1].view() };
            grads.weights[l] = input.t().dot(&delta);
            grads.biases[l] = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.weights[l].t());
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut back)
                    .and(&cache.pre[l - 1])
                    .and(&cache.post[l - 1])
                    .for_each(|d, &z, &h| *d *= act.derivative(z, h));
            }
            delta = back;
        }
        (grads, delta)
    }

    /// Output logits for a batch.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cache = self.forward_cache(x);
        Ok(cache.pre.pop().expect("at least one layer"))
    }

    /// Class probabilities `[P(source), P(target)]` per row, each strictly
    /// inside `(0, 1)`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let logp = log_softmax_rows(&self.logits(x)?);
        Ok(logp.mapv(|v| v.exp().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)))
    }

    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward(batch)?.row(0).to_owned())
    }
}

/// Mean cross-entropy `-sum_k y_k log p_k` against (possibly soft) targets
/// `y`, with parameter gradients.
pub fn ce_grad(model: &ClassifierModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    model.check_input(x)?;
    if y.dim() != (x.nrows(), 2) {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.nrows() });
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let bsz = x.nrows() as f64;
    let cache = model.forward_cache(x);
    let logp = log_softmax_rows(cache.logits());
    let loss = -(&logp * &y).sum() / bsz;
    let dlogits = (logp.mapv(f64::exp) - y) / bsz;
    let (grads, _) = model.backward(x, &cache, dlogits);
    Ok((loss, grads))
}

/// One-hot targets for a list of sides.
pub fn one_hot(sides: &[Side]) -> Array2<f64> {
    let mut y = Array2::zeros((sides.len(), 2));
    for (i, s) in sides.iter().enumerate() {
        y[[i, s.class_index()]] = 1.0;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub side: Side,
    /// Probability of the predicted side.
    pub confidence: f64,
}

/// Argmax side per row; exact ties go to the sample's assigned side.
pub fn predict_side(model: &ClassifierModel, x: ArrayView2<f64>, assigned: &[Side]) -> Result<Vec<Prediction>> {
    if assigned.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: assigned.len() });
    }
    let probs = model.forward(x)?;
    Ok(probs.rows().into_iter().zip(assigned).map(|(p, &s)| decide(p[0], p[1], s)).collect())
}

pub(crate) fn decide(p_source: f64, p_target: f64, assigned: Side) -> Prediction {
    let side = if p_source > p_target {
        Side::Source
    } else if p_target > p_source {
        Side::Target
    } else {
        assigned
    };
    let confidence = if side == Side::Source { p_source } else { p_target };
    Prediction { side, confidence }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&[2, 64, 64, 2], Activation::Relu, 0).unwrap();
        let b = init_model(&[2, 64, 64, 2], Activation::Relu, 0).unwrap();
        assert_eq!(a.params(), b.params());
        let c = init_model(&[2, 64, 64, 2], Activation::Relu, 1).unwrap();
        assert_ne!(a.params(), c.params());
        assert_eq!(a.n_params(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
    }

    #[test]
    fn architecture_validation() {
        assert!(init_model(&[2, 2], Activation::Relu, 0).is_ok());
        assert!(matches!(init_model(&[2], Activation::Relu, 0), Err(Error::InvalidArchitecture(_))));
        assert!(matches!(init_model(&[2, 3], Activation::Relu, 0), Err(Error::InvalidArchitecture(_))));
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut m = init_model(&[2, 8, 2], Activation::Tanh, 3).unwrap();
        m.weights_mut()[1].fill(0.0);
        let p = m.forward(array![[1.0, -2.0], [0.3, 0.4]].view()).unwrap();
        assert!(p.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn rows_sum_to_one_and_batch_consistent() {
        let m = init_model(&[3, 5, 2], Activation::Relu, 7).unwrap();
        let x = array![[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5], [4.0, -3.0, 1.0]];
        let p = m.forward(x.view()).unwrap();
        for (i, row) in p.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert_eq!(row.to_owned(), m.forward_one(x.row(i)).unwrap());
        }
    }

    #[test]
    fn params_roundtrip() {
        let m = init_model(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let back = ClassifierModel::from_params(m.dims(), m.activation(), &m.params()).unwrap();
        assert_eq!(m, back);
        assert!(ClassifierModel::from_params(m.dims(), m.activation(), &[0.0]).is_err());
    }

    #[test]
    fn uniform_prediction_has_ln2_loss() {
        let mut m = init_model(&[2, 2], Activation::Relu, 0).unwrap();
        m.weights_mut()[0].fill(0.0);
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (loss, _) = ce_grad(&m, x.view(), one_hot(&[Side::Source, Side::Target]).view()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let mut m = init_model(&[1, 2], Activation::Relu, 0).unwrap();
        m.weights_mut()[0].assign(&array![[-50.0, 50.0]]);
        let (loss, _) = ce_grad(&m, array![[1.0]].view(), one_hot(&[Side::Target]).view()).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn tie_goes_to_assigned_side() {
        assert_eq!(decide(0.7, 0.3, Side::Target).side, Side::Source);
        assert_eq!(decide(0.5, 0.5, Side::Target).side, Side::Target);
        assert_eq!(decide(0.5, 0.5, Side::Source).side, Side::Source);
        assert_eq!(decide(0.7, 0.3, Side::Target).confidence, 0.7);
    }

    #[test]
    fn predict_matches_forward() {
        let m = init_model(&[2, 6, 2], Activation::Relu, 11).unwrap();
        let x = array![[0.1, 0.2], [-1.0, 2.0], [4.0, -3.0]];
        let sides = [Side::Source, Side::Target, Side::Source];
        let preds = predict_side(&m, x.view(), &sides).unwrap();
        let p = m.forward(x.view()).unwrap();
        for (pred, row) in preds.iter().zip(p.rows()) {
            let expected = if row[0] > row[1] { Side::Source } else { Side::Target };
            assert_eq!(pred.side, expected);
        }
    }
}
