//! Two-way source/target classifier with optional adversarial regularization.
//!
//! A small multilayer perceptron with a softmax head, trained either with
//! cross-entropy alone or with `omega * CE + KL(f(x + r) | f(x))`, where `r` is
//! the locally most sensitive perturbation of radius `eta` estimated by power
//! iteration. Samples the regularized model assigns to the opposite side are
//! treated as outliers.

mod model;
mod train;
mod vat;

pub use model::{ce_grad, init_model, one_hot, predict_side, Activation, ClassifierModel, Gradients, Prediction};
pub use train::{
    ar_loss_grad, ar_step, ce_step, data_scale, evaluate, stacked_sides, train, train_sides, Adam, ArLoss, EpochStats, TrainConfig,
    TrainMode,
};
pub use vat::{perturbation_kl, vat_direction, vat_directions, VatDirection};
