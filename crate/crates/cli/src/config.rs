//! The experiment configuration document. Every section mirrors a library
//! config; unknown keys are rejected everywhere.

use std::path::PathBuf;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use srot_core::classifier::{Activation, TrainConfig};
use srot_core::flows::{FlowConfig, LossSpec};
use srot_core::labelprop::{LabelpropConfig, LabelpropMethod};
use srot_core::ot::{CostKind, SolverConfig};
use srot_core::srot::SrotConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two 2D Gaussian blobs with far (type-I) and near (type-II) outliers.
    Toy2d,
    /// Ring target and contaminated source for gradient flows.
    Flow2d,
    /// Labeled 3-class domain-shift dataset.
    Labelprop,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy2d => "toy2d",
            Preset::Flow2d => "flow2d",
            Preset::Labelprop => "labelprop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: Preset,
    /// Existing dataset file; defaults to `<out>/data/dataset.csv`.
    pub path: Option<PathBuf>,
    /// toy2d: clean points per side and outlier counts.
    pub n_clean: usize,
    pub n_type1: usize,
    pub n_type2: usize,
    /// flow2d: points per side and contamination fraction.
    pub n: usize,
    pub kappa: f64,
    /// labelprop: ambient dimension.
    pub dim: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { preset: Preset::Toy2d, path: None, n_clean: 75, n_type1: 6, n_type2: 4, n: 1000, kappa: 0.1, dim: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { hidden: vec![128, 128], activation: Activation::Relu, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SolveMethod {
    Exact,
    Sinkhorn,
    Uot,
    Partial,
    Truncated,
    SrotHard,
    SrotSoft,
}

impl SolveMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveMethod::Exact => "exact",
            SolveMethod::Sinkhorn => "sinkhorn",
            SolveMethod::Uot => "uot",
            SolveMethod::Partial => "partial",
            SolveMethod::Truncated => "truncated",
            SolveMethod::SrotHard => "srot_hard",
            SolveMethod::SrotSoft => "srot_soft",
        }
    }

    pub fn needs_classifier(self) -> bool {
        matches!(self, SolveMethod::SrotHard | SolveMethod::SrotSoft)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub method: SolveMethod,
    pub solver: SolverConfig,
    /// Marginal penalties to sweep with `uot`; empty uses `solver.tau`.
    pub tau: Vec<f64>,
    /// Mass moved by `partial`; defaults to the smaller total mass.
    pub mass: Option<f64>,
    /// Fraction of mass `truncated` may treat as outlying.
    pub rho: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self { method: SolveMethod::Exact, solver: SolverConfig::default(), tau: Vec::new(), mass: None, rho: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub lr: f64,
    pub iters: usize,
    pub log_every: usize,
    pub cost: CostKind,
    pub losses: Vec<LossSpec>,
}

impl FlowSection {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig { lr: self.lr, iters: self.iters, log_every: self.log_every, cost: self.cost }
    }
}

impl Default for FlowSection {
    fn default() -> Self {
        let c = FlowConfig::default();
        Self {
            lr: c.lr,
            iters: c.iters,
            log_every: c.log_every,
            cost: c.cost,
            losses: vec![LossSpec::Wasserstein, LossSpec::Partial { mass: 0.9 }, LossSpec::SrotHard],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelpropSection {
    pub threshold_frac: f64,
    pub methods: Vec<LabelpropMethod>,
    pub mass_grid: Vec<f64>,
}

impl Default for LabelpropSection {
    fn default() -> Self {
        Self {
            threshold_frac: LabelpropConfig::default().threshold_frac,
            methods: vec![LabelpropMethod::Partial, LabelpropMethod::Truncated, LabelpropMethod::SrotHardPartial],
            mass_grid: vec![0.5, 0.7, 0.85, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds dataset generation.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierSection,
    pub solver: SolveSection,
    pub srot: SrotConfig,
    pub flow: FlowSection,
    pub labelprop: LabelpropSection,
}

impl ExperimentConfig {
    pub fn labelprop_config(&self) -> LabelpropConfig {
        LabelpropConfig {
            threshold_frac: self.labelprop.threshold_frac,
            hidden: self.classifier.hidden.clone(),
            activation: self.classifier.activation,
            classifier: self.classifier.train.clone(),
        }
    }

    /// Layer widths of the side classifier for inputs of dimension `d`.
    pub fn classifier_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![d];
        dims.extend(&self.classifier.hidden);
        dims.push(2);
        dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"flow": {"lr": 0.1, "iterations": 3}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"classifier": {"train": {"epoch": 3}}}"#).is_err());
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"flow": {"iters": 7}, "dataset": {"preset": "flow2d"}}"#).unwrap();
        assert_eq!(cfg.flow.flow_config().iters, 7);
        assert_eq!(cfg.flow.lr, FlowConfig::default().lr);
        assert_eq!(cfg.dataset.preset, Preset::Flow2d);
        assert_eq!(cfg.flow.losses.len(), 3);
    }
}
