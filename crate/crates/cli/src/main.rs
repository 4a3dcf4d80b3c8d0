//! `srot`: generate datasets, train side classifiers, solve transport
//! problems, run gradient flows and label propagation, and plot the results.

mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use srot_core::classifier::TrainMode;
use srot_core::flows::LossSpec;
use srot_core::labelprop::LabelpropMethod;

use crate::config::{ExperimentConfig, Preset, SolveMethod};

/// Invocation problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "srot", version, about = "Outlier-robust optimal transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for dataset generation and classifier training.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file; defaults to `<out>/data/dataset.csv`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Ar,
    Ce,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum LabelpropMethodArg {
    Partial,
    Truncated,
    SrotHardPartial,
}

impl From<LabelpropMethodArg> for LabelpropMethod {
    fn from(m: LabelpropMethodArg) -> Self {
        match m {
            LabelpropMethodArg::Partial => LabelpropMethod::Partial,
            LabelpropMethodArg::Truncated => LabelpropMethod::Truncated,
            LabelpropMethodArg::SrotHardPartial => LabelpropMethod::SrotHardPartial,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset from a preset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// toy2d: clean points per side.
        #[arg(long)]
        n_clean: Option<usize>,
        /// flow2d: points per side.
        #[arg(long)]
        n: Option<usize>,
        /// flow2d: contamination fraction.
        #[arg(long)]
        kappa: Option<f64>,
        /// labelprop: ambient dimension.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train the side classifier and write its outlier detections.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Solve one transport problem (or a sweep over tau) and plot the plan.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<SolveMethod>,
        /// Marginal penalty; repeat to sweep.
        #[arg(long)]
        tau: Vec<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        mass: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        /// Classifier checkpoint for the SROT methods.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run gradient flows of the target toward the source.
    Flow {
        #[command(flatten)]
        common: Common,
        /// wasserstein, srot_hard, partial[=m], entropic[=eps],
        /// unbalanced=eps,tau or srot_soft[=m]; repeat for several flows.
        #[arg(long, value_parser = parse_loss)]
        loss: Vec<LossSpec>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        log_every: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Propagate source labels through robust plans over a grid of masses.
    Labelprop {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Vec<LabelpropMethodArg>,
        /// A single transported mass.
        #[arg(long, conflicts_with = "mass_grid")]
        mass: Option<f64>,
        /// Comma-separated transported masses.
        #[arg(long, value_delimiter = ',')]
        mass_grid: Option<Vec<f64>>,
        #[arg(long)]
        threshold_frac: Option<f64>,
    },
    /// Re-render every plot from the files in the output directory.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_loss(s: &str) -> std::result::Result<LossSpec, String> {
    let (name, arg) = match s.split_once('=') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let nums = |a: &str| {
        a.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| format!("invalid number {v:?} in {s:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()
    };
    let one = |default: Option<f64>| -> std::result::Result<f64, String> {
        match (arg, default) {
            (Some(a), _) => match nums(a)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(format!("{name} takes one value")),
            },
            (None, Some(d)) => Ok(d),
            (None, None) => Err(format!("{name} needs a value, as in {name}=...")),
        }
    };
    match name {
        "wasserstein" | "srot_hard" if arg.is_some() => Err(format!("{name} takes no value")),
        "wasserstein" => Ok(LossSpec::Wasserstein),
        "srot_hard" => Ok(LossSpec::SrotHard),
        "partial" => Ok(LossSpec::Partial { mass: one(Some(0.9))? }),
        "entropic" => Ok(LossSpec::Entropic { epsilon: one(Some(0.05))? }),
        "unbalanced" => match nums(arg.ok_or("unbalanced needs eps,tau")?)?.as_slice() {
            [epsilon, tau] => Ok(LossSpec::Unbalanced { epsilon: *epsilon, tau: *tau }),
            _ => Err("unbalanced takes eps,tau".into()),
        },
        "srot_soft" => Ok(match arg {
            Some(_) => LossSpec::SrotSoft { mass: Some(one(None)?), rescale: true, gamma: None },
            None => LossSpec::SrotSoft { mass: None, rescale: false, gamma: None },
        }),
        other => Err(format!("unknown loss {other:?}")),
    }
}

/// The resolved configuration: file, then flags.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if cfg.out.is_none() {
        return Err(usage("no output directory: pass --out or set \"out\" in the config"));
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.classifier.train.seed = seed;
    }
    if let Some(data) = &common.data {
        cfg.dataset.path = Some(data.clone());
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Flag values a subcommand writes over the loaded configuration.
type Override<'a> = Box<dyn FnOnce(&mut ExperimentConfig) + 'a>;

fn run(cli: Cli) -> Result<()> {
    let (common, apply): (&Common, Override) = match &cli.command {
        Command::Gen { common, preset, n_clean, n, kappa, dim } => (
            common,
            Box::new(move |c: &mut ExperimentConfig| {
                set(&mut c.dataset.preset, *preset);
                set(&mut c.dataset.n_clean, *n_clean);
                set(&mut c.dataset.n, *n);
                set(&mut c.dataset.kappa, *kappa);
                set(&mut c.dataset.dim, *dim);
            }),
        ),
        Command::Train { common, mode, epochs, eta, lr } => (
            common,
            Box::new(move |c: &mut ExperimentConfig| {
                let t = &mut c.classifier.train;
                set(
                    &mut t.mode,
                    mode.map(|m| match m {
                        ModeArg::Ar => TrainMode::Ar,
                        ModeArg::Ce => TrainMode::Ce,
                    }),
                );
                set(&mut t.epochs, *epochs);
                set(&mut t.eta, *eta);
                set(&mut t.lr, *lr);
            }),
        ),
        Command::Solve { common, method, tau, epsilon, mass, rho, .. } => (
            common,
            Box::new(move |c: &mut ExperimentConfig| {
                set(&mut c.solver.method, *method);
                if !tau.is_empty() {
                    c.solver.tau = tau.clone();
                }
                if let Some(eps) = epsilon {
                    c.solver.solver.epsilon = *eps;
                    c.solver.solver.log_domain = *eps < srot_core::ot::SolverConfig::LOG_DOMAIN_BELOW;
                }
                if mass.is_some() {
                    c.solver.mass = *mass;
                }
                set(&mut c.solver.rho, *rho);
            }),
        ),
        Command::Flow { common, loss, iters, lr, log_every, .. } => (
            common,
            Box::new(move |c: &mut ExperimentConfig| {
                if !loss.is_empty() {
                    c.flow.losses = loss.clone();
                }
                set(&mut c.flow.iters, *iters);
                set(&mut c.flow.lr, *lr);
                set(&mut c.flow.log_every, *log_every);
            }),
        ),
        Command::Labelprop { common, method, mass, mass_grid, threshold_frac } => (
            common,
            Box::new(move |c: &mut ExperimentConfig| {
                if !method.is_empty() {
                    c.labelprop.methods = method.iter().map(|&m| m.into()).collect();
                }
                if let Some(m) = mass {
                    c.labelprop.mass_grid = vec![*m];
                }
                set(&mut c.labelprop.mass_grid, mass_grid.clone());
                set(&mut c.labelprop.threshold_frac, *threshold_frac);
            }),
        ),
        Command::Plot { common } => (common, Box::new(|_: &mut ExperimentConfig| {})),
    };
    let mut cfg = resolve(common)?;
    apply(&mut cfg);
    let out = output::Output::new(cfg.out.as_ref().expect("resolve requires an output directory"), common.force)?;
    out.overwrite(output::CONFIG, &(serde_json::to_string_pretty(&cfg)? + "\n"))?;

    match &cli.command {
        Command::Gen { .. } => commands::gen(&cfg, &out),
        Command::Train { .. } => commands::train(&cfg, &out),
        Command::Solve { model, .. } => commands::solve(&cfg, &out, model.as_deref()),
        Command::Flow { model, .. } => commands::flow(&cfg, &out, model.as_deref()),
        Command::Labelprop { .. } => commands::labelprop(&cfg, &out),
        Command::Plot { .. } => commands::plot(&cfg, &out),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SROT_THREADS") {
        let n: usize =
            v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| usage(format!("SROT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot configure the thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
