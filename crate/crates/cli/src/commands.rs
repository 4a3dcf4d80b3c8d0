//! Subcommand pipelines. Each reads the resolved configuration, writes its
//! artifacts under the run directory and renders the matching plots.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use rayon::prelude::*;
use srot_core::classifier::{init_model, train as train_model, ClassifierModel};
use srot_core::flows::{compare_flows, euler_flow, FlowObjective, FlowTrace};
use srot_core::io::{self, Checkpoint, PlanRecord, TraceMeta};
use srot_core::labelprop::{gen_labelprop_analog, run_labelprop_experiment};
use srot_core::measures::{gen_flow_2d, gen_toy_2d, ContaminatedDataset, Side};
use srot_core::ot::{cost_matrix, partial_ot, rot, sinkhorn, sinkhorn_unbalanced, solve_exact, CostKind, RotMode, TransportPlan};
use srot_core::srot::{detect_both, srot_hard, srot_soft};

use crate::config::{ExperimentConfig, Preset, SolveMethod};
use crate::output::{self, finish, Output};
use crate::svg::{self, Layer};
use crate::usage;

fn dataset_path(cfg: &ExperimentConfig, out: &Output) -> PathBuf {
    cfg.dataset.path.clone().unwrap_or_else(|| out.path(output::DATASET))
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("{what} not found at {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn load_dataset(cfg: &ExperimentConfig, out: &Output) -> Result<ContaminatedDataset> {
    let path = dataset_path(cfg, out);
    let ds = io::read_dataset(open(&path, "dataset").context("run `srot gen` first or pass --data")?)
        .with_context(|| format!("cannot read dataset {}", path.display()))?;
    Ok(ds)
}

pub fn gen(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let d = &cfg.dataset;
    let mut w = out.create(output::DATASET)?;
    let n_points = match d.preset {
        Preset::Toy2d => {
            let ds = gen_toy_2d(d.n_clean, d.n_type1, d.n_type2, cfg.seed)?;
            io::write_dataset(&mut w, &ds)?;
            ds.source.len() + ds.target.len()
        }
        Preset::Flow2d => {
            let ds = gen_flow_2d(d.n, d.kappa, cfg.seed)?;
            io::write_dataset(&mut w, &ds)?;
            ds.source.len() + ds.target.len()
        }
        Preset::Labelprop => {
            let ds = gen_labelprop_analog(d.dim, cfg.seed)?;
            io::write_labeled_dataset(&mut w, &ds)?;
            ds.data.source.len() + ds.data.target.len()
        }
    };
    finish(w)?;
    println!("{}: {n_points} points written to {}", d.preset.as_str(), out.path(output::DATASET).display());
    Ok(())
}

fn fit_classifier(cfg: &ExperimentConfig, ds: &ContaminatedDataset) -> Result<ClassifierModel> {
    let model = init_model(&cfg.classifier_dims(ds.source.dim()), cfg.classifier.activation, cfg.classifier.train.seed)?;
    let (model, _) = train_model(model, ds, &cfg.classifier.train)?;
    Ok(model)
}

pub fn train(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    for rel in [output::CHECKPOINT, output::HISTORY, output::DETECTION] {
        out.check_fresh(rel)?;
    }
    let model = init_model(&cfg.classifier_dims(ds.source.dim()), cfg.classifier.activation, cfg.classifier.train.seed)?;
    let (model, history) = train_model(model, &ds, &cfg.classifier.train)?;
    let mut w = out.create(output::CHECKPOINT)?;
    io::write_json(&mut w, &Checkpoint::new(&model, &cfg.classifier.train))?;
    finish(w)?;
    let mut w = out.create(output::HISTORY)?;
    io::write_history(&mut w, &history)?;
    finish(w)?;
    let (sm, tm) = detect_both(&model, &ds.source, &ds.target)?;
    let mut w = out.create(output::DETECTION)?;
    io::write_mask(&mut w, &[&sm, &tm])?;
    finish(w)?;
    for (side, mask) in [(Side::Source, &sm), (Side::Target, &tm)] {
        let truth = ds.truth(side);
        let hits = mask.flags.iter().zip(truth).filter(|(f, t)| **f && **t).count();
        println!(
            "{}: flagged {} of {} points ({hits} of {} true outliers)",
            side.as_str(),
            mask.n_flagged(),
            mask.len(),
            truth.iter().filter(|t| **t).count()
        );
    }
    Ok(())
}

/// A checkpoint given on the command line, else the run's own checkpoint,
/// else a classifier trained now and saved as the run's checkpoint.
fn classifier_for(cfg: &ExperimentConfig, out: &Output, ds: &ContaminatedDataset, explicit: Option<&Path>) -> Result<ClassifierModel> {
    let default = out.path(output::CHECKPOINT);
    let path = explicit.map(Path::to_path_buf).or_else(|| default.exists().then_some(default));
    let model = match path {
        Some(p) => {
            let ckpt: Checkpoint =
                io::read_json(open(&p, "classifier checkpoint")?).with_context(|| format!("cannot read {}", p.display()))?;
            ckpt.model()?
        }
        None => {
            let model = fit_classifier(cfg, ds)?;
            let mut w = out.create(output::CHECKPOINT)?;
            io::write_json(&mut w, &Checkpoint::new(&model, &cfg.classifier.train))?;
            finish(w)?;
            model
        }
    };
    if model.input_dim() != ds.source.dim() {
        bail!("classifier expects {}-dimensional inputs but the dataset is {}-dimensional", model.input_dim(), ds.source.dim());
    }
    Ok(model)
}

fn fmt_param(v: f64) -> String {
    v.to_string().replace('-', "m")
}

fn solve_plans(cfg: &ExperimentConfig, ds: &ContaminatedDataset, model: Option<&ClassifierModel>) -> Result<Vec<(String, TransportPlan)>> {
    let s = &cfg.solver;
    let (src, tgt) = (&ds.source, &ds.target);
    let (a, b) = (src.weights().view(), tgt.weights().view());
    let cost = cost_matrix(src, tgt, CostKind::Euclidean)?;
    let name = s.method.as_str().to_string();
    Ok(match s.method {
        SolveMethod::Exact => vec![(name, solve_exact(a, b, &cost)?)],
        SolveMethod::Sinkhorn => vec![(name, sinkhorn(a, b, &cost, &s.solver)?)],
        SolveMethod::Uot => {
            let taus = if s.tau.is_empty() { vec![s.solver.tau] } else { s.tau.clone() };
            taus.into_iter()
                .map(|tau| Ok((format!("uot_tau{}", fmt_param(tau)), sinkhorn_unbalanced(a, b, &cost, &s.solver.tau(tau))?)))
                .collect::<Result<_>>()?
        }
        SolveMethod::Partial => {
            let mass = s.mass.unwrap_or_else(|| src.total_mass().min(tgt.total_mass()));
            vec![(format!("partial_m{}", fmt_param(mass)), partial_ot(a, b, &cost, mass)?)]
        }
        SolveMethod::Truncated => vec![(format!("truncated_rho{}", fmt_param(s.rho)), rot(a, b, &cost, s.rho, RotMode::Truncated)?)],
        SolveMethod::SrotHard => vec![(name, srot_hard(src, tgt, model.expect("classifier loaded for SROT"), &cfg.srot)?)],
        SolveMethod::SrotSoft => vec![(name, srot_soft(src, tgt, model.expect("classifier loaded for SROT"), &cfg.srot)?)],
    })
}

fn plan_title(stem: &str, objective: f64) -> String {
    format!("{stem}: objective {objective:.4}")
}

fn render_plan(out: &Output, ds: &ContaminatedDataset, stem: &str, objective: f64, coupling: &Array2<f64>) -> Result<svg::PlanPlot> {
    if coupling.dim() != (ds.source.len(), ds.target.len()) {
        bail!("plan {stem} is {:?} but the dataset has {} source and {} target points", coupling.dim(), ds.source.len(), ds.target.len());
    }
    let plot = svg::plan_plot(
        &plan_title(stem, objective),
        Layer { points: ds.source.points(), tags: ds.types(Side::Source) },
        Layer { points: ds.target.points(), tags: ds.types(Side::Target) },
        coupling,
    );
    out.overwrite(Path::new(output::PLOTS).join(format!("{stem}.svg")), &plot.svg)?;
    Ok(plot)
}

pub fn solve(cfg: &ExperimentConfig, out: &Output, model_path: Option<&Path>) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    let model = match cfg.solver.method.needs_classifier() {
        true => Some(classifier_for(cfg, out, &ds, model_path)?),
        false => None,
    };
    let plans = solve_plans(cfg, &ds, model.as_ref())?;
    for (stem, _) in &plans {
        out.check_fresh(Path::new(output::PLANS).join(format!("{stem}.json")))?;
    }
    for (stem, plan) in &plans {
        let mut w = out.create(Path::new(output::PLANS).join(format!("{stem}.json")))?;
        io::write_json(&mut w, &PlanRecord::new(plan))?;
        finish(w)?;
        let plot = render_plan(out, &ds, stem, plan.objective, &plan.coupling)?;
        println!(
            "{stem}: objective {} mass {:.6} converged {} ({} segments drawn{})",
            plan.objective,
            plan.total_mass(),
            plan.converged,
            plot.drawn,
            if plot.culled > 0 { format!(", {} culled", plot.culled) } else { String::new() }
        );
    }
    Ok(())
}

/// Loss names, with `_2`, `_3`, ... appended to repeated ones.
fn unique_labels(names: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    names
        .map(|n| {
            let k = seen.entry(n.clone()).or_insert(0);
            *k += 1;
            if *k == 1 {
                n
            } else {
                format!("{n}_{k}")
            }
        })
        .collect()
}

fn render_flow(out: &Output, ds: &ContaminatedDataset, label: &str, start: &Array2<f64>, end: &Array2<f64>) -> Result<()> {
    let svg = svg::flow_plot(&format!("flow: {label}"), Layer { points: ds.source.points(), tags: ds.types(Side::Source) }, start, end);
    out.overwrite(Path::new(output::PLOTS).join(format!("flow_{label}.svg")), &svg)?;
    Ok(())
}

/// Series are ordered by label so plots do not depend on how flows were listed.
fn render_flow_series(out: &Output, mut evals: Vec<(String, Vec<(f64, f64)>)>, mut losses: Vec<(String, Vec<(f64, f64)>)>) -> Result<()> {
    evals.sort_by(|a, b| a.0.cmp(&b.0));
    losses.sort_by(|a, b| a.0.cmp(&b.0));
    if evals.iter().any(|s| !s.1.is_empty()) {
        out.overwrite(
            Path::new(output::PLOTS).join("flow_eval.svg"),
            &svg::line_chart("distance to the clean reference", "iteration", "W", &evals),
        )?;
    }
    out.overwrite(Path::new(output::PLOTS).join("flow_loss.svg"), &svg::line_chart("flow loss", "iteration", "loss", &losses))?;
    Ok(())
}

pub fn flow(cfg: &ExperimentConfig, out: &Output, model_path: Option<&Path>) -> Result<()> {
    if cfg.flow.losses.is_empty() {
        return Err(usage("no flow losses: pass --loss or set flow.losses"));
    }
    let ds = load_dataset(cfg, out)?;
    let (alpha, beta0) = (&ds.source, &ds.target);
    let clean = ds.indices_of(Side::Source, None);
    let alpha_c = if clean.is_empty() { None } else { Some(alpha.subset(&clean, "alpha_clean")?) };
    let model = match cfg.flow.losses.iter().any(|l| l.needs_classifier()) {
        true => Some(classifier_for(cfg, out, &ds, model_path)?),
        false => None,
    };
    let labels = unique_labels(cfg.flow.losses.iter().map(|l| l.name().to_string()));
    for label in &labels {
        out.check_fresh(Path::new(output::TRACES).join(label))?;
    }
    let flow_cfg = cfg.flow.flow_config();
    let traces: Vec<FlowTrace> = cfg
        .flow
        .losses
        .par_iter()
        .zip(&labels)
        .map(|(spec, label)| {
            let objective = FlowObjective::resolve(spec, alpha, beta0, model.as_ref())?;
            let mut trace = euler_flow(alpha, beta0, spec, &objective, &flow_cfg, alpha_c.as_ref())?;
            trace.label = label.clone();
            Ok(trace)
        })
        .collect::<Result<_>>()?;

    for trace in &traces {
        io::write_trace_dir(&out.fresh_dir(Path::new(output::TRACES).join(&trace.label))?, trace)?;
        render_flow(out, &ds, &trace.label, &trace.snapshots[0].1, trace.final_positions())?;
    }
    let summary = compare_flows(&traces)?;
    let mut csv = String::from("label,initial_loss,final_loss,final_eval,rank,failed\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &summary {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.label,
            opt(s.initial_loss),
            opt(s.final_loss),
            opt(s.final_eval),
            s.rank,
            u8::from(s.failed)
        ));
        println!(
            "{}: loss {} -> {}, final distance to clean reference {}{}",
            s.label,
            opt(s.initial_loss),
            opt(s.final_loss),
            opt(s.final_eval),
            if s.failed { " (stopped early)" } else { "" }
        );
    }
    let mut w = out.create(Path::new(output::TRACES).join("summary.csv"))?;
    std::io::Write::write_all(&mut w, csv.as_bytes())?;
    finish(w)?;
    render_flow_series(
        out,
        traces.iter().map(|t| (t.label.clone(), t.eval_series.iter().map(|&(i, v)| (i as f64, v)).collect())).collect(),
        traces.iter().map(|t| (t.label.clone(), t.loss_series.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect())).collect(),
    )
}

fn report_series(rows: &[io::ReportRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by_method: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (method, m, acc, _) in rows {
        match by_method.iter_mut().find(|s| &s.0 == method) {
            Some(s) => s.1.push((*m, *acc)),
            None => by_method.push((method.clone(), vec![(*m, *acc)])),
        }
    }
    for s in &mut by_method {
        s.1.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    by_method
}

fn render_report(out: &Output, rows: &[io::ReportRow]) -> Result<()> {
    let chart = svg::line_chart("label propagation accuracy", "transported mass m", "accuracy", &report_series(rows));
    out.overwrite(Path::new(output::PLOTS).join("labelprop.svg"), &chart)?;
    Ok(())
}

pub fn labelprop(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let lp = &cfg.labelprop;
    if lp.methods.is_empty() || lp.mass_grid.is_empty() {
        return Err(usage("labelprop needs at least one method and one mass"));
    }
    let path = dataset_path(cfg, out);
    let ds = io::read_labeled_dataset(open(&path, "dataset").context("run `srot gen --preset labelprop` first or pass --data")?)
        .with_context(|| format!("cannot read labeled dataset {}", path.display()))?;
    out.check_fresh(output::REPORT)?;
    let rows = run_labelprop_experiment(&ds, &lp.methods, &lp.mass_grid, &cfg.labelprop_config())?;
    let mut w = out.create(output::REPORT)?;
    io::write_report(&mut w, &rows)?;
    finish(w)?;
    for r in &rows {
        println!(
            "{} m={}: accuracy {:.4}, labeled accuracy {}, {} classified",
            r.method.as_str(),
            r.m,
            r.accuracy,
            r.labeled_accuracy.map_or("undefined".into(), |v| format!("{v:.4}")),
            r.n_classified
        );
    }
    let report: Vec<io::ReportRow> = rows.iter().map(|r| (r.method.as_str().to_string(), r.m, r.accuracy, r.labeled_accuracy)).collect();
    render_report(out, &report)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

fn last_and_first_snapshot(dir: &Path, meta: &TraceMeta) -> Result<(Array2<f64>, Array2<f64>)> {
    let read = |it: usize| -> Result<Array2<f64>> {
        let p = dir.join("snapshots").join(format!("iter_{it:06}.csv"));
        Ok(io::read_points(open(&p, "snapshot")?)?)
    };
    match (meta.snapshot_iterations.first(), meta.snapshot_iterations.last()) {
        (Some(&first), Some(&last)) => Ok((read(first)?, read(last)?)),
        _ => bail!("trace {} has no snapshots", dir.display()),
    }
}

/// Re-renders plans, flows and the label-propagation report from disk.
pub fn plot(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let mut rendered = 0;
    let plans: Vec<PathBuf> =
        sorted_entries(&out.path(output::PLANS))?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")).collect();
    let traces: Vec<PathBuf> = sorted_entries(&out.path(output::TRACES))?.into_iter().filter(|p| p.join("meta.json").is_file()).collect();
    let ds = if plans.is_empty() && traces.is_empty() { None } else { Some(load_dataset(cfg, out)?) };

    for p in &plans {
        let record: PlanRecord = io::read_json(open(p, "plan")?).with_context(|| format!("cannot read {}", p.display()))?;
        let stem = p.file_stem().expect("listed files have names").to_string_lossy();
        render_plan(out, ds.as_ref().expect("loaded when plans exist"), &stem, record.objective, &record.coupling()?)?;
        rendered += 1;
    }

    let (mut evals, mut losses) = (Vec::new(), Vec::new());
    for dir in &traces {
        let meta: TraceMeta = io::read_json(open(&dir.join("meta.json"), "trace metadata")?)?;
        let (start, end) = last_and_first_snapshot(dir, &meta)?;
        render_flow(out, ds.as_ref().expect("loaded when traces exist"), &meta.label, &start, &end)?;
        let rows = io::read_trace_csv(open(&dir.join("trace.csv"), "trace")?)?;
        evals.push((meta.label.clone(), rows.iter().filter_map(|r| r.2.map(|v| (r.0 as f64, v))).collect()));
        losses.push((meta.label.clone(), rows.iter().filter_map(|r| r.1.map(|v| (r.0 as f64, v))).collect()));
        rendered += 1;
    }
    if !traces.is_empty() {
        render_flow_series(out, evals, losses)?;
    }

    let report = out.path(output::REPORT);
    if report.is_file() {
        render_report(out, &io::read_report(open(&report, "report")?)?)?;
        rendered += 1;
    }
    if rendered == 0 {
        bail!("nothing to plot in {}", out.path("").display());
    }
    println!("rendered {rendered} artifacts into {}", out.path(output::PLOTS).display());
    Ok(())
}
