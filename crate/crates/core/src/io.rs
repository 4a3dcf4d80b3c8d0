//! CSV and JSON persistence for datasets, classifiers, plans, masks, flow
//! traces and label-propagation reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{Activation, ClassifierModel, EpochStats, TrainConfig};
use crate::error::{Error, Result};
use crate::flows::FlowTrace;
use crate::labelprop::{LabeledDataset, LabelpropRow};
use crate::measures::{ContaminatedDataset, DiscreteMeasure, OutlierType, Side};
use crate::ot::{SolverConfig, SolverTag, TransportPlan};
use crate::srot::OutlierMask;

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("invalid {what}: {s:?}")))
}

fn parse_opt_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn outlier_tag(t: Option<OutlierType>) -> &'static str {
    match t {
        None => "",
        Some(OutlierType::TypeI) => "type_i",
        Some(OutlierType::TypeII) => "type_ii",
    }
}

fn parse_outlier_tag(s: &str) -> Result<Option<OutlierType>> {
    match s.trim() {
        "" => Ok(None),
        "type_i" => Ok(Some(OutlierType::TypeI)),
        "type_ii" => Ok(Some(OutlierType::TypeII)),
        other => Err(Error::Parse(format!("unknown outlier type {other:?}"))),
    }
}

fn write_dataset_rows(w: impl Write, ds: &ContaminatedDataset, labels: Option<(&[usize], &[usize])>) -> Result<()> {
    let d = ds.source.dim();
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.extend(["weight", "side", "is_outlier", "outlier_type"].map(String::from));
    if labels.is_some() {
        header.push("label".into());
    }
    out.write_record(&header)?;
    for side in [Side::Source, Side::Target] {
        let m = ds.side(side);
        let side_labels = labels.map(|(s, t)| if side == Side::Source { s } else { t });
        for (i, (row, w)) in m.points().rows().into_iter().zip(m.weights()).enumerate() {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            let ty = ds.types(side)[i];
            rec.push(w.to_string());
            rec.push(side.as_str().into());
            rec.push(u8::from(ty.is_some()).to_string());
            rec.push(outlier_tag(ty).into());
            if let Some(l) = side_labels {
                rec.push(l[i].to_string());
            }
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `x0,...,x{d-1},weight,side,is_outlier,outlier_type`, source rows
/// first.
pub fn write_dataset(w: impl Write, ds: &ContaminatedDataset) -> Result<()> {
    write_dataset_rows(w, ds, None)
}

/// Dataset format with a trailing `label` column.
pub fn write_labeled_dataset(w: impl Write, ds: &LabeledDataset) -> Result<()> {
    write_dataset_rows(w, &ds.data, Some((&ds.source_labels, &ds.target_labels)))
}

struct ParsedSide {
    points: Vec<f64>,
    weights: Vec<f64>,
    types: Vec<Option<OutlierType>>,
    labels: Vec<usize>,
}

/// Source and target labels, when the file has a `label` column.
type LabelColumns = Option<(Vec<usize>, Vec<usize>)>;

fn read_dataset_rows(r: impl Read) -> Result<(ContaminatedDataset, LabelColumns)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let d = header.iter().take_while(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok()).count();
    let (wcol, scol) = match (col("weight"), col("side")) {
        (Some(w), Some(s)) => (w, s),
        _ => return Err(Error::Parse("dataset header needs weight and side columns".into())),
    };
    if d == 0 {
        return Err(Error::Parse("dataset header has no coordinate columns".into()));
    }
    let tcol = col("outlier_type");
    let lcol = col("label");
    let mut sides: [ParsedSide; 2] =
        std::array::from_fn(|_| ParsedSide { points: Vec::new(), weights: Vec::new(), types: Vec::new(), labels: Vec::new() });
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| Error::Parse(format!("row {}: missing column {k}", line + 1)));
        let side: Side = field(scol)?.trim().parse()?;
        let s = &mut sides[side.class_index()];
        for k in 0..d {
            s.points.push(parse_f64(field(k)?, "coordinate")?);
        }
        s.weights.push(parse_f64(field(wcol)?, "weight")?);
        s.types.push(match tcol {
            Some(t) => parse_outlier_tag(field(t)?)?,
            None => None,
        });
        if let Some(l) = lcol {
            let v = field(l)?.trim();
            s.labels.push(v.parse().map_err(|_| Error::Parse(format!("invalid label {v:?}")))?);
        }
    }
    let [src, tgt] = sides;
    let build = |s: &ParsedSide, name: &str| -> Result<DiscreteMeasure> {
        let n = s.weights.len();
        let pts = Array2::from_shape_vec((n, d), s.points.clone()).expect("row-major point buffer");
        DiscreteMeasure::new(pts, Some(s.weights.clone().into()), name)
    };
    let labels = lcol.map(|_| (src.labels.clone(), tgt.labels.clone()));
    let ds = ContaminatedDataset::new(build(&src, "source")?, build(&tgt, "target")?, src.types, tgt.types)?;
    Ok((ds, labels))
}

/// Reads the dataset format; a `label` column, if present, is ignored.
pub fn read_dataset(r: impl Read) -> Result<ContaminatedDataset> {
    Ok(read_dataset_rows(r)?.0)
}

/// Reads a dataset whose `label` column is required; the class count is the
/// largest label plus one.
pub fn read_labeled_dataset(r: impl Read) -> Result<LabeledDataset> {
    let (ds, labels) = read_dataset_rows(r)?;
    let (s, t) = labels.ok_or_else(|| Error::Parse("dataset has no label column".into()))?;
    let n_classes = s.iter().chain(&t).max().map_or(0, |m| m + 1);
    LabeledDataset::new(ds, s, t, n_classes)
}

/// Serialized classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Layer by layer: weights (row-major, fan_in x fan_out) then biases.
    pub params: Vec<f64>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(model: &ClassifierModel, config: &TrainConfig) -> Self {
        Self { dims: model.dims().to_vec(), activation: model.activation(), params: model.params(), config: config.clone() }
    }

    pub fn model(&self) -> Result<ClassifierModel> {
        ClassifierModel::from_params(&self.dims, self.activation, &self.params)
    }
}

pub fn write_json<T: Serialize>(mut w: impl Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(r: impl Read) -> Result<T> {
    Ok(serde_json::from_reader(r)?)
}

/// `epoch,ce_loss,ar_loss,accuracy`; `ar_loss` is empty for CE training.
pub fn write_history(w: impl Write, history: &[EpochStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "ce_loss", "ar_loss", "accuracy"])?;
    for e in history {
        out.write_record([e.epoch.to_string(), e.ce_loss.to_string(), opt_str(e.ar_loss), e.accuracy.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// `index,flag,confidence,side`.
pub fn write_mask(w: impl Write, masks: &[&OutlierMask]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["index", "flag", "confidence", "side"])?;
    for mask in masks {
        for (i, (f, c)) in mask.flags.iter().zip(&mask.confidences).enumerate() {
            out.write_record([i.to_string(), u8::from(*f).to_string(), c.to_string(), mask.side.as_str().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads mask rows back, grouped by side in file order.
pub fn read_mask(r: impl Read) -> Result<Vec<OutlierMask>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut by_side: BTreeMap<usize, OutlierMask> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("mask row has {} fields, expected 4", rec.len())));
        }
        let side: Side = rec[3].trim().parse()?;
        let entry = by_side.entry(side.class_index()).or_insert_with(|| OutlierMask::none(0, side));
        entry.flags.push(match rec[1].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse(format!("invalid flag {other:?}"))),
        });
        entry.confidences.push(parse_f64(&rec[2], "confidence")?);
    }
    Ok(by_side.into_values().collect())
}

/// Plans with at most this many entries are stored densely.
pub const DENSE_PLAN_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum CouplingRecord {
    Dense {
        rows: Vec<Vec<f64>>,
    },
    /// Nonzero entries as `(i, j, mass)`.
    Triplets {
        entries: Vec<(usize, usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub solver: SolverTag,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_source: usize,
    pub n_target: usize,
    pub config: Option<SolverConfig>,
    pub coupling: CouplingRecord,
}

impl PlanRecord {
    pub fn new(plan: &TransportPlan) -> Self {
        let (n, m) = plan.coupling.dim();
        let coupling = if n * m <= DENSE_PLAN_LIMIT {
            CouplingRecord::Dense { rows: plan.coupling.rows().into_iter().map(|r| r.to_vec()).collect() }
        } else {
            CouplingRecord::Triplets {
                entries: plan.coupling.indexed_iter().filter(|(_, v)| **v != 0.0).map(|((i, j), v)| (i, j, *v)).collect(),
            }
        };
        Self {
            solver: plan.solver,
            objective: plan.objective,
            iterations: plan.iterations,
            converged: plan.converged,
            n_source: n,
            n_target: m,
            config: plan.config,
            coupling,
        }
    }

    pub fn coupling(&self) -> Result<Array2<f64>> {
        let mut c = Array2::zeros((self.n_source, self.n_target));
        match &self.coupling {
            CouplingRecord::Dense { rows } => {
                if rows.len() != self.n_source || rows.iter().any(|r| r.len() != self.n_target) {
                    return Err(Error::Parse("dense coupling shape does not match n_source x n_target".into()));
                }
                for (i, r) in rows.iter().enumerate() {
                    for (j, v) in r.iter().enumerate() {
                        c[[i, j]] = *v;
                    }
                }
            }
            CouplingRecord::Triplets { entries } => {
                for &(i, j, v) in entries {
                    *c.get_mut((i, j)).ok_or_else(|| Error::Parse(format!("triplet ({i}, {j}) out of range")))? = v;
                }
            }
        }
        Ok(c)
    }
}

/// `iteration,loss,eval`: `loss` at iteration `t` is the value before the
/// `t`-th update; `eval` is measured after `t` updates where logged.
pub fn write_trace_csv(w: impl Write, trace: &FlowTrace) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loss", "eval"])?;
    let evals: BTreeMap<usize, f64> = trace.eval_series.iter().copied().collect();
    let last = trace.loss_series.len().max(evals.keys().next_back().copied().unwrap_or(0));
    for t in 0..=last {
        let loss = trace.loss_series.get(t).copied();
        let eval = evals.get(&t).copied();
        if loss.is_none() && eval.is_none() {
            continue;
        }
        out.write_record([t.to_string(), opt_str(loss), opt_str(eval)])?;
    }
    out.flush()?;
    Ok(())
}

pub type TraceRow = (usize, Option<f64>, Option<f64>);

pub fn read_trace_csv(r: impl Read) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Parse(format!("trace row has {} fields, expected 3", rec.len())));
            }
            let t = rec[0].trim().parse().map_err(|_| Error::Parse(format!("invalid iteration {:?}", &rec[0])))?;
            Ok((t, parse_opt_f64(&rec[1], "loss")?, parse_opt_f64(&rec[2], "eval")?))
        })
        .collect()
}

/// Point cloud as `x0,...,x{d-1}`.
pub fn write_points(w: impl Write, points: &Array2<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..points.ncols()).map(|k| format!("x{k}")))?;
    for row in points.rows() {
        out.write_record(row.iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_points(r: impl Read) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers()?.len();
    let mut buf = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Parse(format!("point row has {} fields, expected {d}", rec.len())));
        }
        for v in rec.iter() {
            buf.push(parse_f64(v, "coordinate")?);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), buf).expect("row-major point buffer"))
}

/// Summary of a trace stored next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub label: String,
    pub loss: crate::flows::LossSpec,
    pub config: crate::flows::FlowConfig,
    pub reference: Option<u64>,
    pub failure: Option<String>,
    pub snapshot_iterations: Vec<usize>,
}

/// Writes `<dir>/trace.csv`, `<dir>/meta.json` and one
/// `<dir>/snapshots/iter_XXXXXX.csv` per snapshot.
pub fn write_trace_dir(dir: &Path, trace: &FlowTrace) -> Result<()> {
    let snaps = dir.join("snapshots");
    std::fs::create_dir_all(&snaps)?;
    write_trace_csv(std::fs::File::create(dir.join("trace.csv"))?, trace)?;
    for (it, pts) in &trace.snapshots {
        write_points(std::fs::File::create(snaps.join(format!("iter_{it:06}.csv")))?, pts)?;
    }
    let meta = TraceMeta {
        label: trace.label.clone(),
        loss: trace.loss.clone(),
        config: trace.config.clone(),
        reference: trace.reference,
        failure: trace.failure.clone(),
        snapshot_iterations: trace.snapshots.iter().map(|s| s.0).collect(),
    };
    write_json(std::fs::File::create(dir.join("meta.json"))?, &meta)
}

/// `method,m,accuracy,labeled_accuracy`; an empty `labeled_accuracy` means
/// nothing was classified.
pub fn write_report(w: impl Write, rows: &[LabelpropRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "m", "accuracy", "labeled_accuracy"])?;
    for r in rows {
        out.write_record([r.method.as_str().to_string(), r.m.to_string(), r.accuracy.to_string(), opt_str(r.labeled_accuracy)])?;
    }
    out.flush()?;
    Ok(())
}

pub type ReportRow = (String, f64, f64, Option<f64>);

pub fn read_report(r: impl Read) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Parse(format!("report row has {} fields, expected 4", rec.len())));
            }
            Ok((rec[0].to_string(), parse_f64(&rec[1], "m")?, parse_f64(&rec[2], "accuracy")?, parse_opt_f64(&rec[3], "labeled_accuracy")?))
        })
        .collect()
}
