//! Parameter sweeps: one pipeline run per (axis value, seed) cell, reduced to
//! per-cell means and population standard deviations of the final metrics.

use rayon::prelude::*;

use crate::config::{RunConfig, SweepAxis};
use crate::error::{Error, Result};
use crate::metrics::mean_std;
use crate::pipeline::{run_pipeline, Experiment, StageInputs, StageSelection, StageMetrics};

pub const SWEEP_HEADER: &str =
    "axis,value,runs,asr_mean,asr_std,racc_mean,racc_std,racc_client_std,mia_mean,mia_std";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    /// Axis value, or `None` for the across-seed aggregate row.
    pub value: Option<f64>,
    pub runs: usize,
    pub asr: Option<(f64, f64)>,
    pub racc: (f64, f64),
    /// Mean over runs of the across-client R-Acc standard deviation.
    pub racc_client_std: f64,
    pub mia: Option<(f64, f64)>,
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::S => "s",
        SweepAxis::Alpha => "alpha",
        SweepAxis::UnlearnCount => "unlearn_count",
        SweepAxis::Seed => "seed",
    }
}

fn integral(key: &str, v: f64) -> Result<u64> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(Error::OutOfRange {
            key: key.into(),
            reason: format!("{v} is not a nonnegative integer"),
        })
    }
}

/// The config for one cell.
pub fn apply_axis(base: &RunConfig, axis: SweepAxis, value: f64, seed: u64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.sweep_axis = None;
    cfg.sweep_values.clear();
    cfg.sweep_seeds.clear();
    cfg.seed = seed;
    match axis {
        SweepAxis::S => cfg.s = integral("s", value)? as u32,
        SweepAxis::Alpha => cfg.alpha = value,
        SweepAxis::UnlearnCount => cfg.unlearn_clients = integral("unlearn_clients", value)? as usize,
        SweepAxis::Seed => cfg.seed = integral("seed", value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_cell(cfg: &RunConfig) -> Result<StageMetrics> {
    let exp = Experiment::build(cfg)?;
    let run = run_pipeline(&exp, StageSelection::All, StageInputs::default());
    if let Some(e) = run.error {
        return Err(e);
    }
    run.final_metrics.ok_or(Error::Empty { what: "final metrics" })
}

fn reduce(axis: SweepAxis, value: Option<f64>, cells: &[StageMetrics]) -> SweepRow {
    let asr: Vec<f64> = cells.iter().filter_map(|m| m.asr).collect();
    let mia: Vec<f64> = cells.iter().filter_map(|m| m.mia_auc).collect();
    let racc: Vec<f64> = cells.iter().map(|m| m.racc_mean).collect();
    let spread: Vec<f64> = cells.iter().map(|m| m.racc_std).collect();
    SweepRow {
        axis,
        value,
        runs: cells.len(),
        asr: (!asr.is_empty()).then(|| mean_std(&asr)),
        racc: mean_std(&racc),
        racc_client_std: mean_std(&spread).0,
        mia: (!mia.is_empty()).then(|| mean_std(&mia)),
    }
}

/// Runs every cell of the config's sweep. For the seed axis each seed is its
/// own row and a final row aggregates across seeds; other axes cross their
/// values with `sweep_seeds` (default: the config seed).
pub fn run_sweep(base: &RunConfig) -> Result<Vec<SweepRow>> {
    let axis = base.sweep_axis.ok_or_else(|| Error::MissingKey("sweep_axis".into()))?;
    let values: Vec<f64> = match axis {
        SweepAxis::Seed if base.sweep_values.is_empty() => {
            base.sweep_seeds.iter().map(|&s| s as f64).collect()
        }
        _ => base.sweep_values.clone(),
    };
    if values.is_empty() {
        return Err(Error::OutOfRange {
            key: "sweep_values".into(),
            reason: "sweep axis has no values".into(),
        });
    }
    let seeds: Vec<u64> = if axis == SweepAxis::Seed || base.sweep_seeds.is_empty() {
        vec![base.seed]
    } else {
        base.sweep_seeds.clone()
    };
    let mut jobs = Vec::new();
    for &v in &values {
        for &seed in &seeds {
            jobs.push((v, apply_axis(base, axis, v, seed)?));
        }
    }
    let results: Vec<StageMetrics> = jobs.par_iter().map(|(_, cfg)| run_cell(cfg)).collect::<Result<_>>()?;
    let mut rows: Vec<SweepRow> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| reduce(axis, Some(v), &results[i * seeds.len()..(i + 1) * seeds.len()]))
        .collect();
    if axis == SweepAxis::Seed {
        rows.push(reduce(axis, None, &results));
    }
    Ok(rows)
}

fn pair(p: Option<(f64, f64)>) -> String {
    p.map_or(",".into(), |(m, s)| format!("{m},{s}"))
}

pub fn format_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            axis_name(r.axis),
            r.value.map_or("all".into(), |v| v.to_string()),
            r.runs,
            pair(r.asr),
            r.racc.0,
            r.racc.1,
            r.racc_client_std,
            pair(r.mia),
        ));
    }
    out
}
