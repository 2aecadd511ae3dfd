//! Ablation runner: trains and evaluates every (variant, seed) cell,
//! aggregates mean ± sd retrieval metrics per variant, and records
//! numerical aborts per cell instead of halting the sweep. A group-count
//! sweep over the same machinery probes whitening stability.

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::runner::run_experiment;
use ams_core::ams::VariantKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Outcome of one training+evaluation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        map: f64,
        rank1: f64,
    },
    /// The run aborted with an explicit numerical-error report.
    Aborted {
        stage: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
    Failed {
        detail: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub seed: u64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub label: String,
    pub completed: usize,
    pub aborted: usize,
    pub mean_map: Option<f64>,
    pub sd_map: Option<f64>,
    pub mean_rank1: Option<f64>,
    pub sd_rank1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateTable {
    pub rows: Vec<AblateRow>,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
}

impl AblateTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,completed,aborted,mean_map,sd_map,mean_rank1,sd_rank1\n");
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map_or(String::from("nan"), |x| x.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.completed,
                r.aborted,
                fmt(r.mean_map),
                fmt(r.sd_map),
                fmt(r.mean_rank1),
                fmt(r.sd_rank1)
            ));
        }
        out
    }

    pub fn to_cells_csv(&self) -> String {
        let mut out = String::from("label,seed,status,map,rank1,stage,epoch,step,detail\n");
        for c in &self.cells {
            match &c.outcome {
                CellOutcome::Ok { map, rank1 } => out.push_str(&format!(
                    "{},{},ok,{map},{rank1},,,,\n",
                    c.label, c.seed
                )),
                CellOutcome::Aborted {
                    stage,
                    epoch,
                    step,
                    detail,
                } => out.push_str(&format!(
                    "{},{},aborted,,,{stage},{epoch},{step},\"{detail}\"\n",
                    c.label, c.seed
                )),
                CellOutcome::Failed { detail } => out.push_str(&format!(
                    "{},{},failed,,,,,,\"{detail}\"\n",
                    c.label, c.seed
                )),
            }
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&AblateRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn outcome_of(result: Result<(f64, f64)>) -> CellOutcome {
    match result {
        Ok((map, rank1)) => CellOutcome::Ok { map, rank1 },
        Err(HarnessError::TrainAbort {
            stage,
            epoch,
            step,
            detail,
        }) => CellOutcome::Aborted {
            stage,
            epoch,
            step,
            detail,
        },
        Err(other) => CellOutcome::Failed {
            detail: other.to_string(),
        },
    }
}

fn run_cell(base: &RunConfig, label: &str, seed: u64) -> Cell {
    let mut run = base.clone();
    run.train.seed = seed;
    // Each seed also draws its own data so seeds vary both data and init;
    // cells of different variants at the same seed share identical data.
    run.data.seed = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let result = run_experiment(&run, None, None).map(|out| (out.eval.mean_map, out.eval.mean_rank1));
    Cell {
        label: label.to_string(),
        seed,
        outcome: outcome_of(result),
    }
}

fn aggregate(label: &str, cells: &[Cell]) -> AblateRow {
    let mine: Vec<&Cell> = cells.iter().filter(|c| c.label == label).collect();
    let oks: Vec<(f64, f64)> = mine
        .iter()
        .filter_map(|c| match &c.outcome {
            CellOutcome::Ok { map, rank1 } => Some((*map, *rank1)),
            _ => None,
        })
        .collect();
    let aborted = mine
        .iter()
        .filter(|c| !matches!(c.outcome, CellOutcome::Ok { .. }))
        .count();
    let stats = |values: Vec<f64>| -> (Option<f64>, Option<f64>) {
        if values.is_empty() {
            return (None, None);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (Some(mean), Some(sd))
    };
    let (mean_map, sd_map) = stats(oks.iter().map(|o| o.0).collect());
    let (mean_rank1, sd_rank1) = stats(oks.iter().map(|o| o.1).collect());
    AblateRow {
        label: label.to_string(),
        completed: oks.len(),
        aborted,
        mean_map,
        sd_map,
        mean_rank1,
        sd_rank1,
    }
}

/// Trains and evaluates each variant over the given seeds (in parallel
/// across cells). Duplicate variants are dropped with a warning. The
/// mean ± sd table needs at least 3 seeds.
pub fn ablate_variants(
    base: &RunConfig,
    variants: &[VariantKind],
    seeds: &[u64],
) -> Result<AblateTable> {
    if seeds.len() < 3 {
        return Err(HarnessError::input(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut unique: Vec<VariantKind> = Vec::new();
    for v in variants {
        if unique.contains(v) {
            warnings.push(format!("duplicate variant {} dropped", v.name()));
        } else {
            unique.push(*v);
        }
    }
    if unique.is_empty() {
        return Err(HarnessError::input("no variants to ablate"));
    }

    let jobs: Vec<(VariantKind, u64)> = unique
        .iter()
        .flat_map(|v| seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let cells: Vec<Cell> = jobs
        .par_iter()
        .map(|(variant, seed)| {
            let mut cfg = base.clone();
            cfg.train.variant = *variant;
            run_cell(&cfg, &variant.name(), *seed)
        })
        .collect();

    let rows = unique
        .iter()
        .map(|v| aggregate(&v.name(), &cells))
        .collect();
    Ok(AblateTable {
        rows,
        cells,
        warnings,
    })
}

/// Sweeps the whitening group count, recording numerical aborts per cell
/// (small group counts may abort; the table keeps going). If the base
/// variant has no whitening stage, the sweep switches to the plain IN→GW
/// tandem and says so.
pub fn sweep_group_counts(
    base: &RunConfig,
    group_counts: &[usize],
    seeds: &[u64],
) -> Result<AblateTable> {
    if seeds.is_empty() || group_counts.is_empty() {
        return Err(HarnessError::input("need at least one seed and one g"));
    }
    let mut warnings = Vec::new();
    let mut base = base.clone();
    if !base.train.variant.combination.uses_gw() {
        warnings.push(format!(
            "variant {} has no whitening stage; sweeping IN_GW instead",
            base.train.variant.name()
        ));
        base.train.variant = VariantKind::plain(ams_core::ams::Combination::InGw);
    }
    let jobs: Vec<(usize, u64)> = group_counts
        .iter()
        .flat_map(|g| seeds.iter().map(move |s| (*g, *s)))
        .collect();
    let cells: Vec<Cell> = jobs
        .par_iter()
        .map(|(g, seed)| {
            let mut cfg = base.clone();
            cfg.train.whiten_g = *g;
            run_cell(&cfg, &format!("g={g}"), *seed)
        })
        .collect();
    let rows = group_counts
        .iter()
        .map(|g| aggregate(&format!("g={g}"), &cells))
        .collect();
    Ok(AblateTable {
        rows,
        cells,
        warnings,
    })
}
