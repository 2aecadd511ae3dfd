//! End-to-end experiment orchestration: generate (or accept) multi-domain
//! data, train on the source domains, evaluate on the held-out domain, and
//! produce deterministic, serializable metrics.

use crate::backbone::Model;
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_domains, leave_one_out, SyntheticDataset};
use crate::error::Result;
use crate::eval::{evaluate_model, EvalSummary};
use crate::optim::Adam;
use crate::sampler::TrainPool;
use crate::train::{train_model, Precision, TrainLog};
use ams_core::real::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a training run produces, ready for JSON/CSV emission.
/// Serialization is deterministic given (seed, config, precision): field
/// order is fixed and no wall-clock data is included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: RunConfig,
    pub num_classes: usize,
    pub holdout_domain: usize,
    pub train: TrainLog,
    pub eval: EvalSummary,
}

impl ExperimentOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Compact CSV: per-epoch losses followed by the evaluation summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,epoch,lr,loss_total,loss_cls,loss_tri\n");
        for e in &self.train.epochs {
            out.push_str(&format!(
                "train,{},{},{},{},{}\n",
                e.epoch, e.lr, e.loss_total, e.loss_cls, e.loss_tri
            ));
        }
        out.push_str("section,metric,value\n");
        out.push_str(&format!("eval,mean_map,{}\n", self.eval.mean_map));
        out.push_str(&format!("eval,sd_map,{}\n", self.eval.sd_map));
        out.push_str(&format!("eval,mean_rank1,{}\n", self.eval.mean_rank1));
        out.push_str(&format!("eval,sd_rank1,{}\n", self.eval.sd_rank1));
        for (k, v) in self.eval.mean_cmc.iter().enumerate() {
            out.push_str(&format!("eval,cmc_rank{},{}\n", k + 1, v));
        }
        out
    }
}

fn run_typed<T: Real>(
    run: &RunConfig,
    datasets: Vec<SyntheticDataset>,
    checkpoint_path: Option<&Path>,
) -> Result<ExperimentOutput> {
    let holdout = run.data.holdout_domain();
    let (train_sets, held_out) = leave_one_out(datasets, holdout)?;
    let pool = TrainPool::build(train_sets)?;
    let (mut model, optimizer, log): (Model<T>, Adam<T>, TrainLog) =
        train_model(&run.train, &pool)?;
    let mut eval_rng = crate::train::eval_rng(run.eval.seed);
    let eval = evaluate_model(&mut model, &held_out, &run.eval, &mut eval_rng)?;
    if let Some(path) = checkpoint_path {
        let model_cfg = run.train.model_config(pool.num_classes);
        save_checkpoint(
            path,
            &mut model,
            &optimizer,
            &model_cfg,
            serde_json::to_value(run)?,
            run.train.epochs,
        )?;
    }
    Ok(ExperimentOutput {
        config: run.clone(),
        num_classes: pool.num_classes,
        holdout_domain: holdout,
        train: log,
        eval,
    })
}

/// Runs one experiment end to end. `datasets` may be pre-loaded; otherwise
/// they are generated from the config.
pub fn run_experiment(
    run: &RunConfig,
    datasets: Option<Vec<SyntheticDataset>>,
    checkpoint_path: Option<&Path>,
) -> Result<ExperimentOutput> {
    let datasets = match datasets {
        Some(d) => d,
        None => generate_domains(&run.data)?,
    };
    match run.train.precision {
        Precision::F64 => run_typed::<f64>(run, datasets, checkpoint_path),
        Precision::F32 => run_typed::<f32>(run, datasets, checkpoint_path),
    }
}
