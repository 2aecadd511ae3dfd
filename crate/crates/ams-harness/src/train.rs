//! PK-sampled training loop with warmup + cosine schedule, Adam with
//! decoupled weight decay, and fail-fast numerical-error reporting: a
//! non-finite loss or gradient aborts with the stage, epoch and step instead
//! of silently propagating NaN.

use crate::backbone::{Model, ModelConfig, ParamView};
use crate::data::AugmentConfig;
use crate::error::{HarnessError, Result};
use crate::optim::{lr_at, Adam, LrSchedule};
use crate::rng::{substream, Seeded};
use crate::sampler::{pk_sample, TrainPool};
use ams_core::loss::{batch_hard_triplet, softmax_cross_entropy, total_loss, LossConfig};
use ams_core::real::Real;
use serde::{Deserialize, Serialize};

/// Numeric precision of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F64
    }
}

/// Full training configuration. Defaults follow the reference recipe
/// (60 epochs, 10 warmup epochs, lr 3.5e-4 decaying to 7.7e-7, batches of
/// 8 identities x 16 images, weight decay 5e-4, triplet margin 0.3 with
/// weight 1); toy runs override the sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub augment: AugmentConfig,
    pub variant: ams_core::ams::VariantKind,
    pub placements: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub whiten_g: usize,
    pub whiten_epsilon: f64,
    pub ns_iterations: usize,
    pub sa_kernel: usize,
    pub ca_reduction: usize,
    pub in_epsilon: f64,
    pub margin: f64,
    pub lambda_tri: f64,
    /// Override for the number of optimizer steps per epoch; defaults to
    /// `ceil(pool size / (P*K))`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            warmup_epochs: 10,
            base_lr: 3.5e-4,
            final_lr: 7.7e-7,
            batch_p: 8,
            batch_k: 16,
            weight_decay: 5e-4,
            seed: 0,
            precision: Precision::F64,
            augment: AugmentConfig::default(),
            variant: ams_core::ams::VariantKind::canonical(),
            placements: vec![1, 2, 3],
            stage_widths: vec![32, 64, 128, 128],
            whiten_g: 8,
            whiten_epsilon: 1e-3,
            ns_iterations: 18,
            sa_kernel: 3,
            ca_reduction: 4,
            in_epsilon: 1e-5,
            margin: 0.3,
            lambda_tri: 1.0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HarnessError::config("epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(HarnessError::config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_p == 0 || self.batch_k == 0 {
            return Err(HarnessError::config("batch P and K must be positive"));
        }
        if self.batch_k < 2 {
            return Err(HarnessError::config(
                "batch K must be at least 2 so every anchor has a positive",
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            lambda_tri: self.lambda_tri,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            stage_widths: self.stage_widths.clone(),
            placements: self.placements.clone(),
            variant: self.variant,
            whiten_g: self.whiten_g,
            whiten_epsilon: self.whiten_epsilon,
            ns_iterations: self.ns_iterations,
            sa_kernel: self.sa_kernel,
            ca_reduction: self.ca_reduction,
            in_epsilon: self.in_epsilon,
            num_classes,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_tri: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

fn ensure_finite(value: f64, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::TrainAbort {
            stage: stage.to_string(),
            epoch,
            step,
            detail: format!("value {value} is not finite"),
        })
    }
}

fn with_context<T>(
    result: std::result::Result<T, HarnessError>,
    epoch: usize,
    step: usize,
) -> Result<T> {
    result.map_err(|e| match e {
        HarnessError::Core(core) if core.is_numerical() => {
            let stage = match &core {
                ams_core::CoreError::Numerical { stage, .. } => stage.to_string(),
                _ => unreachable!(),
            };
            HarnessError::TrainAbort {
                stage,
                epoch,
                step,
                detail: core.to_string(),
            }
        }
        other => other,
    })
}

/// Trains a model on the pooled source domains. Returns the trained model,
/// the optimizer (for checkpointing) and the per-epoch log.
pub fn train_model<T: Real>(
    cfg: &TrainConfig,
    pool: &TrainPool,
) -> Result<(Model<T>, Adam<T>, TrainLog)> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(pool.num_classes);
    let mut init_rng = substream(cfg.seed, "init");
    let mut model = Model::<T>::new(&model_cfg, &mut init_rng)?;
    let mut optimizer = Adam::<T>::new(cfg.weight_decay);
    let mut log = TrainLog {
        epochs: Vec::new(),
        warnings: model.warnings().to_vec(),
    };

    let batch_size = cfg.batch_p * cfg.batch_k;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| pool.num_images().div_ceil(batch_size))
        .max(1);
    let schedule = cfg.schedule();
    let loss_cfg = cfg.loss_config();
    let mut sample_rng = substream(cfg.seed, "sampler");
    let mut replacement_warned = false;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &schedule);
        let mut sum_total = 0.0;
        let mut sum_cls = 0.0;
        let mut sum_tri = 0.0;
        for step in 0..steps {
            let batch =
                pk_sample::<T>(pool, cfg.batch_p, cfg.batch_k, &cfg.augment, &mut sample_rng)?;
            if batch.replacement_used && !replacement_warned {
                log.warnings.push(
                    "an identity had fewer than K images; sampled with replacement".to_string(),
                );
                replacement_warned = true;
            }
            run_step(
                &mut model,
                &mut optimizer,
                &batch.images,
                &batch.ids,
                &loss_cfg,
                lr,
                epoch,
                step,
                &mut sum_total,
                &mut sum_cls,
                &mut sum_tri,
            )?;
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss_total: sum_total / steps as f64,
            loss_cls: sum_cls / steps as f64,
            loss_tri: sum_tri / steps as f64,
        });
    }
    Ok((model, optimizer, log))
}

#[allow(clippy::too_many_arguments)]
fn run_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    images: &ams_core::tensor::Tensor4<T>,
    ids: &[usize],
    loss_cfg: &LossConfig,
    lr: f64,
    epoch: usize,
    step: usize,
    sum_total: &mut f64,
    sum_cls: &mut f64,
    sum_tri: &mut f64,
) -> Result<()> {
    let (embed, logits) = with_context(model.forward(images), epoch, step)?;
    let (cls, g_logits) =
        with_context(softmax_cross_entropy(&logits, ids).map_err(Into::into), epoch, step)?;
    let (tri, g_embed) =
        with_context(batch_hard_triplet(&embed, ids, loss_cfg).map_err(Into::into), epoch, step)?;
    let total = total_loss(cls, tri, loss_cfg);
    ensure_finite(cls.to_f64(), "loss:cls", epoch, step)?;
    ensure_finite(tri.to_f64(), "loss:tri", epoch, step)?;
    ensure_finite(total.to_f64(), "loss:total", epoch, step)?;

    let lambda = T::from_f64(loss_cfg.lambda_tri);
    let mut g_embed_scaled = g_embed;
    for v in g_embed_scaled.data.iter_mut() {
        *v *= lambda;
    }
    model.zero_grads();
    with_context(model.backward(&g_embed_scaled, &g_logits), epoch, step)?;

    let mut grads_finite = true;
    model.visit_params(&mut |p: ParamView<'_, T>| {
        if grads_finite && p.grad.iter().any(|g| !g.is_finite()) {
            grads_finite = false;
        }
    });
    if !grads_finite {
        return Err(HarnessError::TrainAbort {
            stage: "gradients".to_string(),
            epoch,
            step,
            detail: "non-finite parameter gradient".to_string(),
        });
    }

    optimizer.step(model, lr);
    *sum_total += total.to_f64();
    *sum_cls += cls.to_f64();
    *sum_tri += tri.to_f64();
    Ok(())
}

/// Deterministic RNG stream for evaluation splits of a run.
pub fn eval_rng(seed: u64) -> Seeded {
    substream(seed, "eval-splits")
}
