use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grads, LossValues, LossWeights, TrainError, TrainingSample};
use crate::model::{DraftModel, TargetModel};
use crate::tensor::{adamw_step, clip_global_norm, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save the draft every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for DraftTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 4,
            // The tiny draft needs a larger step than a pretrained-scale one.
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            clip: 0.5,
            weights: LossWeights::default(),
            seed: 42,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftStepLog {
    pub step: usize,
    pub loss_total: f64,
    pub loss_feat: f64,
    pub loss_intermed: f64,
    pub loss_kl: f64,
    pub grad_norm: f64,
}

/// Teacher-forced draft training against a frozen target. Batches are drawn
/// from a seeded shuffle of `samples`; each step averages the batch
/// gradients, clips them and takes one AdamW step. When `log` is given,
/// every step is written as one JSON line.
pub fn train_draft(
    draft: &mut DraftModel,
    target: &TargetModel,
    samples: &[TrainingSample],
    cfg: &DraftTrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<DraftStepLog>, TrainError> {
    cfg.weights.validate()?;
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Config("draft training needs samples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut sum = LossValues::default();
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &samples[order.pop().expect("refilled above")];
            let (v, grads) = loss_and_grads(draft, target, sample, &cfg.weights)
                .map_err(|e| diverged_or(e, step))?;
            draft.params_mut().accumulate(&grads)?;
            sum.total += v.total;
            sum.feat += v.feat;
            sum.intermed += v.intermed;
            sum.kl += v.kl;
        }
        let b = cfg.batch_size as f64;
        draft.params_mut().scale_grads(1.0 / b);
        let grad_norm = clip_global_norm(draft.params_mut(), cfg.clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        adamw_step(draft.params_mut(), &mut adam, &cfg.adam)?;
        let entry = DraftStepLog {
            step,
            loss_total: sum.total / b,
            loss_feat: sum.feat / b,
            loss_intermed: sum.intermed / b,
            loss_kl: sum.kl / b,
            grad_norm,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry).expect("plain struct serializes"))?;
        }
        history.push(entry);
        if let (Some(path), true) = (&cfg.checkpoint_path, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            draft.save(path)?;
        }
    }
    if !draft.params().all_finite() {
        return Err(TrainError::Diverged {
            step: cfg.steps,
            detail: "non-finite draft parameters".into(),
        });
    }
    Ok(history)
}

pub(super) fn diverged_or(e: TrainError, step: usize) -> TrainError {
    match e {
        TrainError::Tensor(crate::tensor::TensorError::NonFinite(op)) => TrainError::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}
