use std::io::Write;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::draft_loop::diverged_or;
use super::TrainError;
use crate::model::{TargetModel, RESPONSE_BUDGET};
use crate::task::{TaskSample, EOS};
use crate::tensor::{adamw_step, clip_global_norm, AdamConfig, AdamState, AttnMask, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip: f64,
    /// Responses are padded with EOS to this many tokens, so the model learns
    /// to keep emitting EOS once an answer is complete.
    pub pad_to: usize,
    /// Evaluate greedy accuracy every this many steps (0 disables early stop).
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 4,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            clip: 1.0,
            pad_to: RESPONSE_BUDGET,
            eval_every: 250,
            target_accuracy: 0.99,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrainReport {
    pub log: Vec<TargetStepLog>,
    pub steps_run: usize,
    pub final_accuracy: f64,
}

/// Input tokens, loss rows and next-token labels for one sample: the prefix,
/// the answer and EOS padding up to `pad_to` response tokens. Loss rows start
/// at the last prefix position.
pub fn target_sequence(sample: &TaskSample, pad_to: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let prefix = sample.prefix();
    let mut seq = prefix.tokens().to_vec();
    seq.extend_from_slice(&sample.answer_tokens);
    while seq.len() < prefix.len() + pad_to {
        seq.push(EOS);
    }
    let rows: Vec<usize> = (prefix.len() - 1..seq.len() - 1).collect();
    let labels = rows.iter().map(|&r| seq[r + 1]).collect();
    seq.pop();
    (seq, rows, labels)
}

/// Fraction of samples whose greedy answer (up to and including EOS) is exact.
pub fn greedy_accuracy(target: &TargetModel, samples: &[TaskSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        let out = target.greedy(s.prefix().tokens(), s.answer_tokens.len(), Some(EOS))?;
        correct += usize::from(out == s.answer_tokens);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Next-token cross-entropy on response positions. Stops after `cfg.steps`
/// or once held-out greedy accuracy reaches `cfg.target_accuracy`.
pub fn train_target(
    target: &mut TargetModel,
    train: &[TaskSample],
    eval: &[TaskSample],
    cfg: &TargetTrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TargetTrainReport, TrainError> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Config("target training needs samples and a positive batch size".into()));
    }
    let seqs: Vec<_> = train.iter().map(|s| target_sequence(s, cfg.pad_to)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut accuracy = 0.0;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
            }
            let (tokens, rows, labels) = &seqs[order.pop().expect("refilled above")];
            let g = Graph::new();
            let positions: Vec<usize> = (0..tokens.len()).collect();
            let pass = target.forward_graph(&g, tokens, &positions, None, Rc::new(AttnMask::causal(0, tokens.len())))?;
            let picked = g.gather_rows(pass.logits, rows)?;
            let loss = g.cross_entropy(picked, labels)?;
            loss_sum += g.scalar(loss);
            let grads = g.backward(loss).map_err(|e| diverged_or(e.into(), step))?;
            drop(pass);
            drop(g);
            target.params_mut().accumulate(&grads)?;
        }
        let b = cfg.batch_size as f64;
        target.params_mut().scale_grads(1.0 / b);
        let grad_norm = clip_global_norm(target.params_mut(), cfg.clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        adamw_step(target.params_mut(), &mut adam, &cfg.adam)?;
        steps_run = step;
        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let acc = if eval_now && !eval.is_empty() {
            accuracy = greedy_accuracy(target, eval)?;
            Some(accuracy)
        } else {
            None
        };
        let entry = TargetStepLog {
            step,
            loss: loss_sum / b,
            grad_norm,
            accuracy: acc,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry).expect("plain struct serializes"))?;
        }
        history.push(entry);
        if acc.is_some_and(|a| a >= cfg.target_accuracy) {
            break;
        }
    }
    if cfg.eval_every == 0 && !eval.is_empty() {
        accuracy = greedy_accuracy(target, eval)?;
    }
    Ok(TargetTrainReport {
        log: history,
        steps_run,
        final_accuracy: accuracy,
    })
}
