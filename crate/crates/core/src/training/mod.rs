//! Distillation losses, training-sample construction and the training loops
//! for the draft and the toy target.

mod draft_loop;
mod target_loop;

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use draft_loop::{train_draft, DraftStepLog, DraftTrainConfig};
pub use target_loop::{greedy_accuracy, target_sequence, train_target, TargetStepLog, TargetTrainConfig, TargetTrainReport};

use crate::entropy::{select_layer_per_position, CalibrationMap, EntropyError};
use crate::model::{DraftModel, DraftPass, ModelError, TargetModel};
use crate::sequence::Modality;
use crate::task::TaskSample;
use crate::tensor::{AttnMask, Gradients, Graph, Tensor, TensorError, Var};
use crate::vtc::{self, VtcError, VtcSelection};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vtc(#[from] VtcError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("no calibration entry for sample {0}; run calibration first")]
    MissingCalibration(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights of the feature, intermediate-feature and KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub feat: f64,
    pub intermed: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feat: 0.2,
            intermed: 0.2,
            kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if [self.feat, self.intermed, self.kl].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Where the intermediate-feature target comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerChoice {
    /// Per-sample block from an offline calibration pass.
    Calibrated(CalibrationMap),
    /// Lowest-entropy block chosen separately for every position.
    PerPosition,
    /// The same block for every sample.
    Fixed(usize),
}

/// One teacher-forced draft example with its cached target signals.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    /// Draft-side tokens: prompt, retained visual tokens, response.
    pub tokens: Vec<usize>,
    /// Position of each draft token in the uncompressed sequence.
    pub source_positions: Vec<usize>,
    /// Target last-block features at every draft position, `[n × d]`.
    pub bank: Tensor,
    /// Draft positions that carry losses (the response tokens).
    pub supervised: Vec<usize>,
    pub feat_target: Tensor,
    pub mid_target: Tensor,
    pub logit_target: Tensor,
    /// Intermediate block used for each supervised row.
    pub layers: Vec<usize>,
    pub selection: VtcSelection,
}

/// Runs the traced target over prefix plus `response` and assembles the
/// compacted draft example.
pub fn build_training_sample(
    raw: &TaskSample,
    response: &[usize],
    target: &TargetModel,
    choice: &LayerChoice,
    keep_fraction: f64,
) -> Result<TrainingSample, TrainError> {
    let id = raw.id();
    let mut seq = raw.prefix();
    let prefix_len = seq.len();
    let (q, v) = (raw.prompt_tokens.len(), raw.visual_tokens.len());
    seq.extend(response, Modality::Generated);

    let mut cache = target.new_cache();
    let out = target.forward(seq.tokens(), &mut cache, true)?;
    let trace = out.trace.expect("trace requested");

    let selection = if keep_fraction == 1.0 {
        VtcSelection::identity(v)
    } else {
        let last = trace.attn.last().expect("target has layers").top_rows(prefix_len);
        vtc::select_tokens(&vtc::column_scores(&last, q, v)?, keep_fraction)?
    };
    let source_positions = vtc::retained_positions(&seq, &selection)?;
    let tokens: Vec<usize> = source_positions.iter().map(|&p| seq.tokens()[p]).collect();
    let supervised: Vec<usize> = (0..tokens.len()).filter(|&i| source_positions[i] >= prefix_len).collect();
    let supervised_src: Vec<usize> = supervised.iter().map(|&i| source_positions[i]).collect();

    let layers = match choice {
        LayerChoice::Calibrated(map) => {
            let l = *map.get(&id).ok_or_else(|| TrainError::MissingCalibration(id.clone()))?;
            vec![l; supervised.len()]
        }
        LayerChoice::Fixed(l) => vec![*l; supervised.len()],
        LayerChoice::PerPosition => {
            let per_row = select_layer_per_position(&trace)?;
            supervised_src.iter().map(|&p| per_row[p]).collect()
        }
    };
    if let Some(&bad) = layers.iter().find(|&&l| l >= target.num_layers()) {
        return Err(TrainError::Config(format!("layer {bad} outside 0..{}", target.num_layers())));
    }
    let last = trace.last_hidden();
    let mid_rows: Vec<Vec<f64>> = supervised_src
        .iter()
        .zip(&layers)
        .map(|(&p, &l)| trace.hidden[l + 1].row(p).to_vec())
        .collect();
    Ok(TrainingSample {
        id,
        bank: gather(last, &source_positions)?,
        feat_target: gather(last, &supervised_src)?,
        mid_target: rows_or_empty(&mid_rows, last.cols())?,
        logit_target: gather(&out.logits, &supervised_src)?,
        tokens,
        source_positions,
        supervised,
        layers,
        selection,
    })
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor, TensorError> {
    let rows: Vec<Vec<f64>> = rows.iter().map(|&r| t.row(r).to_vec()).collect();
    rows_or_empty(&rows, t.cols())
}

fn rows_or_empty(rows: &[Vec<f64>], cols: usize) -> Result<Tensor, TensorError> {
    if rows.is_empty() {
        Ok(Tensor::zeros(&[0, cols]))
    } else {
        Tensor::from_rows(rows)
    }
}

/// Loss nodes on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub feat: Var,
    pub intermed: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub feat: f64,
    pub intermed: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph<'_>) -> LossValues {
        LossValues {
            total: g.scalar(self.total),
            feat: g.scalar(self.feat),
            intermed: g.scalar(self.intermed),
            kl: g.scalar(self.kl),
        }
    }
}

/// Three-term objective over the supervised rows. `em`, `e1` and `logits`
/// cover every draft position of `sample`.
pub fn compute_losses<'a>(
    g: &Graph<'a>,
    em: Var,
    e1: Var,
    logits: Var,
    sample: &'a TrainingSample,
    w: &LossWeights,
) -> Result<LossTerms, TrainError> {
    if sample.supervised.is_empty() {
        return Err(TrainError::Config(format!("sample {} has no supervised positions", sample.id)));
    }
    let n = g.shape(em)[0];
    if n != sample.tokens.len() || g.shape(e1)[0] != n || g.shape(logits)[0] != n {
        return Err(TrainError::Config(format!(
            "draft outputs have {n} rows, sample {} has {} tokens",
            sample.id,
            sample.tokens.len()
        )));
    }
    let constant = |t: &'a Tensor| g.constant_slice(t.data(), t.shape().to_vec());
    let em_s = g.gather_rows(em, &sample.supervised)?;
    let e1_s = g.gather_rows(e1, &sample.supervised)?;
    let d_s = g.gather_rows(logits, &sample.supervised)?;
    let feat = g.smooth_l1(em_s, constant(&sample.feat_target)?)?;
    let intermed = g.smooth_l1(e1_s, constant(&sample.mid_target)?)?;
    let kl = g.kl_divergence(d_s, constant(&sample.logit_target)?)?;
    let total = g.weighted_sum(&[(feat, w.feat), (intermed, w.intermed), (kl, w.kl)])?;
    Ok(LossTerms {
        total,
        feat,
        intermed,
        kl,
    })
}

/// Teacher-forced draft forward over a whole sample: causal self-attention and
/// a bank of the target's features where position `i` sees rows `j < i`.
pub fn draft_training_pass<'a>(
    draft: &'a DraftModel,
    target: &'a TargetModel,
    g: &Graph<'a>,
    sample: &'a TrainingSample,
) -> Result<DraftPass, TrainError> {
    let n = sample.tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let bank = g.constant_slice(sample.bank.data(), sample.bank.shape().to_vec())?;
    Ok(draft.forward_graph(
        target,
        g,
        &sample.tokens,
        &positions,
        None,
        Rc::new(AttnMask::causal(0, n)),
        bank,
        Rc::new(AttnMask::strictly_before(n, n)),
    )?)
}

/// Loss values and draft-parameter gradients for one sample.
pub fn loss_and_grads(
    draft: &DraftModel,
    target: &TargetModel,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<(LossValues, Gradients), TrainError> {
    let g = Graph::new();
    let pass = draft_training_pass(draft, target, &g, sample)?;
    let terms = compute_losses(&g, pass.em, pass.e1, pass.logits, sample, w)?;
    let values = terms.values(&g);
    let grads = g.backward(terms.total)?;
    Ok((values, grads))
}

/// Loss values only, without recording gradients.
pub fn sample_losses(
    draft: &DraftModel,
    target: &TargetModel,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<LossValues, TrainError> {
    let g = Graph::inference();
    let pass = draft_training_pass(draft, target, &g, sample)?;
    let terms = compute_losses(&g, pass.em, pass.e1, pass.logits, sample, w)?;
    g.check_finite()?;
    Ok(terms.values(&g))
}
