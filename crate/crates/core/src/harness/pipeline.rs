//! The two-stage training pipeline: target pretraining, then offline
//! calibration followed by draft training. Each stage reads the previous
//! stage's artifacts from `paths.dir`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::config::{LayerStrategy, RunConfig};
use super::{io_err, parallel_map, HarnessError, Result};
use crate::entropy::{calibrate, read_calibration};
use crate::model::{DraftModel, TargetModel};
use crate::task::{make_dataset, TaskSample};
use crate::tensor::AdamConfig;
use crate::training::{
    build_training_sample, train_draft, train_target, DraftStepLog, DraftTrainConfig, LayerChoice, TargetTrainConfig,
    TrainingSample,
};

pub struct Datasets {
    pub train: Vec<TaskSample>,
    pub eval: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Train, held-out evaluation and test splits, each from its own seed.
pub fn datasets(cfg: &RunConfig) -> Datasets {
    let d = &cfg.data;
    Datasets {
        train: make_dataset(d.train_samples, d.seed, &cfg.model),
        eval: make_dataset(d.eval_samples, d.seed.wrapping_add(1), &cfg.model),
        test: make_dataset(d.test_samples, d.seed.wrapping_add(2), &cfg.model),
    }
}

fn ensure_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.dir).map_err(io_err(&cfg.paths.dir))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub checkpoint: String,
}

pub fn cmd_train_target(cfg: &RunConfig) -> Result<TargetSummary> {
    ensure_dir(cfg)?;
    let data = datasets(cfg);
    let mut target = TargetModel::new(cfg.model.clone())?;
    let t = &cfg.target_train;
    let hp = TargetTrainConfig {
        steps: t.steps,
        batch_size: t.batch_size,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        clip: t.clip,
        pad_to: t.pad_to,
        eval_every: t.eval_every,
        target_accuracy: t.target_accuracy,
        seed: t.seed,
    };
    let log_path = cfg.paths.target_log();
    let mut log = create(&log_path)?;
    let report = train_target(&mut target, &data.train, &data.eval, &hp, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let path = cfg.paths.target();
    target.save(&path)?;
    Ok(TargetSummary {
        steps_run: report.steps_run,
        final_loss: report.log.last().map_or(f64::NAN, |l| l.loss),
        final_accuracy: report.final_accuracy,
        checkpoint: path.display().to_string(),
    })
}

pub fn load_target(cfg: &RunConfig) -> Result<TargetModel> {
    let path = cfg.paths.target();
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            what: "target checkpoint",
            path,
            command: "train-target",
            function: "cmd_train_target",
        });
    }
    let target = TargetModel::load(&path)?;
    if target.config() != &cfg.model {
        return Err(HarnessError::Config(format!(
            "{} was trained with a different model config; retrain or fix [model]",
            path.display()
        )));
    }
    Ok(target)
}

pub fn load_draft(cfg: &RunConfig) -> Result<DraftModel> {
    let path = cfg.paths.draft();
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            what: "draft checkpoint",
            path,
            command: "train-draft",
            function: "cmd_train_draft",
        });
    }
    Ok(DraftModel::load(&path)?)
}

pub fn write_responses(path: &Path, responses: &BTreeMap<String, Vec<usize>>) -> Result<()> {
    let mut w = create(path)?;
    for (id, toks) in responses {
        let line: Vec<String> = toks.iter().map(ToString::to_string).collect();
        writeln!(w, "{id}\t{}", line.join(" ")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_responses(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            what: "target responses",
            path: path.to_path_buf(),
            command: "calibrate",
            function: "cmd_calibrate",
        });
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, toks) = line
            .split_once('\t')
            .ok_or_else(|| HarnessError::Config(format!("{}: malformed line {line:?}", path.display())))?;
        let toks = toks
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<usize>>>()?;
        out.insert(id.to_string(), toks);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateSummary {
    pub samples: usize,
    /// How many samples picked each block.
    pub layer_histogram: Vec<usize>,
    pub calibration: String,
    pub responses: String,
}

/// Generates the target's greedy responses for the draft-training prompts and
/// picks each sample's distillation block from its attention entropy.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrateSummary> {
    let target = load_target(cfg)?;
    let data = datasets(cfg);
    let prompts = &data.train[..cfg.draft_train.samples.min(data.train.len())];
    let budget = cfg.decode.max_new_tokens;
    let responses: Vec<(String, Vec<usize>)> = parallel_map(prompts, |s| {
        Ok((s.id(), target.greedy(s.prefix().tokens(), budget, None)?))
    })?;
    let responses: BTreeMap<String, Vec<usize>> = responses.into_iter().collect();
    write_responses(&cfg.paths.responses(), &responses)?;

    let items: Vec<(String, Vec<usize>)> = prompts
        .iter()
        .map(|s| {
            let mut toks = s.prefix().tokens().to_vec();
            toks.extend(&responses[&s.id()]);
            (s.id(), toks)
        })
        .collect();
    let path = cfg.paths.calibration();
    if path.exists() {
        fs::remove_file(&path).map_err(io_err(&path))?;
    }
    let map = calibrate(&items, &target, Some(&path))?;
    let mut hist = vec![0; target.num_layers()];
    for &l in map.values() {
        hist[l] += 1;
    }
    Ok(CalibrateSummary {
        samples: map.len(),
        layer_histogram: hist,
        calibration: path.display().to_string(),
        responses: cfg.paths.responses().display().to_string(),
    })
}

/// Block index for a static choice at `fraction` of the depth, counting
/// blocks from 1 as the depth fraction does.
pub fn static_block(layers: usize, fraction: f64) -> usize {
    ((layers as f64 * fraction).round() as usize).clamp(1, layers) - 1
}

pub fn layer_choice(cfg: &RunConfig) -> Result<LayerChoice> {
    Ok(match cfg.layers.strategy {
        LayerStrategy::Dynamic => {
            let path = cfg.paths.calibration();
            if !path.exists() {
                return Err(HarnessError::MissingArtifact {
                    what: "calibration cache",
                    path,
                    command: "calibrate",
                    function: "cmd_calibrate",
                });
            }
            LayerChoice::Calibrated(read_calibration(&path)?)
        }
        LayerStrategy::PerPosition => LayerChoice::PerPosition,
        LayerStrategy::Static => LayerChoice::Fixed(static_block(cfg.model.target_layers, cfg.layers.fraction)),
    })
}

/// Teacher-forced draft examples over the target's recorded responses.
pub fn draft_training_samples(
    cfg: &RunConfig,
    target: &TargetModel,
    responses: &BTreeMap<String, Vec<usize>>,
    choice: &LayerChoice,
) -> Result<Vec<TrainingSample>> {
    let data = datasets(cfg);
    let prompts = &data.train[..cfg.draft_train.samples.min(data.train.len())];
    let keep = if cfg.decode.vtc { cfg.decode.keep_fraction } else { 1.0 };
    parallel_map(prompts, |s| {
        let id = s.id();
        let response = responses.get(&id).ok_or_else(|| HarnessError::MissingArtifact {
            what: "response for a training prompt",
            path: cfg.paths.responses(),
            command: "calibrate",
            function: "cmd_calibrate",
        })?;
        Ok(build_training_sample(s, response, target, choice, keep)?)
    })
}

/// Trains a fresh draft with the architecture, weights and schedule in `cfg`.
pub fn train_draft_variant(
    cfg: &RunConfig,
    target: &TargetModel,
    samples: &[TrainingSample],
    log: Option<&mut dyn Write>,
) -> Result<(DraftModel, Vec<DraftStepLog>)> {
    let mut draft = DraftModel::new(cfg.model.clone(), cfg.draft)?;
    let d = &cfg.draft_train;
    let hp = DraftTrainConfig {
        steps: d.steps,
        batch_size: d.batch_size,
        adam: AdamConfig {
            lr: d.lr,
            ..AdamConfig::default()
        },
        clip: d.clip,
        weights: cfg.loss,
        seed: d.seed,
        checkpoint_every: d.checkpoint_every,
        checkpoint_path: (d.checkpoint_every > 0).then(|| cfg.paths.draft()),
    };
    let history = train_draft(&mut draft, target, samples, &hp, log)?;
    Ok((draft, history))
}

#[derive(Debug, Clone, Serialize)]
pub struct DraftSummary {
    pub steps: usize,
    pub first_loss: f64,
    /// Mean total loss over the last 50 steps.
    pub final_loss: f64,
    pub checkpoint: String,
}

pub fn cmd_train_draft(cfg: &RunConfig) -> Result<DraftSummary> {
    let target = load_target(cfg)?;
    let responses = read_responses(&cfg.paths.responses())?;
    let choice = layer_choice(cfg)?;
    let samples = draft_training_samples(cfg, &target, &responses, &choice)?;
    let log_path = cfg.paths.draft_log();
    let mut log = create(&log_path)?;
    let (draft, history) = train_draft_variant(cfg, &target, &samples, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let path = cfg.paths.draft();
    draft.save(&path)?;
    let tail = &history[history.len().saturating_sub(50)..];
    Ok(DraftSummary {
        steps: history.len(),
        first_loss: history.first().map_or(f64::NAN, |h| h.loss_total),
        final_loss: tail.iter().map(|h| h.loss_total).sum::<f64>() / tail.len().max(1) as f64,
        checkpoint: path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_blocks_follow_depth_fractions() {
        assert_eq!(static_block(8, 0.25), 1);
        assert_eq!(static_block(8, 0.5), 3);
        assert_eq!(static_block(8, 0.75), 5);
        assert_eq!(static_block(8, 0.0), 0);
        assert_eq!(static_block(8, 1.0), 7);
    }

    #[test]
    fn responses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![1, 2, 3]);
        m.insert("b".to_string(), vec![]);
        write_responses(&p, &m).unwrap();
        assert_eq!(read_responses(&p).unwrap(), m);
    }
}
