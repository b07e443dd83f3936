//! Run configuration: `key = value` lines grouped by `[section]` headers or
//! written with dotted keys. Every field has a default and unknown keys are
//! rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::engine::{DecodeConfig, DecodeMode};
use crate::model::{DraftArch, ModelConfig};
use crate::training::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerStrategy {
    /// Per-sample lowest-entropy block from offline calibration.
    Dynamic,
    /// Lowest-entropy block per position.
    PerPosition,
    /// A fixed block at `fraction` of the depth.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Root for checkpoints, caches, logs and reports.
    pub dir: PathBuf,
}

impl Paths {
    pub fn target(&self) -> PathBuf {
        self.dir.join("target.drmt")
    }
    pub fn target_log(&self) -> PathBuf {
        self.dir.join("target_log.jsonl")
    }
    pub fn responses(&self) -> PathBuf {
        self.dir.join("responses.tsv")
    }
    pub fn calibration(&self) -> PathBuf {
        self.dir.join("calibration.tsv")
    }
    pub fn draft(&self) -> PathBuf {
        self.dir.join("draft.drmt")
    }
    pub fn draft_log(&self) -> PathBuf {
        self.dir.join("draft_log.jsonl")
    }
    pub fn reports(&self, command: &str) -> PathBuf {
        self.dir.join("reports").join(command)
    }
    pub fn variants(&self) -> PathBuf {
        self.dir.join("variants")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub pad_to: usize,
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    /// Training prompts used for the draft (taken from the start of the train split).
    pub samples: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSection {
    pub strategy: LayerStrategy,
    /// Depth fraction for the static strategy.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    pub timing_runs: usize,
    pub prompts: usize,
    /// Also run the mode not selected in `decode.mode`.
    pub sweep_modes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    /// Variant ids to run; empty runs all of them.
    pub variants: Vec<String>,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    /// Std of the random weights; wide enough that draft and target disagree.
    pub spread: f64,
    pub seed: u64,
    pub gamma: usize,
    pub k: usize,
    pub depth: usize,
    pub tokens: usize,
    pub samples: usize,
    pub greedy_prompts: usize,
    pub enum_tolerance: f64,
    pub mc_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSection {
    pub grids: Vec<(usize, usize)>,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub draft: DraftArch,
    pub decode: DecodeConfig,
    pub loss: LossWeights,
    pub layers: LayerSection,
    pub data: DataSection,
    pub target_train: TargetTrainSection,
    pub draft_train: DraftTrainSection,
    pub bench: BenchSection,
    pub ablate: AblateSection,
    pub verify: VerifySection,
    pub profile: ProfileSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                dir: PathBuf::from("runs/default"),
            },
            model: ModelConfig::default(),
            draft: DraftArch::default(),
            decode: DecodeConfig {
                // Benchmarks run the full response budget.
                stop_at_eos: false,
                ..DecodeConfig::default()
            },
            loss: LossWeights::default(),
            layers: LayerSection {
                strategy: LayerStrategy::Dynamic,
                fraction: 0.5,
            },
            data: DataSection {
                train_samples: 2000,
                eval_samples: 100,
                test_samples: 100,
                seed: 7,
            },
            target_train: TargetTrainSection {
                steps: 6000,
                batch_size: 4,
                lr: 2e-3,
                clip: 1.0,
                pad_to: 10,
                eval_every: 500,
                target_accuracy: 0.99,
                seed: 42,
            },
            draft_train: DraftTrainSection {
                steps: 4000,
                batch_size: 4,
                lr: 1e-3,
                clip: 0.5,
                seed: 42,
                samples: 1000,
                checkpoint_every: 0,
            },
            bench: BenchSection {
                temperatures: vec![0.0, 1.0],
                seeds: vec![1, 2, 3],
                timing_runs: 3,
                prompts: 100,
                sweep_modes: true,
            },
            ablate: AblateSection {
                variants: Vec::new(),
                prompts: 50,
            },
            verify: VerifySection {
                vocab: 4,
                d_model: 8,
                n_heads: 2,
                layers: 2,
                spread: 0.6,
                seed: 11,
                gamma: 2,
                k: 2,
                depth: 2,
                tokens: 3,
                samples: 200_000,
                greedy_prompts: 100,
                enum_tolerance: 1e-12,
                mc_tolerance: 0.01,
            },
            profile: ProfileSection {
                grids: vec![(2, 2), (4, 4), (6, 6)],
                tokens: 64,
            },
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
                Self::from_text(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().trim_matches('"'));
            let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            cfg.set(&key, v)?;
        }
        Ok(cfg)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        match key {
            "paths.dir" => self.paths.dir = PathBuf::from(v),

            "model.vocab_size" => self.model.vocab_size = num(key, v)?,
            "model.d_model" => self.model.d_model = num(key, v)?,
            "model.n_heads" => self.model.n_heads = num(key, v)?,
            "model.target_layers" => self.model.target_layers = num(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = num(key, v)?,
            "model.grid_h" => self.model.grid_h = num(key, v)?,
            "model.grid_w" => self.model.grid_w = num(key, v)?,
            "model.seed" => self.model.seed = num(key, v)?,

            "draft.initial_block" => self.draft.initial_block = flag(key, v)?,
            "draft.cross_blocks" => self.draft.cross_blocks = num(key, v)?,
            "draft.final_block" => self.draft.final_block = flag(key, v)?,

            "decode.mode" => self.decode.mode = v.parse::<DecodeMode>().map_err(|e| bad(key, v, e))?,
            "decode.gamma" => self.decode.gamma = num(key, v)?,
            "decode.k" => self.decode.k = num(key, v)?,
            "decode.depth" => self.decode.depth = num(key, v)?,
            "decode.max_draft_tokens" => self.decode.max_draft_tokens = num(key, v)?,
            "decode.temperature" => self.decode.temperature = num(key, v)?,
            "decode.keep_fraction" => self.decode.keep_fraction = num(key, v)?,
            "decode.max_new_tokens" => self.decode.max_new_tokens = num(key, v)?,
            "decode.seed" => self.decode.seed = num(key, v)?,
            "decode.stop_at_eos" => self.decode.stop_at_eos = flag(key, v)?,
            "decode.vtc" => self.decode.vtc = flag(key, v)?,

            "loss.feat" => self.loss.feat = num(key, v)?,
            "loss.intermed" => self.loss.intermed = num(key, v)?,
            "loss.kl" => self.loss.kl = num(key, v)?,

            "layers.strategy" => {
                self.layers.strategy = match v {
                    "dynamic" => LayerStrategy::Dynamic,
                    "per_position" => LayerStrategy::PerPosition,
                    "static" => LayerStrategy::Static,
                    _ => return Err(bad(key, v, "expected dynamic, per_position or static")),
                }
            }
            "layers.fraction" => self.layers.fraction = num(key, v)?,

            "data.train_samples" => self.data.train_samples = num(key, v)?,
            "data.eval_samples" => self.data.eval_samples = num(key, v)?,
            "data.test_samples" => self.data.test_samples = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,

            "target_train.steps" => self.target_train.steps = num(key, v)?,
            "target_train.batch_size" => self.target_train.batch_size = num(key, v)?,
            "target_train.lr" => self.target_train.lr = num(key, v)?,
            "target_train.clip" => self.target_train.clip = num(key, v)?,
            "target_train.pad_to" => self.target_train.pad_to = num(key, v)?,
            "target_train.eval_every" => self.target_train.eval_every = num(key, v)?,
            "target_train.target_accuracy" => self.target_train.target_accuracy = num(key, v)?,
            "target_train.seed" => self.target_train.seed = num(key, v)?,

            "draft_train.steps" => self.draft_train.steps = num(key, v)?,
            "draft_train.batch_size" => self.draft_train.batch_size = num(key, v)?,
            "draft_train.lr" => self.draft_train.lr = num(key, v)?,
            "draft_train.clip" => self.draft_train.clip = num(key, v)?,
            "draft_train.seed" => self.draft_train.seed = num(key, v)?,
            "draft_train.samples" => self.draft_train.samples = num(key, v)?,
            "draft_train.checkpoint_every" => self.draft_train.checkpoint_every = num(key, v)?,

            "bench.temperatures" => self.bench.temperatures = list(key, v)?,
            "bench.seeds" => self.bench.seeds = list(key, v)?,
            "bench.timing_runs" => self.bench.timing_runs = num(key, v)?,
            "bench.prompts" => self.bench.prompts = num(key, v)?,
            "bench.sweep_modes" => self.bench.sweep_modes = flag(key, v)?,

            "ablate.variants" => self.ablate.variants = list(key, v)?,
            "ablate.prompts" => self.ablate.prompts = num(key, v)?,

            "verify.vocab" => self.verify.vocab = num(key, v)?,
            "verify.d_model" => self.verify.d_model = num(key, v)?,
            "verify.n_heads" => self.verify.n_heads = num(key, v)?,
            "verify.layers" => self.verify.layers = num(key, v)?,
            "verify.spread" => self.verify.spread = num(key, v)?,
            "verify.seed" => self.verify.seed = num(key, v)?,
            "verify.gamma" => self.verify.gamma = num(key, v)?,
            "verify.k" => self.verify.k = num(key, v)?,
            "verify.depth" => self.verify.depth = num(key, v)?,
            "verify.tokens" => self.verify.tokens = num(key, v)?,
            "verify.samples" => self.verify.samples = num(key, v)?,
            "verify.greedy_prompts" => self.verify.greedy_prompts = num(key, v)?,
            "verify.enum_tolerance" => self.verify.enum_tolerance = num(key, v)?,
            "verify.mc_tolerance" => self.verify.mc_tolerance = num(key, v)?,

            "profile.grids" => {
                self.profile.grids = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|g| {
                        let (h, w) = g.split_once('x').ok_or_else(|| bad(key, v, "grids look like 2x2,4x4"))?;
                        Ok((num(key, h)?, num(key, w)?))
                    })
                    .collect::<Result<_, HarnessError>>()?
            }
            "profile.tokens" => self.profile.tokens = num(key, v)?,

            other => return Err(HarnessError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        self.draft.validate()?;
        self.decode.validate()?;
        self.training_weights()?;
        let max = self.model.max_seq_len;
        let need = crate::task::PROMPT_LEN + self.model.visual_tokens() + self.decode.max_new_tokens - 1;
        if need > max {
            return Err(HarnessError::Config(format!("decode.max_new_tokens does not fit: need {need} > {max}")));
        }
        if !(0.0..=1.0).contains(&self.layers.fraction) {
            return Err(HarnessError::Config(format!("layers.fraction {} outside [0, 1]", self.layers.fraction)));
        }
        if self.verify.vocab > 8 || self.verify.d_model > 16 {
            return Err(HarnessError::Config("verification models need vocab <= 8 and d_model <= 16".into()));
        }
        if self.bench.timing_runs == 0 || self.bench.seeds.is_empty() || self.bench.temperatures.is_empty() {
            return Err(HarnessError::Config("bench needs timing runs, seeds and temperatures".into()));
        }
        Ok(())
    }

    fn training_weights(&self) -> Result<(), HarnessError> {
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Every key with its current value, in a form `from_text` reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("paths.dir", self.paths.dir.display().to_string());
        let m = &self.model;
        put("model.vocab_size", m.vocab_size.to_string());
        put("model.d_model", m.d_model.to_string());
        put("model.n_heads", m.n_heads.to_string());
        put("model.target_layers", m.target_layers.to_string());
        put("model.max_seq_len", m.max_seq_len.to_string());
        put("model.grid_h", m.grid_h.to_string());
        put("model.grid_w", m.grid_w.to_string());
        put("model.seed", m.seed.to_string());
        put("draft.initial_block", self.draft.initial_block.to_string());
        put("draft.cross_blocks", self.draft.cross_blocks.to_string());
        put("draft.final_block", self.draft.final_block.to_string());
        let d = &self.decode;
        put("decode.mode", d.mode.to_string());
        put("decode.gamma", d.gamma.to_string());
        put("decode.k", d.k.to_string());
        put("decode.depth", d.depth.to_string());
        put("decode.max_draft_tokens", d.max_draft_tokens.to_string());
        put("decode.temperature", d.temperature.to_string());
        put("decode.keep_fraction", d.keep_fraction.to_string());
        put("decode.max_new_tokens", d.max_new_tokens.to_string());
        put("decode.seed", d.seed.to_string());
        put("decode.stop_at_eos", d.stop_at_eos.to_string());
        put("decode.vtc", d.vtc.to_string());
        put("loss.feat", self.loss.feat.to_string());
        put("loss.intermed", self.loss.intermed.to_string());
        put("loss.kl", self.loss.kl.to_string());
        let strategy = match self.layers.strategy {
            LayerStrategy::Dynamic => "dynamic",
            LayerStrategy::PerPosition => "per_position",
            LayerStrategy::Static => "static",
        };
        put("layers.strategy", strategy.into());
        put("layers.fraction", self.layers.fraction.to_string());
        put("data.train_samples", self.data.train_samples.to_string());
        put("data.eval_samples", self.data.eval_samples.to_string());
        put("data.test_samples", self.data.test_samples.to_string());
        put("data.seed", self.data.seed.to_string());
        let t = &self.target_train;
        put("target_train.steps", t.steps.to_string());
        put("target_train.batch_size", t.batch_size.to_string());
        put("target_train.lr", t.lr.to_string());
        put("target_train.clip", t.clip.to_string());
        put("target_train.pad_to", t.pad_to.to_string());
        put("target_train.eval_every", t.eval_every.to_string());
        put("target_train.target_accuracy", t.target_accuracy.to_string());
        put("target_train.seed", t.seed.to_string());
        let dt = &self.draft_train;
        put("draft_train.steps", dt.steps.to_string());
        put("draft_train.batch_size", dt.batch_size.to_string());
        put("draft_train.lr", dt.lr.to_string());
        put("draft_train.clip", dt.clip.to_string());
        put("draft_train.seed", dt.seed.to_string());
        put("draft_train.samples", dt.samples.to_string());
        put("draft_train.checkpoint_every", dt.checkpoint_every.to_string());
        let b = &self.bench;
        put("bench.temperatures", join(&b.temperatures));
        put("bench.seeds", join(&b.seeds));
        put("bench.timing_runs", b.timing_runs.to_string());
        put("bench.prompts", b.prompts.to_string());
        put("bench.sweep_modes", b.sweep_modes.to_string());
        put("ablate.variants", join(&self.ablate.variants));
        put("ablate.prompts", self.ablate.prompts.to_string());
        let v = &self.verify;
        put("verify.vocab", v.vocab.to_string());
        put("verify.d_model", v.d_model.to_string());
        put("verify.n_heads", v.n_heads.to_string());
        put("verify.layers", v.layers.to_string());
        put("verify.spread", v.spread.to_string());
        put("verify.seed", v.seed.to_string());
        put("verify.gamma", v.gamma.to_string());
        put("verify.k", v.k.to_string());
        put("verify.depth", v.depth.to_string());
        put("verify.tokens", v.tokens.to_string());
        put("verify.samples", v.samples.to_string());
        put("verify.greedy_prompts", v.greedy_prompts.to_string());
        put("verify.enum_tolerance", v.enum_tolerance.to_string());
        put("verify.mc_tolerance", v.mc_tolerance.to_string());
        let grids: Vec<String> = self.profile.grids.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        put("profile.grids", grids.join(","));
        put("profile.tokens", self.profile.tokens.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn sections_dotted_keys_and_overrides() {
        let text = "# comment\n[decode]\nmode = chain\ngamma = 4\n\n[bench]\nseeds = 5, 6\nprofile.grids = 2x2,3x3\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.decode.mode, DecodeMode::Chain);
        assert_eq!(c.decode.gamma, 4);
        assert_eq!(c.bench.seeds, vec![5, 6]);
        assert_eq!(c.profile.grids, vec![(2, 2), (3, 3)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, text).unwrap();
        let c = RunConfig::load(Some(&p), &["decode.gamma=2".into(), "paths.dir = /tmp/x".into()]).unwrap();
        assert_eq!(c.decode.gamma, 2);
        assert_eq!(c.paths.dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(RunConfig::from_text("[decode]\ngama = 3\n").is_err());
        assert!(RunConfig::from_text("decode.gamma = three\n").is_err());
        assert!(RunConfig::from_text("just words\n").is_err());
        assert!(RunConfig::load(None, &["decode.temperature=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["verify.vocab=9".into()]).is_err());
    }
}
