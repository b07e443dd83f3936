use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ModelError;
use crate::task::PROMPT_LEN;

/// Longest response the decoder is sized for.
pub const RESPONSE_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub target_layers: usize,
    pub max_seq_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_heads: 4,
            target_layers: 8,
            max_seq_len: 112,
            grid_h: 6,
            grid_w: 6,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn visual_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Shape checks only; enough to build a model of any vocabulary.
    pub fn validate_structure(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.target_layers == 0 || self.vocab_size < 2 || self.max_seq_len == 0 {
            return bad("target_layers, vocab_size and max_seq_len must be positive".into());
        }
        Ok(())
    }

    /// Full checks for a model that runs the synthetic task.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_structure()?;
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.target_layers < 4 {
            return bad(format!("target_layers must be >= 4, got {}", self.target_layers));
        }
        if self.vocab_size < crate::task::VOCAB_USED {
            return bad(format!(
                "vocab_size {} smaller than the task vocabulary {}",
                self.vocab_size,
                crate::task::VOCAB_USED
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.grid_h > 10 || self.grid_w > 10 {
            return bad(format!("grid {}x{} outside 1..=10", self.grid_h, self.grid_w));
        }
        let need = PROMPT_LEN + self.visual_tokens() + RESPONSE_BUDGET;
        if self.max_seq_len < need {
            return bad(format!("max_seq_len {} < q+v+{RESPONSE_BUDGET} = {need}", self.max_seq_len));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("target_layers", self.target_layers.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed config line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = Self::default();
        for (k, v) in &kv {
            let parse = |v: &str| v.parse::<u64>().map_err(|e| ModelError::Config(format!("{k}: {e}")));
            let n = parse(v)?;
            match k.as_str() {
                "vocab_size" => cfg.vocab_size = n as usize,
                "d_model" => cfg.d_model = n as usize,
                "n_heads" => cfg.n_heads = n as usize,
                "target_layers" => cfg.target_layers = n as usize,
                "max_seq_len" => cfg.max_seq_len = n as usize,
                "grid_h" => cfg.grid_h = n as usize,
                "grid_w" => cfg.grid_w = n as usize,
                "seed" => cfg.seed = n,
                other => return Err(ModelError::Config(format!("unknown model config key {other}"))),
            }
        }
        Ok(cfg)
    }
}
