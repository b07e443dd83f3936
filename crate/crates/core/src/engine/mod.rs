//! Speculative decoding: prefill, chain and tree drafting against the feature
//! bank, lossless verification and cache rollback.
//!
//! A [`DecodeSession`] owns every piece of mutable state for one prompt (both
//! KV caches, the feature bank and the sampling RNG), so sessions over the same
//! frozen models can run on separate threads.

mod bank;
mod baseline;
mod exact;
mod session;
mod tree;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bank::FeatureBank;
pub use baseline::{ar_baseline, target_distribution, ArResult};
pub use exact::{
    chain_distribution, monte_carlo_distribution, position_marginals, total_variation, total_variation_dense, Distribution,
};
pub use session::{decode, prefill, prefill_open, DecodeMetrics, DecodeSession, Drafter, RoundRecord};
pub use tree::{build_tree_mask, DraftTree, TreeNode};

use crate::model::{argmax, ModelError};
use crate::vtc::VtcError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vtc(#[from] VtcError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed draft tree: {0}")]
    MalformedTree(String),
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("internal state out of sync: {0}")]
    Desync(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Chain,
    Tree,
}

impl std::str::FromStr for DecodeMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Self::Chain),
            "tree" => Ok(Self::Tree),
            other => Err(EngineError::Config(format!("mode must be chain or tree, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Chain => "chain",
            Self::Tree => "tree",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Draft length per chain round.
    pub gamma: usize,
    /// Tree width: children per expanded node and nodes kept per level.
    pub k: usize,
    pub depth: usize,
    /// Upper bound on tree nodes per round.
    pub max_draft_tokens: usize,
    pub temperature: f64,
    pub keep_fraction: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// End generation at the first EOS instead of running to the budget.
    pub stop_at_eos: bool,
    /// When false, visual scoring is skipped and the draft sees every prefix token.
    pub vtc: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Tree,
            gamma: 6,
            k: 4,
            depth: 6,
            max_draft_tokens: 32,
            temperature: 0.0,
            keep_fraction: 0.75,
            max_new_tokens: crate::model::RESPONSE_BUDGET,
            seed: 42,
            stop_at_eos: true,
            vtc: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::Config(m));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction must lie in (0, 1], got {}", self.keep_fraction));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        match self.mode {
            DecodeMode::Chain if self.gamma == 0 => bad("chain mode needs gamma >= 1".into()),
            DecodeMode::Tree if self.k == 0 || self.depth == 0 || self.max_draft_tokens == 0 => {
                bad("tree mode needs k, depth and max_draft_tokens >= 1".into())
            }
            _ => Ok(()),
        }
    }
}

/// Probability of keeping a drafted token: `min(1, p_target / p_draft)`.
pub fn accept_probability(p_target: f64, p_draft: f64) -> Result<f64> {
    if !(p_draft > 0.0) {
        return Err(EngineError::Contract(format!("drafted token has draft probability {p_draft}")));
    }
    if !(p_target >= 0.0) {
        return Err(EngineError::Contract(format!("negative target probability {p_target}")));
    }
    Ok((p_target / p_draft).min(1.0))
}

/// `normalize(max(p - q, 0))`; returns `p` itself when nothing is left over.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    if s > 0.0 {
        r.into_iter().map(|x| x / s).collect()
    } else {
        p.to_vec()
    }
}

/// Softmax of `logits / temperature`; temperature 0 gives a one-hot argmax.
pub fn token_distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut out = vec![0.0; logits.len()];
        out[argmax(logits)] = 1.0;
        return out;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Inverse-CDF draw from a normalised distribution.
pub fn sample_from<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
