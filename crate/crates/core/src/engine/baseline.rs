use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_from, token_distribution, DecodeConfig, Result};
use crate::model::{ModelError, TargetModel};
use crate::sequence::{Modality, TokenSequence};
use crate::task::EOS;
use crate::tensor::flops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArResult {
    pub tokens: Vec<usize>,
    /// Generation loop only, like speculative decoding's timing.
    pub wall_time_s: f64,
    pub time_per_token_s: f64,
    /// Target FLOPs of each single-token step after prefill.
    pub step_flops: Vec<u64>,
    pub total_flops: u64,
}

impl ArResult {
    pub fn sequence(&self) -> TokenSequence {
        let mut s = TokenSequence::new();
        s.extend(&self.tokens, Modality::Generated);
        s
    }
}

/// Plain autoregressive decoding with the target and a KV cache. The first
/// token uses the same RNG draw as speculative prefill.
pub fn ar_baseline(target: &TargetModel, prefix: &TokenSequence, cfg: &DecodeConfig) -> Result<ArResult> {
    cfg.validate()?;
    let max = target.config().max_seq_len;
    let need = prefix.len() + cfg.max_new_tokens - 1;
    if need > max {
        return Err(ModelError::Overflow { need, max }.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = target.new_cache();
    let (out, prefill_flops) = flops::measure(|| target.forward(prefix.tokens(), &mut cache, false));
    let mut logits = out?.logits;
    let start = Instant::now();
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut step_flops = Vec::new();
    loop {
        let dist = token_distribution(logits.row(logits.rows() - 1), cfg.temperature);
        let next = sample_from(&dist, &mut rng);
        tokens.push(next);
        if tokens.len() >= cfg.max_new_tokens || (cfg.stop_at_eos && next == EOS) {
            break;
        }
        let (out, f) = flops::measure(|| target.forward(&[next], &mut cache, false));
        logits = out?.logits;
        step_flops.push(f);
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(ArResult {
        time_per_token_s: wall / tokens.len() as f64,
        wall_time_s: wall,
        total_flops: prefill_flops + step_flops.iter().sum::<u64>(),
        step_flops,
        tokens,
    })
}

/// Exact distribution of the target's first `n` sampled tokens, by
/// enumerating every continuation with nonzero probability. A sequence ends
/// early at `stop` when given.
pub fn target_distribution(
    target: &TargetModel,
    prefix: &[usize],
    n: usize,
    temperature: f64,
    stop: Option<usize>,
) -> Result<BTreeMap<Vec<usize>, f64>> {
    let mut out = BTreeMap::new();
    let mut cache = target.new_cache();
    let logits = target.forward(prefix, &mut cache, false)?.logits;
    let first = token_distribution(logits.row(logits.rows() - 1), temperature);
    let mut stack = vec![(cache, Vec::new(), first, 1.0)];
    while let Some((cache, seq, dist, prob)) = stack.pop() {
        for (tok, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut next = seq.clone();
            next.push(tok);
            if next.len() == n || stop == Some(tok) {
                *out.entry(next).or_insert(0.0) += prob * p;
                continue;
            }
            let mut c = cache.clone();
            let l = target.forward(&[tok], &mut c, false)?.logits;
            stack.push((c, next, token_distribution(l.row(0), temperature), prob * p));
        }
    }
    Ok(out)
}
