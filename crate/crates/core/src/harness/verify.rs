//! Losslessness checks on small random models: exact enumeration for chain
//! decoding, Monte Carlo for tree decoding and token equality under greedy
//! decoding.

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::Serialize;

use super::config::{RunConfig, VerifySection};
use super::{io_err, thread_count, HarnessError, Result};
use crate::engine::{
    chain_distribution, decode, monte_carlo_distribution, position_marginals, prefill, target_distribution,
    total_variation, total_variation_dense, DecodeConfig, DecodeMode, Drafter,
};
use crate::model::{init_models, DraftArch, DraftModel, ModelConfig, TargetModel};
use crate::sequence::{Modality, TokenSequence};
use crate::tensor::ParamStore;

/// New tokens per prompt in the greedy comparison.
const GREEDY_TOKENS: usize = 24;

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    /// Total variation between enumerated chain decoding and the target.
    pub enumeration_tv: f64,
    /// Per-position total variation of sampled tree decoding.
    pub monte_carlo_tv: Vec<f64>,
    pub samples: usize,
    /// Prompts whose greedy speculative output matched the target, per mode.
    pub greedy_chain_matches: usize,
    pub greedy_tree_matches: usize,
    pub greedy_prompts: usize,
    pub passed: bool,
}

fn redraw(store: &mut ParamStore, seed: u64, spread: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        for x in store.get_mut(&name).expect("listed name").value.data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
}

/// A tiny target and draft whose weights are redrawn with a wide spread, so
/// both have peaked, mutually disagreeing distributions.
pub fn verification_models(v: &VerifySection) -> Result<(TargetModel, DraftModel)> {
    let config = ModelConfig {
        vocab_size: v.vocab,
        d_model: v.d_model,
        n_heads: v.n_heads,
        target_layers: v.layers,
        max_seq_len: 8 + GREEDY_TOKENS.max(v.tokens) + 8,
        grid_h: 2,
        grid_w: 2,
        seed: v.seed,
    };
    let (mut target, mut draft) = init_models(&config, DraftArch::default())?;
    redraw(target.params_mut(), v.seed.wrapping_add(1), v.spread);
    redraw(draft.params_mut(), v.seed.wrapping_add(2), v.spread);
    Ok((target, draft))
}

fn random_prefix(rng: &mut impl Rng, vocab: usize) -> TokenSequence {
    let mut s = TokenSequence::new();
    let text: Vec<usize> = (0..3).map(|_| rng.gen_range(0..vocab)).collect();
    let visual: Vec<usize> = (0..4).map(|_| rng.gen_range(0..vocab)).collect();
    s.extend(&text, Modality::Text);
    s.extend(&visual, Modality::Visual);
    s
}

fn base_config(cfg: &RunConfig) -> DecodeConfig {
    let v = &cfg.verify;
    DecodeConfig {
        gamma: v.gamma,
        k: v.k,
        depth: v.depth,
        max_draft_tokens: v.k * v.depth,
        temperature: 1.0,
        max_new_tokens: v.tokens,
        seed: v.seed,
        stop_at_eos: false,
        ..cfg.decode.clone()
    }
}

/// Exact check: enumerated chain output distribution against the target's.
pub fn enumeration_tv(cfg: &RunConfig, target: &TargetModel, draft: &DraftModel, prefix: &TokenSequence) -> Result<f64> {
    let dcfg = DecodeConfig {
        mode: DecodeMode::Chain,
        ..base_config(cfg)
    };
    let sd = chain_distribution(target, Drafter::Dream(draft), prefix, &dcfg, cfg.verify.tokens)?;
    let reference = target_distribution(target, prefix.tokens(), cfg.verify.tokens, 1.0, None)?;
    Ok(total_variation(&sd, &reference))
}

/// Sampled tree decoding: per-position total variation against the target.
pub fn monte_carlo_tv(
    cfg: &RunConfig,
    target: &TargetModel,
    draft: &DraftModel,
    prefix: &TokenSequence,
) -> Result<Vec<f64>> {
    let v = &cfg.verify;
    let dcfg = DecodeConfig {
        mode: DecodeMode::Tree,
        ..base_config(cfg)
    };
    let sd = monte_carlo_distribution(target, Drafter::Dream(draft), prefix, &dcfg, v.tokens, v.samples, thread_count())?;
    let reference = target_distribution(target, prefix.tokens(), v.tokens, 1.0, None)?;
    let a = position_marginals(&sd, v.tokens, v.vocab);
    let b = position_marginals(&reference, v.tokens, v.vocab);
    Ok(a.iter().zip(&b).map(|(x, y)| total_variation_dense(x, y)).collect())
}

/// Counts prompts whose temperature-0 speculative output equals plain greedy
/// decoding, for chain and tree mode.
pub fn greedy_matches(cfg: &RunConfig, target: &TargetModel, draft: &DraftModel) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.verify.seed.wrapping_add(3));
    let (mut chain, mut tree) = (0, 0);
    for _ in 0..cfg.verify.greedy_prompts {
        let prefix = random_prefix(&mut rng, cfg.verify.vocab);
        let want = target.greedy(prefix.tokens(), GREEDY_TOKENS, None)?;
        for (mode, hits) in [(DecodeMode::Chain, &mut chain), (DecodeMode::Tree, &mut tree)] {
            let dcfg = DecodeConfig {
                mode,
                temperature: 0.0,
                max_new_tokens: GREEDY_TOKENS,
                ..base_config(cfg)
            };
            let mut s = prefill(target, Drafter::Dream(draft), &prefix, &dcfg)?;
            let (out, _) = decode(&mut s)?;
            *hits += usize::from(out.tokens() == want.as_slice());
        }
    }
    Ok((chain, tree))
}

/// Runs all three checks and writes `reports/verify-lossless/report.json`.
/// Any breach of the configured tolerances is a threshold error.
pub fn cmd_verify_lossless(cfg: &RunConfig) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let (target, draft) = verification_models(v)?;
    let prefix = random_prefix(&mut ChaCha8Rng::seed_from_u64(v.seed), v.vocab);
    let enumeration_tv = enumeration_tv(cfg, &target, &draft, &prefix)?;
    log::info!("enumeration tv {enumeration_tv:.3e}");
    let monte_carlo_tv = monte_carlo_tv(cfg, &target, &draft, &prefix)?;
    log::info!("monte carlo tv per position {monte_carlo_tv:?}");
    let (greedy_chain_matches, greedy_tree_matches) = greedy_matches(cfg, &target, &draft)?;
    let passed = enumeration_tv < v.enum_tolerance
        && monte_carlo_tv.iter().all(|&t| t < v.mc_tolerance)
        && greedy_chain_matches == v.greedy_prompts
        && greedy_tree_matches == v.greedy_prompts;
    let report = VerifyReport {
        enumeration_tv,
        monte_carlo_tv,
        samples: v.samples,
        greedy_chain_matches,
        greedy_tree_matches,
        greedy_prompts: v.greedy_prompts,
        passed,
    };
    let dir = cfg.paths.reports("verify-lossless");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("plain struct serializes")).map_err(io_err(&path))?;
    if !passed {
        return Err(HarnessError::Threshold(format!(
            "losslessness check failed: enumeration tv {:.3e}, monte carlo tv {:?}, greedy {}/{} chain, {}/{} tree",
            report.enumeration_tv,
            report.monte_carlo_tv,
            report.greedy_chain_matches,
            report.greedy_prompts,
            report.greedy_tree_matches,
            report.greedy_prompts
        )));
    }
    Ok(report)
}
