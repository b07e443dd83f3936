//! Distribution-level checks of the decoder: exhaustive enumeration of chain
//! rounds and Monte Carlo sampling of whole sessions.

use std::collections::BTreeMap;

use super::session::NodeRows;
use super::tree::{DraftTree, TreeNode};
use super::{
    accept_probability, prefill_open, residual_distribution, token_distribution, DecodeConfig, DecodeMode,
    DecodeSession, Drafter, EngineError, Result,
};
use crate::model::TargetModel;
use crate::sequence::TokenSequence;

pub type Distribution = BTreeMap<Vec<usize>, f64>;

/// Exact distribution of the first `n` tokens produced by chain-mode
/// speculative decoding. Every draft sample, acceptance outcome and residual
/// draw is enumerated with its probability, and each branch advances a cloned
/// session through the same state transitions a sampled run uses.
pub fn chain_distribution(
    target: &TargetModel,
    drafter: Drafter<'_>,
    prefix: &TokenSequence,
    cfg: &DecodeConfig,
    n: usize,
) -> Result<Distribution> {
    if cfg.mode != DecodeMode::Chain {
        return Err(EngineError::Config("enumeration covers chain mode only".into()));
    }
    let (base, first) = prefill_open(target, drafter, prefix, cfg)?;
    let mut out = Distribution::new();
    for (tok, &p) in first.iter().enumerate() {
        if p > 0.0 {
            let mut s = base.clone();
            s.commit_first(tok);
            rounds(s, p, n, &mut out)?;
        }
    }
    Ok(out)
}

fn rounds(mut s: DecodeSession<'_>, prob: f64, n: usize, out: &mut Distribution) -> Result<()> {
    if s.is_finished() || s.generated().len() >= n {
        let g = s.generated();
        *out.entry(g[..g.len().min(n)].to_vec()).or_insert(0.0) += prob;
        return Ok(());
    }
    let len = s.draft_budget(s.config().gamma);
    let root = s.catch_up()?;
    drafts(s, DraftTree::new(), NodeRows::new(), root, Vec::new(), len, prob, n, out)
}

#[allow(clippy::too_many_arguments)]
fn drafts(
    s: DecodeSession<'_>,
    tree: DraftTree,
    rows: NodeRows,
    logits: Vec<f64>,
    qs: Vec<Vec<f64>>,
    len: usize,
    prob: f64,
    n: usize,
    out: &mut Distribution,
) -> Result<()> {
    if tree.len() == len {
        return outcomes(s, tree, qs, prob, n, out);
    }
    let q = token_distribution(&logits, s.config().temperature);
    for (tok, &qt) in q.iter().enumerate() {
        if qt == 0.0 {
            continue;
        }
        let (mut s2, mut t2, mut r2) = (s.clone(), tree.clone(), rows.clone());
        let i = t2.len();
        let node = t2.push(TreeNode {
            token: tok,
            parent: i.checked_sub(1),
            depth: i + 1,
            draft_prob: qt,
            cum_logp: t2.nodes.last().map_or(0.0, |nd| nd.cum_logp) + qt.ln(),
        });
        let next_logits = if t2.len() < len {
            s2.spec_forward(&t2, &[node], &mut r2)?.row(0).to_vec()
        } else {
            Vec::new()
        };
        let mut q2 = qs.clone();
        q2.push(q.clone());
        drafts(s2, t2, r2, next_logits, q2, len, prob * qt, n, out)?;
    }
    Ok(())
}

fn outcomes(
    mut s: DecodeSession<'_>,
    tree: DraftTree,
    qs: Vec<Vec<f64>>,
    prob: f64,
    n: usize,
    out: &mut Distribution,
) -> Result<()> {
    let verified = s.verify(&tree)?;
    let t = s.config().temperature;
    let mut reach = 1.0;
    for (i, q) in qs.iter().enumerate() {
        let p = token_distribution(verified.logits.row(i), t);
        let a = accept_probability(p[tree.nodes[i].token], q[tree.nodes[i].token])?;
        let reject = reach * (1.0 - a);
        if reject > 0.0 {
            for (c, &r) in residual_distribution(&p, q).iter().enumerate() {
                if r > 0.0 {
                    let mut s2 = s.clone();
                    s2.commit_outcome(&tree, &verified, i, c)?;
                    rounds(s2, prob * reject * r, n, out)?;
                }
            }
        }
        reach *= a;
        if reach == 0.0 {
            return Ok(());
        }
    }
    let bonus = token_distribution(verified.logits.row(tree.len()), t);
    for (c, &p) in bonus.iter().enumerate() {
        if p > 0.0 {
            let mut s2 = s.clone();
            s2.commit_outcome(&tree, &verified, tree.len(), c)?;
            rounds(s2, prob * reach * p, n, out)?;
        }
    }
    Ok(())
}

/// Empirical distribution of the first `n` tokens over `samples` independent
/// sessions. The prefill is shared; each sample reseeds its own copy. Work is
/// split across `threads` scoped threads.
pub fn monte_carlo_distribution(
    target: &TargetModel,
    drafter: Drafter<'_>,
    prefix: &TokenSequence,
    cfg: &DecodeConfig,
    n: usize,
    samples: usize,
    threads: usize,
) -> Result<Distribution> {
    let (base, first) = prefill_open(target, drafter, prefix, cfg)?;
    let threads = threads.clamp(1, samples.max(1));
    let chunk = samples.div_ceil(threads);
    let counts: Vec<Result<BTreeMap<Vec<usize>, usize>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (base, first) = (&base, &first);
                scope.spawn(move || {
                    let mut counts = BTreeMap::new();
                    for i in (t * chunk)..((t + 1) * chunk).min(samples) {
                        let mut s = base.clone();
                        s.reseed(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
                        let tok = s.sample_token(first);
                        s.commit_first(tok);
                        while !s.is_finished() && s.generated().len() < n {
                            s.round()?;
                        }
                        let g = s.generated();
                        *counts.entry(g[..g.len().min(n)].to_vec()).or_insert(0) += 1;
                    }
                    Ok(counts)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Distribution::new();
    for c in counts {
        for (k, v) in c? {
            *out.entry(k).or_insert(0.0) += v as f64 / samples as f64;
        }
    }
    Ok(out)
}

/// Marginal distribution of the token at each of the first `n` positions.
/// Sequences that ended early contribute nothing past their end.
pub fn position_marginals(dist: &Distribution, n: usize, vocab: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; vocab]; n];
    for (seq, &p) in dist {
        for (i, &t) in seq.iter().enumerate().take(n) {
            m[i][t] += p;
        }
    }
    m
}

/// Half the L1 distance between two distributions over the same keys.
pub fn total_variation<K: Ord + Clone>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Total variation between two dense distributions.
pub fn total_variation_dense(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
