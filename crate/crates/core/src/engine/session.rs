use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{build_tree_mask, DraftTree, TreeNode};
use super::{
    accept_probability, residual_distribution, sample_from, token_distribution, DecodeConfig, DecodeMode, EngineError,
    FeatureBank, Result,
};
use crate::model::{DraftModel, KVCache, ModelError, TargetModel, TargetOutput};
use crate::sequence::{Modality, TokenSequence};
use crate::task::EOS;
use crate::tensor::{flops, AttnMask, Tensor};
use crate::vtc::{self, VtcSelection};

/// Where proposals come from.
#[derive(Debug, Clone, Copy)]
pub enum Drafter<'m> {
    /// The trained cross-attention draft.
    Dream(&'m DraftModel),
    /// The target drafting for itself; proposals always match verification.
    SelfDraft,
}

/// One line of the decode transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub committed_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_index: Option<usize>,
    pub mode: DecodeMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeMetrics {
    /// Tokens committed by each draft/verify round.
    pub rounds: Vec<usize>,
    /// Mean of `rounds`.
    pub tau: f64,
    /// Tokens committed by prefill (the first sampled token).
    pub prefill_tokens: usize,
    /// `prefill_tokens + rounds.iter().sum()`.
    pub generated: usize,
    /// Generation loop only; prefill is excluded.
    pub wall_time_s: f64,
    pub time_per_token_s: f64,
    pub target_flops: u64,
    pub draft_flops: u64,
    /// `accept_hist[a]` counts rounds that accepted exactly `a` drafted tokens.
    pub accept_hist: Vec<usize>,
}

impl DecodeMetrics {
    pub fn flops_per_token(&self) -> f64 {
        (self.target_flops + self.draft_flops) as f64 / self.generated.max(1) as f64
    }
}

/// Per-node bookkeeping for a drafted tree: its row in the draft cache and in
/// the feature bank once the draft has run on it.
pub(crate) type NodeRows = Vec<Option<(usize, usize)>>;

/// State for decoding one prompt.
///
/// Layout between rounds: the target cache holds every committed position
/// except the last committed token; the bank holds one verified row per draft
/// position except that token; `pending` lists committed tokens the draft has
/// not read yet.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    target: &'m TargetModel,
    drafter: Drafter<'m>,
    cfg: DecodeConfig,
    rng: ChaCha8Rng,
    target_cache: KVCache,
    draft_cache: KVCache,
    bank: FeatureBank,
    selection: VtcSelection,
    prefix_len: usize,
    draft_prefix_len: usize,
    generated: Vec<usize>,
    pending: Vec<usize>,
    finished: bool,
    records: Vec<RoundRecord>,
    target_flops: u64,
    draft_flops: u64,
}

/// Prefill without committing the first token. Returns the session and the
/// target's distribution for that token.
pub fn prefill_open<'m>(
    target: &'m TargetModel,
    drafter: Drafter<'m>,
    prefix: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<(DecodeSession<'m>, Vec<f64>)> {
    cfg.validate()?;
    if let Drafter::Dream(d) = drafter {
        if d.config() != target.config() {
            return Err(EngineError::Config("draft and target were built for different configs".into()));
        }
    }
    let max = target.config().max_seq_len;
    let need = prefix.len() + cfg.max_new_tokens - 1;
    if need > max {
        return Err(ModelError::Overflow { need, max }.into());
    }
    let v = prefix.count(Modality::Visual);
    let scoring = cfg.vtc && v > 0;
    let mut target_cache = target.new_cache();
    let out = target.forward(prefix.tokens(), &mut target_cache, scoring)?;

    let selection = if scoring {
        let q = prefix.visual_positions()[0];
        let last = out.trace.as_ref().and_then(|t| t.attn.last()).expect("trace requested");
        vtc::select_tokens(&vtc::column_scores(last, q, v)?, cfg.keep_fraction)?
    } else {
        VtcSelection::identity(v)
    };
    let kept = vtc::retained_positions(prefix, &selection)?;
    let draft_tokens: Vec<usize> = kept.iter().map(|&p| prefix.tokens()[p]).collect();

    let d = target.config().d_model;
    let mut bank = FeatureBank::new(d);
    let rows: Vec<f64> = kept.iter().flat_map(|&p| out.last_hidden.row(p).iter().copied()).collect();
    bank.push_verified(&rows)?;

    // Speculative rows sit above the committed ones, so leave room for a full round.
    let room = max + cfg.max_draft_tokens.max(cfg.gamma);
    let layers = match drafter {
        Drafter::Dream(dm) => dm.arch().self_attn_layers(),
        Drafter::SelfDraft => target.num_layers(),
    };
    let draft_cache = KVCache::new(layers, d, room);
    let mut session = DecodeSession {
        target,
        drafter,
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        target_cache,
        draft_cache,
        bank,
        selection,
        prefix_len: prefix.len(),
        draft_prefix_len: draft_tokens.len(),
        generated: Vec::new(),
        pending: Vec::new(),
        finished: false,
        records: Vec::new(),
        target_flops: 0,
        draft_flops: 0,
    };
    let m = draft_tokens.len();
    let positions: Vec<usize> = (0..m).collect();
    let (_, _, kv) = session.draft_forward(&draft_tokens, &positions, AttnMask::causal(0, m), AttnMask::strictly_before(m, m))?;
    session.draft_cache.append_rows(m, kv)?;
    session.target_flops = 0;
    session.draft_flops = 0;
    let first = token_distribution(out.logits.row(out.logits.rows() - 1), cfg.temperature);
    Ok((session, first))
}

/// Full prefill: the first token is sampled from the target and committed.
pub fn prefill<'m>(
    target: &'m TargetModel,
    drafter: Drafter<'m>,
    prefix: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeSession<'m>> {
    let (mut s, first) = prefill_open(target, drafter, prefix, cfg)?;
    let token = sample_from(&first, &mut s.rng);
    s.commit_first(token);
    Ok(s)
}

/// Runs rounds until the session finishes.
pub fn decode(session: &mut DecodeSession<'_>) -> Result<(TokenSequence, DecodeMetrics)> {
    let start = Instant::now();
    while !session.finished {
        session.round()?;
    }
    let wall = start.elapsed().as_secs_f64();
    let rounds: Vec<usize> = session.records.iter().map(|r| r.committed_tokens.len()).collect();
    let max_acc = session.records.iter().map(|r| r.accepted).max().unwrap_or(0);
    let mut hist = vec![0; max_acc + 1];
    for r in &session.records {
        hist[r.accepted] += 1;
    }
    let generated = session.generated.len();
    let metrics = DecodeMetrics {
        tau: if rounds.is_empty() { 0.0 } else { rounds.iter().sum::<usize>() as f64 / rounds.len() as f64 },
        prefill_tokens: generated - rounds.iter().sum::<usize>(),
        generated,
        wall_time_s: wall,
        time_per_token_s: wall / generated.max(1) as f64,
        target_flops: session.target_flops,
        draft_flops: session.draft_flops,
        accept_hist: hist,
        rounds,
    };
    let mut seq = TokenSequence::new();
    seq.extend(&session.generated, Modality::Generated);
    Ok((seq, metrics))
}

impl<'m> DecodeSession<'m> {
    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    pub fn generated(&self) -> &[usize] {
        &self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn selection(&self) -> &VtcSelection {
        &self.selection
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn target_cache(&self) -> &KVCache {
        &self.target_cache
    }

    pub fn draft_prefix_len(&self) -> usize {
        self.draft_prefix_len
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Replaces the sampling RNG, e.g. to draw many outcomes from one prefill.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// The transcript as JSON lines.
    pub fn transcript_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }

    /// Draws from `dist` with the session RNG.
    pub fn sample_token(&mut self, dist: &[f64]) -> usize {
        sample_from(dist, &mut self.rng)
    }

    pub fn commit_first(&mut self, token: usize) {
        self.generated.push(token);
        self.pending = vec![token];
        self.update_finished();
    }

    /// One draft/verify round in the configured mode.
    pub fn round(&mut self) -> Result<Vec<usize>> {
        if self.finished {
            return Err(EngineError::Desync("round requested on a finished session".into()));
        }
        match self.cfg.mode {
            DecodeMode::Chain => self.chain_round(),
            DecodeMode::Tree => self.tree_round(),
        }
    }

    fn remaining(&self) -> usize {
        self.cfg.max_new_tokens - self.generated.len()
    }

    fn update_finished(&mut self) {
        let eos = self.cfg.stop_at_eos && self.generated.last() == Some(&EOS);
        self.finished = eos || self.generated.len() >= self.cfg.max_new_tokens;
    }

    /// Drafted tokens per round, clamped so the round cannot overrun the budget.
    pub(crate) fn draft_budget(&self, wanted: usize) -> usize {
        wanted.min(self.remaining().saturating_sub(1))
    }

    fn draft_forward(
        &mut self,
        tokens: &[usize],
        positions: &[usize],
        self_mask: AttnMask,
        bank_mask: AttnMask,
    ) -> Result<(Tensor, Tensor, Vec<(Vec<f64>, Vec<f64>)>)> {
        let (res, f) = flops::measure(|| match self.drafter {
            Drafter::Dream(d) => d
                .forward(self.target, tokens, positions, &self.draft_cache, self_mask, self.bank.data(), bank_mask)
                .map(|o| (o.logits, o.em, o.new_kv)),
            Drafter::SelfDraft => self
                .target
                .forward_masked(tokens, positions, &self.draft_cache, self_mask, false)
                .map(|o| (o.logits, o.last_hidden, o.new_kv)),
        });
        self.draft_flops += f;
        Ok(res?)
    }

    /// Feeds pending committed tokens to the draft. Returns the draft logits
    /// at the last committed position and leaves that position's speculative
    /// feature row on the bank.
    pub(crate) fn catch_up(&mut self) -> Result<Vec<f64>> {
        let tokens = std::mem::take(&mut self.pending);
        let n = tokens.len();
        let start = self.draft_cache.len();
        let w = self.bank.watermark();
        if n == 0 || self.bank.len() != w || w + 1 != start + n {
            return Err(EngineError::Desync(format!(
                "catch-up of {n} tokens at draft length {start} with bank {}/{w}",
                self.bank.len()
            )));
        }
        let positions: Vec<usize> = (start..start + n).collect();
        let bank_mask = AttnMask::from_fn(n, w, |r, j| j < start + r);
        let (logits, em, kv) = self.draft_forward(&tokens, &positions, AttnMask::causal(start, n), bank_mask)?;
        self.draft_cache.append_rows(n, kv)?;
        self.bank.push_speculative(em.row(n - 1))?;
        Ok(logits.row(n - 1).to_vec())
    }

    /// Runs the draft on `nodes` (all at one level, each with every ancestor
    /// already drafted) and returns their logits rows.
    pub(crate) fn spec_forward(&mut self, tree: &DraftTree, nodes: &[usize], rows: &mut NodeRows) -> Result<Tensor> {
        let committed = self.committed_draft_len();
        let cached = self.draft_cache.len();
        let w = self.bank.watermark();
        let n = nodes.len();
        rows.resize(tree.len(), None);
        let ancestors: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&f| {
                let mut p = tree.path_to(f);
                p.pop();
                p
            })
            .collect();
        for a in ancestors.iter().flatten() {
            if rows[*a].is_none() {
                return Err(EngineError::Desync(format!("ancestor {a} not drafted yet")));
            }
        }
        let mut self_mask = vec![false; n * (cached + n)];
        let mut bank_mask = vec![false; n * self.bank.len()];
        for (r, anc) in ancestors.iter().enumerate() {
            let srow = &mut self_mask[r * (cached + n)..(r + 1) * (cached + n)];
            srow[..committed].iter_mut().for_each(|x| *x = true);
            srow[cached + r] = true;
            let brow = &mut bank_mask[r * self.bank.len()..(r + 1) * self.bank.len()];
            brow[..=w].iter_mut().for_each(|x| *x = true);
            for &a in anc {
                let (c, b) = rows[a].expect("checked above");
                srow[c] = true;
                brow[b] = true;
            }
        }
        let tokens: Vec<usize> = nodes.iter().map(|&f| tree.nodes[f].token).collect();
        let positions: Vec<usize> = nodes.iter().map(|&f| committed - 1 + tree.nodes[f].depth).collect();
        let bl = self.bank.len();
        let self_mask = AttnMask::from_fn(n, cached + n, |i, j| self_mask[i * (cached + n) + j]);
        let bank_mask = AttnMask::from_fn(n, bl, |i, j| bank_mask[i * bl + j]);
        let (logits, em, kv) = self.draft_forward(&tokens, &positions, self_mask, bank_mask)?;
        self.draft_cache.append_rows(n, kv)?;
        for (r, &f) in nodes.iter().enumerate() {
            let b = self.bank.push_speculative(em.row(r))?;
            rows[f] = Some((cached + r, b));
        }
        Ok(logits)
    }

    /// Draft positions holding committed tokens (valid after catch-up).
    fn committed_draft_len(&self) -> usize {
        self.draft_prefix_len + self.generated.len()
    }

    /// One masked target forward over the last committed token and every tree node.
    pub(crate) fn verify(&mut self, tree: &DraftTree) -> Result<TargetOutput> {
        let base = self.target_cache.len();
        let last = *self.generated.last().ok_or_else(|| EngineError::Desync("nothing committed yet".into()))?;
        if base + 1 != self.prefix_len + self.generated.len() {
            return Err(EngineError::Desync(format!("target cache {base} for {} committed", self.generated.len())));
        }
        let tm = build_tree_mask(tree)?;
        let n = tree.len();
        let mut tokens = vec![last];
        tokens.extend(tree.nodes.iter().map(|nd| nd.token));
        let mut positions = vec![base];
        positions.extend(tree.nodes.iter().map(|nd| base + nd.depth));
        let mask = AttnMask::from_fn(n + 1, base + n + 1, |i, j| {
            if j <= base {
                true
            } else if i == 0 {
                false
            } else {
                tm[i - 1][j - base - 1]
            }
        });
        let (out, f) = flops::measure(|| self.target.forward_masked(&tokens, &positions, &self.target_cache, mask, false));
        self.target_flops += f;
        Ok(out?)
    }

    /// Keeps the root and `path` from a verification pass, restores the draft
    /// state to committed positions and records the round.
    pub(crate) fn commit(
        &mut self,
        tree: &DraftTree,
        out: &TargetOutput,
        path: &[usize],
        next: usize,
        rejection_index: Option<usize>,
    ) -> Result<Vec<usize>> {
        let mut rows = vec![0];
        rows.extend(path.iter().map(|&i| i + 1));
        self.target_cache.append_rows(rows.len(), out.kv_rows(&rows))?;
        self.bank.rollback();
        let feats: Vec<f64> = rows.iter().flat_map(|&r| out.last_hidden.row(r).iter().copied()).collect();
        self.bank.push_verified(&feats)?;
        self.draft_cache.truncate(self.committed_draft_len());

        let mut tokens: Vec<usize> = path.iter().map(|&i| tree.nodes[i].token).collect();
        tokens.push(next);
        if self.cfg.stop_at_eos {
            if let Some(e) = tokens.iter().position(|&t| t == EOS) {
                tokens.truncate(e + 1);
            }
        }
        tokens.truncate(self.remaining());
        self.generated.extend(&tokens);
        self.pending = tokens.clone();
        self.update_finished();
        self.records.push(RoundRecord {
            round: self.records.len() + 1,
            drafted: tree.len(),
            accepted: path.len(),
            committed_tokens: tokens.clone(),
            rejection_index,
            mode: self.cfg.mode,
        });
        Ok(tokens)
    }

    /// Samples up to `gamma` tokens from the draft one at a time. Returns the
    /// chain and the draft distribution each token was drawn from.
    pub(crate) fn draft_chain(&mut self, root_logits: Vec<f64>, len: usize) -> Result<(DraftTree, Vec<Vec<f64>>)> {
        let mut tree = DraftTree::new();
        let mut rows = NodeRows::new();
        let mut dists = Vec::with_capacity(len);
        let mut logits = root_logits;
        for i in 0..len {
            let q = token_distribution(&logits, self.cfg.temperature);
            let tok = sample_from(&q, &mut self.rng);
            let cum = tree.nodes.last().map_or(0.0, |n| n.cum_logp) + q[tok].ln();
            let node = tree.push(TreeNode {
                token: tok,
                parent: i.checked_sub(1),
                depth: i + 1,
                draft_prob: q[tok],
                cum_logp: cum,
            });
            dists.push(q);
            if i + 1 < len {
                logits = self.spec_forward(&tree, &[node], &mut rows)?.row(0).to_vec();
            }
        }
        Ok((tree, dists))
    }

    pub(crate) fn chain_round(&mut self) -> Result<Vec<usize>> {
        let len = self.draft_budget(self.cfg.gamma);
        let root = self.catch_up()?;
        let (tree, q) = self.draft_chain(root, len)?;
        let out = self.verify(&tree)?;
        let t = self.cfg.temperature;
        let mut accepted = 0;
        let mut rejection = None;
        let mut next = None;
        for (i, q_i) in q.iter().enumerate() {
            let p = token_distribution(out.logits.row(i), t);
            let d = tree.nodes[i].token;
            if self.rng.gen::<f64>() < accept_probability(p[d], q_i[d])? {
                accepted += 1;
            } else {
                rejection = Some(i);
                next = Some(sample_from(&residual_distribution(&p, q_i), &mut self.rng));
                break;
            }
        }
        let next = match next {
            Some(n) => n,
            None => sample_from(&token_distribution(out.logits.row(len), t), &mut self.rng),
        };
        let path: Vec<usize> = (0..accepted).collect();
        self.commit(&tree, &out, &path, next, rejection)
    }

    /// Level-by-level expansion: every frontier node proposes its top-k
    /// tokens and the k best candidates by cumulative log-probability survive.
    pub(crate) fn build_tree(&mut self, root_logits: Vec<f64>, depth: usize) -> Result<DraftTree> {
        let k = self.cfg.k;
        let budget = self.cfg.max_draft_tokens;
        // Ranking needs graded scores even for greedy decoding.
        let rank_t = if self.cfg.temperature > 0.0 { self.cfg.temperature } else { 1.0 };
        let mut tree = DraftTree::new();
        let mut rows = NodeRows::new();
        let mut frontier: Vec<(Option<usize>, Vec<f64>)> = vec![(None, root_logits)];
        for level in 1..=depth {
            let mut cands: Vec<(f64, Option<usize>, usize, f64)> = Vec::new();
            for (parent, logits) in &frontier {
                let dist = token_distribution(logits, rank_t);
                let mut order: Vec<usize> = (0..dist.len()).collect();
                order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
                order.truncate(k);
                let mass: f64 = order.iter().map(|&t| dist[t]).sum();
                let sib: Vec<(usize, f64)> = order.iter().map(|&t| (t, dist[t] / mass)).collect();
                let base = parent.map_or(0.0, |p| tree.nodes[p].cum_logp);
                for &(t, sp) in &sib {
                    cands.push((base + dist[t].ln(), *parent, t, sp));
                }
                tree.siblings[DraftTree::slot(*parent)] = sib;
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let take = k.min(budget - tree.len());
            let new: Vec<usize> = cands
                .into_iter()
                .take(take)
                .map(|(cum, parent, token, sp)| {
                    tree.push(TreeNode {
                        token,
                        parent,
                        depth: level,
                        draft_prob: sp,
                        cum_logp: cum,
                    })
                })
                .collect();
            if new.is_empty() || level == depth || tree.len() >= budget {
                break;
            }
            let logits = self.spec_forward(&tree, &new, &mut rows)?;
            frontier = new.iter().enumerate().map(|(r, &i)| (Some(i), logits.row(r).to_vec())).collect();
        }
        Ok(tree)
    }

    pub(crate) fn tree_round(&mut self) -> Result<Vec<usize>> {
        let depth = self.draft_budget(self.cfg.depth);
        let root = self.catch_up()?;
        let tree = if depth == 0 { DraftTree::new() } else { self.build_tree(root, depth)? };
        let out = self.verify(&tree)?;
        let (path, next, rejection) = self.walk_tree(&tree, &out)?;
        self.commit(&tree, &out, &path, next, rejection)
    }

    /// Multi-candidate rejection sampling down the tree. At each node the
    /// children are tried in an order drawn from their renormalised sibling
    /// distribution; after a rejection the target distribution becomes the
    /// residual and the rejected child leaves the candidate set.
    fn walk_tree(&mut self, tree: &DraftTree, out: &TargetOutput) -> Result<(Vec<usize>, usize, Option<usize>)> {
        let t = self.cfg.temperature;
        let mut path = Vec::new();
        let mut cur: Option<usize> = None;
        'descend: loop {
            let row = cur.map_or(0, |c| c + 1);
            let mut p = token_distribution(out.logits.row(row), t);
            let mut cands: Vec<usize> = tree.children(cur);
            let had_children = !cands.is_empty();
            while !cands.is_empty() {
                let total: f64 = cands.iter().map(|&c| tree.nodes[c].draft_prob).sum();
                let weights: Vec<f64> = cands.iter().map(|&c| tree.nodes[c].draft_prob / total).collect();
                let pick = sample_from(&weights, &mut self.rng);
                let child = cands[pick];
                let tok = tree.nodes[child].token;
                if self.rng.gen::<f64>() < accept_probability(p[tok], weights[pick])? {
                    path.push(child);
                    cur = Some(child);
                    continue 'descend;
                }
                let mut q_hat = vec![0.0; p.len()];
                for (&c, &w) in cands.iter().zip(&weights) {
                    q_hat[tree.nodes[c].token] = w;
                }
                p = residual_distribution(&p, &q_hat);
                cands.remove(pick);
            }
            let next = sample_from(&p, &mut self.rng);
            return Ok((path.clone(), next, had_children.then_some(path.len())));
        }
    }

    /// Applies a fixed outcome (used by the exhaustive enumeration).
    pub(crate) fn commit_outcome(&mut self, tree: &DraftTree, out: &TargetOutput, accepted: usize, next: usize) -> Result<()> {
        let path: Vec<usize> = (0..accepted).collect();
        let rejection = (accepted < tree.len()).then_some(accepted);
        self.commit(tree, out, &path, next, rejection)?;
        Ok(())
    }
}
