use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, decoder_block, gaussian, Past, INIT_STD};
use super::{AttnMap, KVCache, LayerTrace, ModelConfig, ModelError, Result};
use crate::tensor::{AttnMask, Checkpoint, Graph, ParamStore, Tensor, Var};

/// Pre-norm causal decoder with learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    config: ModelConfig,
    params: ParamStore,
}

/// Graph nodes of one target forward.
pub struct TargetPass {
    /// `[n × V]`.
    pub logits: Var,
    /// Embedding output followed by each block's output, `[n × d]` each.
    pub hidden: Vec<Var>,
    /// Each block's attention node (probabilities via `Graph::attention_probs`).
    pub attn: Vec<Var>,
    /// Per-layer key and value rows for the new positions.
    pub kv: Vec<(Var, Var)>,
}

/// Owned result of an eager forward.
#[derive(Debug, Clone)]
pub struct TargetOutput {
    pub logits: Tensor,
    /// Output of the last block (before the final norm) for the new positions.
    pub last_hidden: Tensor,
    pub trace: Option<LayerTrace>,
    /// Per-layer `(keys, values)` for the new positions, ready for [`KVCache::append`].
    pub new_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TargetOutput {
    /// Key/value rows of the selected new positions only.
    pub fn kv_rows(&self, rows: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let d = self.last_hidden.cols();
        let pick = |src: &[f64]| rows.iter().flat_map(|&r| src[r * d..(r + 1) * d].iter().copied()).collect();
        self.new_kv.iter().map(|(k, v)| (pick(k), pick(v))).collect()
    }
}

impl TargetModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate_structure()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let out_std = INIT_STD / (2.0 * config.target_layers as f64).sqrt();
        let mut params = ParamStore::new();
        params.insert("embed", gaussian(&mut rng, &[config.vocab_size, d], INIT_STD), true)?;
        layers::init_positions(&mut params, &config, &mut rng)?;
        for l in 0..config.target_layers {
            layers::init_decoder_block(&mut params, &format!("block{l}"), d, out_std, &mut rng)?;
        }
        layers::init_norm(&mut params, "final_ln", d, true)?;
        params.insert("lm_head", gaussian(&mut rng, &[d, config.vocab_size], INIT_STD), true)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn num_layers(&self) -> usize {
        self.config.target_layers
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.config.target_layers, self.config.d_model, self.config.max_seq_len)
    }

    /// Records a forward over `tokens` at `positions` on `g`. `mask` has one row
    /// per new token and `cache.len() + n` columns (cached keys first).
    pub fn forward_graph<'a>(
        &'a self,
        g: &Graph<'a>,
        tokens: &[usize],
        positions: &[usize],
        cache: Option<&'a KVCache>,
        mask: Rc<AttnMask>,
    ) -> Result<TargetPass> {
        let prior = cache.map_or(0, KVCache::len);
        check_inputs(&self.config, tokens, positions, prior, &mask)?;
        let emb = g.embedding(g.param(&self.params, "embed")?, tokens)?;
        let mut x = layers::embed_with_positions(g, &self.params, &self.config, emb, positions)?;
        let mut hidden = vec![x];
        let mut attn = Vec::with_capacity(self.config.target_layers);
        let mut kv = Vec::with_capacity(self.config.target_layers);
        for l in 0..self.config.target_layers {
            let past = cache.map(|c| Past {
                keys: c.keys(l),
                values: c.values(l),
                rows: c.len(),
            });
            let out = decoder_block(g, &self.params, &format!("block{l}"), x, past, Rc::clone(&mask), self.config.n_heads)?;
            x = out.out;
            hidden.push(x);
            attn.push(out.attn);
            kv.push((out.keys, out.values));
        }
        let normed = layers::norm(g, &self.params, "final_ln", x)?;
        let logits = layers::linear(g, &self.params, "lm_head", normed)?;
        Ok(TargetPass { logits, hidden, attn, kv })
    }

    /// Causal forward of `tokens` appended after the cached prefix; the cache is extended.
    pub fn forward(&self, tokens: &[usize], cache: &mut KVCache, trace: bool) -> Result<TargetOutput> {
        let start = cache.len();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let out = self.forward_masked(tokens, &positions, cache, AttnMask::causal(start, tokens.len()), trace)?;
        cache.append(out.new_kv.clone())?;
        Ok(out)
    }

    /// Forward with explicit positions and mask; the cache is left untouched.
    pub fn forward_masked(
        &self,
        tokens: &[usize],
        positions: &[usize],
        cache: &KVCache,
        mask: AttnMask,
        trace: bool,
    ) -> Result<TargetOutput> {
        let g = Graph::inference();
        let pass = self.forward_graph(&g, tokens, positions, Some(cache), Rc::new(mask))?;
        g.check_finite()?;
        let trace = trace.then(|| collect_trace(&g, &pass.hidden, &pass.attn, self.config.n_heads));
        Ok(TargetOutput {
            logits: g.value(pass.logits),
            last_hidden: g.value(*pass.hidden.last().expect("at least the embedding")),
            trace,
            new_kv: pass.kv.iter().map(|&(k, v)| (g.data(k).to_vec(), g.data(v).to_vec())).collect(),
        })
    }

    /// Greedy continuation of `prefix` with a KV cache. Stops after `max_new`
    /// tokens or, if `stop_at_eos`, once `eos` is produced (and included).
    pub fn greedy(&self, prefix: &[usize], max_new: usize, stop_at_eos: Option<usize>) -> Result<Vec<usize>> {
        let mut cache = self.new_cache();
        let mut out = Vec::with_capacity(max_new);
        let mut logits = self.forward(prefix, &mut cache, false)?.logits;
        while out.len() < max_new {
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            if Some(next) == stop_at_eos || out.len() == max_new {
                break;
            }
            logits = self.forward(&[next], &mut cache, false)?.logits;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        super::store_to_checkpoint(&[("config", self.config.to_text())], &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_text(&ckpt.text("config")?)?;
        let mut model = Self::new(config)?;
        super::load_into_store(ckpt, &mut model.params, &["config"])?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_file(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&super::read_file(path)?)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_inputs(
    config: &ModelConfig,
    tokens: &[usize],
    positions: &[usize],
    prior: usize,
    mask: &AttnMask,
) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if positions.len() != tokens.len() {
        return Err(ModelError::CacheDesync(format!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.len()
        )));
    }
    if let Some(&p) = positions.iter().max() {
        if p >= config.max_seq_len {
            return Err(ModelError::Overflow {
                need: p + 1,
                max: config.max_seq_len,
            });
        }
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::Config(format!("token id {t} outside vocabulary")));
    }
    if mask.rows() != tokens.len() || mask.cols() != prior + tokens.len() {
        return Err(ModelError::CacheDesync(format!(
            "mask {}x{} for {} new tokens after {prior} cached",
            mask.rows(),
            mask.cols(),
            tokens.len()
        )));
    }
    Ok(())
}

pub(crate) fn collect_trace(g: &Graph<'_>, hidden: &[Var], attn: &[Var], heads: usize) -> LayerTrace {
    LayerTrace {
        hidden: hidden.iter().map(|&h| g.value(h)).collect(),
        attn: attn
            .iter()
            .map(|&a| {
                let probs = g.attention_probs(a).expect("attention node");
                let rows = g.shape(a)[0];
                let cols = probs.len() / (heads * rows.max(1));
                AttnMap {
                    heads,
                    rows,
                    cols,
                    probs: probs.as_ref().clone(),
                }
            })
            .collect(),
    }
}
