use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, cross_block, decoder_block, Past, INIT_STD};
use super::target::check_inputs;
use super::{KVCache, ModelConfig, ModelError, Result, TargetModel};
use crate::tensor::{AttnMask, Checkpoint, Graph, ParamStore, Tensor, Var};

/// Which draft stages are present. The default is one initial decoder block,
/// one cross-attention block and one final decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftArch {
    pub initial_block: bool,
    pub cross_blocks: usize,
    pub final_block: bool,
}

impl Default for DraftArch {
    fn default() -> Self {
        Self {
            initial_block: true,
            cross_blocks: 1,
            final_block: true,
        }
    }
}

impl DraftArch {
    pub fn validate(&self) -> Result<()> {
        if self.cross_blocks > 2 {
            return Err(ModelError::Config(format!("cross_blocks must be 0..=2, got {}", self.cross_blocks)));
        }
        Ok(())
    }

    /// Number of self-attention blocks, i.e. KV-cache layers.
    pub fn self_attn_layers(&self) -> usize {
        usize::from(self.initial_block) + usize::from(self.final_block)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "initial_block={}", self.initial_block);
        let _ = writeln!(s, "cross_blocks={}", self.cross_blocks);
        let _ = writeln!(s, "final_block={}", self.final_block);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut arch = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed arch line {line:?}")))?;
            let bad = |e: &dyn std::fmt::Display| ModelError::Config(format!("{k}: {e}"));
            match k.trim() {
                "initial_block" => arch.initial_block = v.trim().parse().map_err(|e| bad(&e))?,
                "cross_blocks" => arch.cross_blocks = v.trim().parse().map_err(|e| bad(&e))?,
                "final_block" => arch.final_block = v.trim().parse().map_err(|e| bad(&e))?,
                other => return Err(ModelError::Config(format!("unknown arch key {other}"))),
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    fn cross_prefix(i: usize) -> &'static str {
        ["cross", "cross2"][i]
    }
}

/// Draft that re-embeds tokens with the target's frozen table, fuses the
/// verified target features through cross-attention and predicts with the
/// target's frozen final norm and head.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftModel {
    config: ModelConfig,
    arch: DraftArch,
    params: ParamStore,
}

pub struct DraftPass {
    pub logits: Var,
    /// Query source for the fusion: output of the initial block (or the embedding without one).
    pub e1: Var,
    /// Output of the last draft stage, before the shared final norm.
    pub em: Var,
    pub kv: Vec<(Var, Var)>,
    /// Attention nodes of the cross-attention blocks.
    pub cross_attn: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DraftOutput {
    pub logits: Tensor,
    pub e1: Tensor,
    pub em: Tensor,
    pub new_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DraftModel {
    pub fn new(config: ModelConfig, arch: DraftArch) -> Result<Self> {
        config.validate_structure()?;
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let d = config.d_model;
        let stages = (arch.self_attn_layers() + arch.cross_blocks).max(1);
        let out_std = INIT_STD / (2.0 * stages as f64).sqrt();
        let mut params = ParamStore::new();
        layers::init_positions(&mut params, &config, &mut rng)?;
        if arch.initial_block {
            layers::init_decoder_block(&mut params, "initial", d, out_std, &mut rng)?;
        }
        for i in 0..arch.cross_blocks {
            layers::init_cross_block(&mut params, DraftArch::cross_prefix(i), d, out_std, &mut rng)?;
        }
        if arch.final_block {
            layers::init_decoder_block(&mut params, "final", d, out_std, &mut rng)?;
        }
        Ok(Self { config, arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> DraftArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(self.arch.self_attn_layers(), self.config.d_model, self.config.max_seq_len)
    }

    /// Records a draft forward. `bank` is `[m × d]` of fusion keys/values and
    /// `bank_mask` is `n × m`; `self_mask` is `n × (cache.len() + n)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph<'a>(
        &'a self,
        target: &'a TargetModel,
        g: &Graph<'a>,
        tokens: &[usize],
        positions: &[usize],
        cache: Option<&'a KVCache>,
        self_mask: Rc<AttnMask>,
        bank: Var,
        bank_mask: Rc<AttnMask>,
    ) -> Result<DraftPass> {
        if target.config() != &self.config {
            return Err(ModelError::Config("draft and target configs differ".into()));
        }
        let prior = cache.map_or(0, KVCache::len);
        check_inputs(&self.config, tokens, positions, prior, &self_mask)?;
        let bank_shape = g.shape(bank);
        if bank_shape.len() != 2 || bank_shape[1] != self.config.d_model {
            return Err(ModelError::CacheDesync(format!("bank shape {bank_shape:?}")));
        }
        if bank_mask.rows() != tokens.len() || bank_mask.cols() != bank_shape[0] {
            return Err(ModelError::CacheDesync(format!(
                "bank mask {}x{} for {} queries over {} bank rows",
                bank_mask.rows(),
                bank_mask.cols(),
                tokens.len(),
                bank_shape[0]
            )));
        }
        let heads = self.config.n_heads;
        let past = |layer: usize| {
            cache.map(|c| Past {
                keys: c.keys(layer),
                values: c.values(layer),
                rows: c.len(),
            })
        };
        let emb = g.embedding(g.frozen_param(target.params(), "embed")?, tokens)?;
        let mut x = layers::embed_with_positions(g, &self.params, &self.config, emb, positions)?;
        let mut kv = Vec::with_capacity(2);
        if self.arch.initial_block {
            let out = decoder_block(g, &self.params, "initial", x, past(0), Rc::clone(&self_mask), heads)?;
            kv.push((out.keys, out.values));
            x = out.out;
        }
        let e1 = x;
        let mut cross_attn = Vec::new();
        for i in 0..self.arch.cross_blocks {
            let prefix = DraftArch::cross_prefix(i);
            let (y, a) = cross_block(g, &self.params, prefix, x, bank, Rc::clone(&bank_mask), heads)?;
            x = y;
            cross_attn.push(a);
        }
        if self.arch.final_block {
            let out = decoder_block(g, &self.params, "final", x, past(kv.len()), self_mask, heads)?;
            kv.push((out.keys, out.values));
            x = out.out;
        }
        let em = x;
        let normed = layers::frozen_norm(g, target.params(), "final_ln", em)?;
        let head = g.frozen_param(target.params(), "lm_head")?;
        let logits = g.matmul(normed, head)?;
        Ok(DraftPass {
            logits,
            e1,
            em,
            kv,
            cross_attn,
        })
    }

    /// Eager forward; the cache is left untouched. `bank` holds `bank.len() / d` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        target: &TargetModel,
        tokens: &[usize],
        positions: &[usize],
        cache: &KVCache,
        self_mask: AttnMask,
        bank: &[f64],
        bank_mask: AttnMask,
    ) -> Result<DraftOutput> {
        let d = self.config.d_model;
        if bank.len() % d != 0 {
            return Err(ModelError::CacheDesync(format!("bank of {} values is not whole rows", bank.len())));
        }
        let g = Graph::inference();
        let bank = g.constant_slice(bank, vec![bank.len() / d, d])?;
        let pass = self.forward_graph(
            target,
            &g,
            tokens,
            positions,
            Some(cache),
            Rc::new(self_mask),
            bank,
            Rc::new(bank_mask),
        )?;
        g.check_finite()?;
        Ok(DraftOutput {
            logits: g.value(pass.logits),
            e1: g.value(pass.e1),
            em: g.value(pass.em),
            new_kv: pass.kv.iter().map(|&(k, v)| (g.data(k).to_vec(), g.data(v).to_vec())).collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        super::store_to_checkpoint(
            &[("config", self.config.to_text()), ("arch", self.arch.to_text())],
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_text(&ckpt.text("config")?)?;
        let arch = DraftArch::from_text(&ckpt.text("arch")?)?;
        let mut model = Self::new(config, arch)?;
        super::load_into_store(ckpt, &mut model.params, &["config", "arch"])?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_file(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&super::read_file(path)?)
    }
}
