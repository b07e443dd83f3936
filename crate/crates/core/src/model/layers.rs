// Parameter layout and forward pieces shared by target and draft models.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::task::PROMPT_LEN;
use crate::tensor::{AttnMask, Graph, ParamStore, Result, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Row and column of a visual cell at sequence position `p`; positions outside
/// the grid map to the spare slot `(grid_h, grid_w)`.
pub(crate) fn grid_coords(config: &ModelConfig, p: usize) -> (usize, usize) {
    match p.checked_sub(PROMPT_LEN) {
        Some(i) if i < config.visual_tokens() => (i / config.grid_w, i % config.grid_w),
        _ => (config.grid_h, config.grid_w),
    }
}

/// Sequence-position table plus row and column tables for the image grid.
pub(crate) fn init_positions(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let d = config.d_model;
    store.insert("pos", gaussian(rng, &[config.max_seq_len, d], INIT_STD), true)?;
    store.insert("pos_row", gaussian(rng, &[config.grid_h + 1, d], INIT_STD), true)?;
    store.insert("pos_col", gaussian(rng, &[config.grid_w + 1, d], INIT_STD), true)
}

/// Token embeddings plus the position terms from [`init_positions`].
pub(crate) fn embed_with_positions<'a>(
    g: &Graph<'a>,
    store: &'a ParamStore,
    config: &ModelConfig,
    emb: Var,
    positions: &[usize],
) -> Result<Var> {
    let (rows, cols): (Vec<usize>, Vec<usize>) = positions.iter().map(|&p| grid_coords(config, p)).unzip();
    let x = g.add(emb, g.embedding(g.param(store, "pos")?, positions)?)?;
    let x = g.add(x, g.embedding(g.param(store, "pos_row")?, &rows)?)?;
    g.add(x, g.embedding(g.param(store, "pos_col")?, &cols)?)
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("rank-1")
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) -> Result<()> {
    store.insert(format!("{prefix}.g"), ones(d), trainable)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), trainable)
}

/// Pre-norm decoder block: causal self-attention then a GELU feed-forward of width `4·d`.
pub(crate) fn init_decoder_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    out_std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    init_norm(store, &format!("{prefix}.ln1"), d, true)?;
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.attn.{w}"), gaussian(rng, &[d, d], INIT_STD), true)?;
    }
    store.insert(format!("{prefix}.attn.wo"), gaussian(rng, &[d, d], out_std), true)?;
    init_norm(store, &format!("{prefix}.ln2"), d, true)?;
    store.insert(format!("{prefix}.ffn.w1"), gaussian(rng, &[d, 4 * d], INIT_STD), true)?;
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[4 * d]), true)?;
    store.insert(format!("{prefix}.ffn.w2"), gaussian(rng, &[4 * d, d], out_std), true)?;
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]), true)
}

pub(crate) fn init_cross_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    out_std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    init_norm(store, &format!("{prefix}.ln"), d, true)?;
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{w}"), gaussian(rng, &[d, d], INIT_STD), true)?;
    }
    store.insert(format!("{prefix}.wo"), gaussian(rng, &[d, d], out_std), true)
}

pub(crate) fn norm<'a>(g: &Graph<'a>, store: &'a ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.g"))?;
    let bias = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) fn frozen_norm<'a>(g: &Graph<'a>, store: &'a ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.frozen_param(store, &format!("{prefix}.g"))?;
    let bias = g.frozen_param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) fn linear<'a>(g: &Graph<'a>, store: &'a ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, name)?;
    g.matmul(x, w)
}

pub(crate) struct BlockOutput {
    pub out: Var,
    pub keys: Var,
    pub values: Var,
    pub attn: Var,
}

/// Cached keys and values of earlier positions, `rows × d` each.
#[derive(Clone, Copy)]
pub(crate) struct Past<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub rows: usize,
}

pub(crate) fn decoder_block<'a>(
    g: &Graph<'a>,
    store: &'a ParamStore,
    prefix: &str,
    x: Var,
    past: Option<Past<'a>>,
    mask: Rc<AttnMask>,
    heads: usize,
) -> Result<BlockOutput> {
    let d = g.shape(x)[1];
    let h = norm(g, store, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, store, &format!("{prefix}.attn.wq"), h)?;
    let k_new = linear(g, store, &format!("{prefix}.attn.wk"), h)?;
    let v_new = linear(g, store, &format!("{prefix}.attn.wv"), h)?;
    let (k, v) = match past {
        Some(p) if p.rows > 0 => {
            let kc = g.constant_slice(p.keys, vec![p.rows, d])?;
            let vc = g.constant_slice(p.values, vec![p.rows, d])?;
            (g.concat_rows(kc, k_new)?, g.concat_rows(vc, v_new)?)
        }
        _ => (k_new, v_new),
    };
    let attn = g.attention(q, k, v, heads, mask)?;
    let proj = linear(g, store, &format!("{prefix}.attn.wo"), attn)?;
    let x = g.add(x, proj)?;

    let h = norm(g, store, &format!("{prefix}.ln2"), x)?;
    let up = linear(g, store, &format!("{prefix}.ffn.w1"), h)?;
    let up = g.add_bias(up, g.param(store, &format!("{prefix}.ffn.b1"))?)?;
    let act = g.gelu(up);
    let down = linear(g, store, &format!("{prefix}.ffn.w2"), act)?;
    let down = g.add_bias(down, g.param(store, &format!("{prefix}.ffn.b2"))?)?;
    let out = g.add(x, down)?;
    Ok(BlockOutput {
        out,
        keys: k_new,
        values: v_new,
        attn,
    })
}

/// `softmax(Q Kᵀ/√z) V` per head with queries from `query_src` and keys and
/// values projected from `bank` rows, heads concatenated then projected by `wo`.
/// Returns the projected fusion and the attention node.
pub fn cross_attention_fuse<'a>(
    g: &Graph<'a>,
    store: &'a ParamStore,
    prefix: &str,
    query_src: Var,
    bank: Var,
    mask: Rc<AttnMask>,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = linear(g, store, &format!("{prefix}.wq"), query_src)?;
    let k = linear(g, store, &format!("{prefix}.wk"), bank)?;
    let v = linear(g, store, &format!("{prefix}.wv"), bank)?;
    let attn = g.attention(q, k, v, heads, mask)?;
    let fused = linear(g, store, &format!("{prefix}.wo"), attn)?;
    Ok((fused, attn))
}

/// Pre-norm residual cross-attention block: `x + fuse(LN(x), bank)`.
pub(crate) fn cross_block<'a>(
    g: &Graph<'a>,
    store: &'a ParamStore,
    prefix: &str,
    x: Var,
    bank: Var,
    mask: Rc<AttnMask>,
    heads: usize,
) -> Result<(Var, Var)> {
    let h = norm(g, store, &format!("{prefix}.ln"), x)?;
    let (fused, attn) = cross_attention_fuse(g, store, prefix, h, bank, mask, heads)?;
    Ok((g.add(x, fused)?, attn))
}
