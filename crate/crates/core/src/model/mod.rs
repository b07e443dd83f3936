//! Toy multimodal target transformer and the cross-attention draft model.
//!
//! Both models run on a [`Graph`](crate::tensor::Graph). Inference callers use
//! the eager wrappers (`forward`, `forward_masked`), which return owned tensors
//! plus the key/value rows to append to a [`KVCache`]. Training code calls the
//! `*_graph` variants directly so gradients flow back to the draft parameters.

mod cache;
mod config;
mod draft;
mod layers;
mod target;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

pub use cache::KVCache;
pub use config::{ModelConfig, RESPONSE_BUDGET};
pub use draft::{DraftArch, DraftModel, DraftOutput, DraftPass};
pub use layers::cross_attention_fuse;
pub use target::{argmax, TargetModel, TargetOutput, TargetPass};

use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence needs {need} positions but max_seq_len is {max}")]
    Overflow { need: usize, max: usize },
    #[error("cache or bank out of sync: {0}")]
    CacheDesync(String),
    #[error("forward called with no tokens")]
    EmptyInput,
    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attention probabilities of one layer for a block of query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    /// `[heads][rows][cols]`, row-major.
    pub probs: Vec<f64>,
}

impl AttnMap {
    pub fn get(&self, head: usize, i: usize, j: usize) -> f64 {
        self.probs[(head * self.rows + i) * self.cols + j]
    }

    pub fn head(&self, head: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.probs[head * n..(head + 1) * n]
    }

    /// The first `rows` query rows of every head.
    pub fn top_rows(&self, rows: usize) -> AttnMap {
        let rows = rows.min(self.rows);
        let probs = (0..self.heads)
            .flat_map(|h| self.head(h)[..rows * self.cols].iter().copied())
            .collect();
        AttnMap {
            heads: self.heads,
            rows,
            cols: self.cols,
            probs,
        }
    }
}

/// Hidden states after the embedding (`hidden[0]`) and after every block
/// (`hidden[l + 1]` for block `l`), plus each block's self-attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub hidden: Vec<Tensor>,
    pub attn: Vec<AttnMap>,
}

impl LayerTrace {
    pub fn num_layers(&self) -> usize {
        self.attn.len()
    }

    /// Output of the last block, before the final norm.
    pub fn last_hidden(&self) -> &Tensor {
        self.hidden.last().expect("trace has an embedding row")
    }
}

/// Target and draft with the same configuration and deterministic seeding.
pub fn init_models(config: &ModelConfig, arch: DraftArch) -> Result<(TargetModel, DraftModel)> {
    let target = TargetModel::new(config.clone())?;
    let draft = DraftModel::new(config.clone(), arch)?;
    Ok((target, draft))
}

pub(crate) fn store_to_checkpoint(headers: &[(&str, String)], store: &ParamStore) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for (name, text) in headers {
        ckpt.push_text(*name, text);
    }
    for (name, p) in store.iter() {
        ckpt.push(name, p.value.clone());
    }
    ckpt
}

/// Copies every parameter of `store` from `ckpt`, checking names and shapes.
pub(crate) fn load_into_store(ckpt: &Checkpoint, store: &mut ParamStore, headers: &[&str]) -> Result<()> {
    let expected = store.len() + headers.len();
    if ckpt.entries.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "{} entries, expected {expected}",
            ckpt.entries.len()
        )));
    }
    for (name, p) in store.iter_mut() {
        let t = ckpt
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(ModelError::Checkpoint(format!(
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        p.grad = None;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let f = File::create(path).map_err(io)?;
    write_checkpoint(BufWriter::new(f), ckpt)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(read_checkpoint(BufReader::new(f))?)
}
