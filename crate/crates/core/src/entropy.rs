//! Average attention entropy per layer and the distillation-layer choice it drives.
//!
//! Layer indices here are 0-based block indices: layer `l` is the block whose
//! output is `trace.hidden[l + 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{AttnMap, KVCache, LayerTrace, ModelError, TargetModel};

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("attention row {row} of head {head} sums to {sum}, not 1")]
    NonStochastic { head: usize, row: usize, sum: f64 },
    #[error("trace has no attention layers")]
    EmptyTrace,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("calibration cache {path}: {detail}")]
    Cache { path: String, detail: String },
}

/// `-(1/n) Σ_i Σ_j A[i,j] ln A[i,j]`, averaged over heads, with `0 ln 0 = 0`.
pub fn attention_entropy(a: &AttnMap) -> Result<f64, EntropyError> {
    if a.rows == 0 || a.heads == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for h in 0..a.heads {
        let head = a.head(h);
        for i in 0..a.rows {
            let row = &head[i * a.cols..(i + 1) * a.cols];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(EntropyError::NonStochastic { head: h, row: i, sum });
            }
            total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        }
    }
    Ok(total / a.rows as f64 / a.heads as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub sample_id: String,
    /// Entropy per block, in nats.
    pub per_layer: Vec<f64>,
    /// Block with the lowest entropy; the first one on ties.
    pub best_layer: usize,
    pub tokens: usize,
}

pub fn select_layer(trace: &LayerTrace, sample_id: &str) -> Result<EntropyProfile, EntropyError> {
    if trace.attn.is_empty() {
        return Err(EntropyError::EmptyTrace);
    }
    let per_layer = trace.attn.iter().map(attention_entropy).collect::<Result<Vec<_>, _>>()?;
    let best_layer = argmin(&per_layer);
    Ok(EntropyProfile {
        sample_id: sample_id.to_string(),
        per_layer,
        best_layer,
        tokens: trace.attn[0].rows,
    })
}

/// Per-position variant: for each query row, the block whose head-averaged
/// row entropy is lowest.
pub fn select_layer_per_position(trace: &LayerTrace) -> Result<Vec<usize>, EntropyError> {
    let first = trace.attn.first().ok_or(EntropyError::EmptyTrace)?;
    let rows = first.rows;
    let mut choice = Vec::with_capacity(rows);
    for i in 0..rows {
        let per_layer: Vec<f64> = trace
            .attn
            .iter()
            .map(|a| {
                let one_row = AttnMap {
                    heads: a.heads,
                    rows: 1,
                    cols: a.cols,
                    probs: (0..a.heads)
                        .flat_map(|h| a.head(h)[i * a.cols..(i + 1) * a.cols].iter().copied())
                        .collect(),
                };
                attention_entropy(&one_row)
            })
            .collect::<Result<_, _>>()?;
        choice.push(argmin(&per_layer));
    }
    Ok(choice)
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Cached per-sample layer choices, keyed by sample id.
pub type CalibrationMap = BTreeMap<String, usize>;

/// One traced target forward per `(id, tokens)` item, unless `cache_path`
/// already holds an entry for every id, in which case the file is returned.
pub fn calibrate(
    items: &[(String, Vec<usize>)],
    target: &TargetModel,
    cache_path: Option<&Path>,
) -> Result<CalibrationMap, EntropyError> {
    if let Some(path) = cache_path.filter(|p| p.exists()) {
        let cached = read_calibration(path)?;
        if items.iter().all(|(id, _)| cached.contains_key(id)) {
            return Ok(items.iter().map(|(id, _)| (id.clone(), cached[id])).collect());
        }
    }
    let mut map = CalibrationMap::new();
    for (id, tokens) in items {
        let mut cache = KVCache::new(target.num_layers(), target.config().d_model, target.config().max_seq_len);
        let out = target.forward(tokens, &mut cache, true)?;
        let trace = out.trace.expect("trace requested");
        map.insert(id.clone(), select_layer(&trace, id)?.best_layer);
    }
    if let Some(path) = cache_path {
        write_calibration(path, &map)?;
    }
    Ok(map)
}

pub fn write_calibration(path: &Path, map: &CalibrationMap) -> Result<(), EntropyError> {
    let err = |e: std::io::Error| EntropyError::Cache {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    let mut f = fs::File::create(path).map_err(err)?;
    for (id, layer) in map {
        writeln!(f, "{id}\t{layer}").map_err(err)?;
    }
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationMap, EntropyError> {
    let bad = |detail: String| EntropyError::Cache {
        path: path.display().to_string(),
        detail,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut map = CalibrationMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, layer) = line.split_once('\t').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        let layer = layer.trim().parse().map_err(|e| bad(format!("{line:?}: {e}")))?;
        map.insert(id.to_string(), layer);
    }
    Ok(map)
}
