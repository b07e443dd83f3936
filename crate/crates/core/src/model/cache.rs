use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
struct LayerKv {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Per-layer key/value rows for a committed prefix. All heads of a row are
/// stored together as one `d_model`-wide vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    d_model: usize,
    max_len: usize,
    len: usize,
    layers: Vec<LayerKv>,
}

impl KVCache {
    pub fn new(layers: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            d_model,
            max_len,
            len: 0,
            layers: (0..layers)
                .map(|_| LayerKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.layers[layer].values
    }

    /// Appends `n` rows to every layer. `rows[l]` holds that layer's keys and values.
    pub fn append(&mut self, rows: Vec<(Vec<f64>, Vec<f64>)>) -> Result<(), ModelError> {
        let n = rows.first().map_or(0, |(k, _)| k.len() / self.d_model);
        self.append_rows(n, rows)
    }

    /// Like [`append`](Self::append) with the row count stated, so a cache
    /// without layers still tracks its logical length.
    pub fn append_rows(&mut self, n: usize, rows: Vec<(Vec<f64>, Vec<f64>)>) -> Result<(), ModelError> {
        if rows.len() != self.layers.len() {
            return Err(ModelError::CacheDesync(format!(
                "{} layer updates for {} layers",
                rows.len(),
                self.layers.len()
            )));
        }
        if rows.iter().any(|(k, v)| k.len() != n * self.d_model || v.len() != n * self.d_model) {
            return Err(ModelError::CacheDesync("ragged cache update".into()));
        }
        if self.len + n > self.max_len {
            return Err(ModelError::Overflow {
                need: self.len + n,
                max: self.max_len,
            });
        }
        for (layer, (k, v)) in self.layers.iter_mut().zip(rows) {
            layer.keys.extend_from_slice(&k);
            layer.values.extend_from_slice(&v);
        }
        self.len += n;
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let w = len * self.d_model;
        for layer in &mut self.layers {
            layer.keys.truncate(w);
            layer.values.truncate(w);
        }
        self.len = len;
    }

    /// Keeps rows `0..prefix` plus the listed rows (each `>= prefix`, ascending),
    /// compacting them so they follow the prefix.
    pub fn retain(&mut self, prefix: usize, extra: &[usize]) -> Result<(), ModelError> {
        if extra.windows(2).any(|w| w[0] >= w[1]) || extra.iter().any(|&r| r < prefix || r >= self.len) {
            return Err(ModelError::CacheDesync(format!("bad retain rows {extra:?} after {prefix}")));
        }
        let d = self.d_model;
        for layer in &mut self.layers {
            for (slot, &row) in extra.iter().enumerate() {
                let dst = (prefix + slot) * d;
                layer.keys.copy_within(row * d..(row + 1) * d, dst);
                layer.values.copy_within(row * d..(row + 1) * d, dst);
            }
        }
        let keep = prefix + extra.len();
        for layer in &mut self.layers {
            layer.keys.truncate(keep * d);
            layer.values.truncate(keep * d);
        }
        self.len = keep;
        Ok(())
    }
}
