use std::collections::BTreeMap;

use super::{Gradients, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named parameters, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Param(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub(crate) fn entry(&self, name: &str) -> Option<(&str, &Param)> {
        self.entries.get_key_value(name).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds a backward pass's gradients into the stored grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec())?),
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.entries.values_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    u: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam update over every trainable parameter.
/// Gradients are cleared afterwards.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(TensorError::MissingGrad(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = p.grad.take().expect("checked above");
        let n = g.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let u = state.u.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), ui) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(u.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *ui = cfg.beta2 * *ui + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let uhat = *ui / bc2;
            *w -= cfg.lr * (mhat / (uhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<f64>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, v, g) in values {
            s.insert(*name, Tensor::new(vec![v.len()], v.clone()).unwrap(), true).unwrap();
            s.get_mut(name).unwrap().grad = Some(Tensor::new(vec![g.len()], g.clone()).unwrap());
        }
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = store_with(&[("w", vec![1.0, -2.0], vec![0.0, 0.0])]);
        let mut st = AdamState::new();
        adamw_step(&mut s, &mut st, &AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0, -2.0]);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, û = g², so Δ = -lr·g/(|g|+ε) ≈ -lr.
        let mut s = store_with(&[("w", vec![0.0], vec![1.0])]);
        let mut st = AdamState::new();
        adamw_step(&mut s, &mut st, &AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let w = s.value("w").unwrap().data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut s = store_with(&[("a", vec![0.3, 0.1], vec![0.5, -0.2]), ("b", vec![0.3, 0.1], vec![0.5, -0.2])]);
        let mut st = AdamState::new();
        adamw_step(&mut s, &mut st, &AdamConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() }).unwrap();
        assert_eq!(s.value("a").unwrap(), s.value("b").unwrap());
    }

    #[test]
    fn missing_grad_is_a_state_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), true).unwrap();
        let err = adamw_step(&mut s, &mut AdamState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(_)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), true).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut s = store_with(&[("w", vec![0.0, 0.0], vec![0.3, 0.0])]);
        let n = clip_global_norm(&mut s, 0.5);
        assert!((n - 0.3).abs() < 1e-15);
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap().data(), &[0.3, 0.0]);
    }

    #[test]
    fn clip_scales_three_four_five() {
        let mut s = store_with(&[("w", vec![0.0, 0.0], vec![3.0, 4.0])]);
        let n = clip_global_norm(&mut s, 0.5);
        assert_eq!(n, 5.0);
        let g = s.get("w").unwrap().grad.as_ref().unwrap().data().to_vec();
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn clipped_norm_never_exceeds_max() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let g1: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let g2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut s = store_with(&[("a", vec![0.0; 5], g1), ("b", vec![0.0; 3], g2)]);
            clip_global_norm(&mut s, 0.5);
            let after = clip_global_norm(&mut s, f64::INFINITY);
            assert!(after <= 0.5 + 1e-9);
        }
    }
}
