//! Parameter storage, initializers and the AdamW optimizer.
//!
//! Every model in this crate owns a [`ParamStore`]: a flat, insertion-ordered
//! set of named tensors. Checkpoints serialize stores; optimizers update
//! them; graphs reference them by [`ParamId`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self { name: name.into(), value, trainable }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, param: Param) -> ParamId {
        assert!(
            !self.by_name.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn remove(&mut self, name: &str) -> bool {
        // Params are kept as tombstones to preserve ids; removed entries are
        // skipped by iteration.
        if let Some(&idx) = self.by_name.get(name) {
            self.by_name.remove(name);
            self.params[idx].trainable = false;
            self.params[idx].name.clear();
            self.params[idx].value = Tensor::zeros(&[0]);
            true
        } else {
            false
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "shape change on set_value");
        self.params[id.0].value = value;
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.iter_mut() {
            if !p.name.is_empty() {
                p.trainable = trainable;
            }
        }
    }

    /// Ids of live parameters in registration order.
    pub fn ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.name.is_empty())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.name.is_empty())
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_scalars(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Creates a graph leaf for a parameter.
    pub fn node(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.param(id, self.value(id).clone())
    }

    /// Copies values from `other` for every name that exists in both stores.
    /// Errors if `strict` and a name of `self` is missing from `other`.
    pub fn load_values(&mut self, other: &ParamStore, strict: bool) -> Result<()> {
        let ids = self.ids();
        for id in ids {
            let name = self.name(id).to_string();
            match other.id(&name) {
                Some(src) => {
                    let v = other.value(src).clone();
                    if v.shape() != self.value(id).shape() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name}: shape {:?} does not match expected {:?}",
                            v.shape(),
                            self.value(id).shape()
                        )));
                    }
                    self.set_value(id, v);
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("parameter {name} missing")));
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Xavier-uniform initialization: U(±√(6/(fan_in+fan_out))).
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

/// A plain affine layer: y = x·w + b with w of shape [d_in, d_out].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register(Param::new(
            format!("{name}.w"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
            true,
        ));
        let b = store.register(Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]), true));
        Self { w, b }
    }

    pub fn init_zero(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store
            .register(Param::new(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]), true));
        let b = store.register(Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]), true));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.node(g, self.w);
        let b = store.node(g, self.b);
        let mm = g.matmul(x, w);
        g.add_bias(mm, b)
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter id and
/// created lazily; update order follows ascending id, so steps are
/// deterministic.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step. Applies global-norm gradient clipping at
    /// `grad_clip` (if finite), then AdamW updates at learning rate `lr` to
    /// every trainable parameter that has a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &crate::graph::Grads,
        lr: f64,
        grad_clip: f64,
    ) {
        self.step += 1;
        let mut updates: Vec<(ParamId, &Tensor)> =
            grads.iter().filter(|(id, _)| store.trainable(*id)).collect();
        updates.sort_by_key(|(id, _)| id.0);

        let mut clip_scale = 1.0;
        if grad_clip.is_finite() && grad_clip > 0.0 {
            let total_sq: f64 = updates.iter().map(|(_, g)| g.sq_norm()).sum();
            let norm = total_sq.sqrt();
            if norm > grad_clip {
                clip_scale = grad_clip / norm;
            }
        }

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in updates {
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let w = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad.data()[i] * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_at(base_lr: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_roundtrip_and_census() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.register(Param::new("a", Tensor::randn(&[2, 3], &mut rng), true));
        let b = store.register(Param::new("b", Tensor::randn(&[4], &mut rng), false));
        assert_eq!(store.total_scalars(), 10);
        assert_eq!(store.trainable_scalars(), 6);
        assert_eq!(store.id("a"), Some(a));
        assert_eq!(store.id("b"), Some(b));
        store.set_trainable(b, true);
        assert_eq!(store.trainable_scalars(), 10);
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        // minimize mean((w − 3)²) — AdamW should march w toward 3.
        let mut store = ParamStore::new();
        let w = store.register(Param::new("w", Tensor::zeros(&[4]), true));
        let target = Tensor::filled(&[4], 3.0);
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        let mut first_loss = None;
        let mut last_loss = 0.0;
        for _ in 0..300 {
            let mut g = Graph::new();
            let wn = store.node(&mut g, w);
            let t = g.input(target.clone());
            let loss = g.mse(wn, t);
            last_loss = g.value(loss).data()[0];
            first_loss.get_or_insert(last_loss);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, 0.05, 1.0);
        }
        assert!(last_loss < first_loss.unwrap() * 1e-3, "loss {last_loss}");
    }

    #[test]
    fn frozen_params_never_move() {
        let mut store = ParamStore::new();
        let w = store.register(Param::new("w", Tensor::filled(&[2], 1.0), true));
        let frozen = store.register(Param::new("frozen", Tensor::filled(&[2], 5.0), false));
        let before = store.value(frozen).clone();
        let mut opt = AdamW::new(0.9, 0.95, 0.01);
        for _ in 0..10 {
            let mut g = Graph::new();
            let wn = store.node(&mut g, w);
            let fz = store.node(&mut g, frozen);
            let s = g.add(wn, fz);
            let sq = g.mul(s, s);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            assert!(grads.get(frozen).is_some(), "grad is computed but must not be applied");
            opt.step(&mut store, &grads, 0.1, 1.0);
        }
        assert_eq!(store.value(frozen).data(), before.data(), "frozen param moved");
    }

    #[test]
    fn warmup_schedule_shape() {
        assert_eq!(lr_at(1.0, 4, 0), 0.25);
        assert_eq!(lr_at(1.0, 4, 3), 1.0);
        assert_eq!(lr_at(1.0, 4, 100), 1.0);
        assert_eq!(lr_at(1.0, 0, 0), 1.0);
    }
}
