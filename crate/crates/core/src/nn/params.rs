use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors plus a per-parameter trainable flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// `prefix`; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) -> usize {
        let mut count = 0;
        for (name, flag) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) {
                *flag = on;
                count += 1;
            }
        }
        count
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|f| *f = on);
    }

    /// Number of scalar weights under `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies of every tensor under `prefix`, in registration order.
    pub fn snapshot_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`: preserves activation variance
    /// through rectifier stacks.
    He(usize),
    Uniform(f32),
    Const(f32),
}

impl Init {
    pub fn tensor(self, shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Const(v) => Tensor::full(shape, v),
            Init::Uniform(b) => uniform(shape, b, rng),
            Init::FanIn(fan_in) => uniform(shape, 1.0 / (fan_in.max(1) as f32).sqrt(), rng),
            Init::He(fan_in) => uniform(shape, (6.0 / fan_in.max(1) as f32).sqrt(), rng),
        }
    }
}

fn uniform(shape: [usize; 4], bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound == 0.0 {
                0.0
            } else {
                rng.random_range(-bound..bound)
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Adam with per-parameter step counters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<AdamSlot>>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Applies one update. Gradients of non-trainable parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let value = store.get_mut(*id);
            assert_eq!(value.shape(), grad.shape(), "gradient shape mismatch");
            let slot = self.state[id.0].get_or_insert_with(|| AdamSlot {
                step: 0,
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
            });
            slot.step += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let step_size = (self.lr / bc1) as f32;
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let bc2_sqrt = bc2.sqrt() as f32;
            let eps = self.eps as f32;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(5.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = store.get(id).item();
            opt.step(&mut store, &[(id, Tensor::scalar(2.0 * (w - 1.0)))]);
        }
        assert!((store.get(id).item() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("enh.a", Tensor::scalar(1.0));
        let b = store.add("base.b", Tensor::scalar(1.0));
        assert_eq!(store.set_trainable_prefix("base.", false), 1);
        let mut opt = Adam::new(0.1);
        opt.step(
            &mut store,
            &[(a, Tensor::scalar(1.0)), (b, Tensor::scalar(1.0))],
        );
        assert!(store.get(a).item() < 1.0);
        assert_eq!(store.get(b).item(), 1.0);
    }
}
