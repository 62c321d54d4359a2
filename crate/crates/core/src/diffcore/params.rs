use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Param {
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameter matrices with their Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid(format!("parameter `{name}` already exists")));
        }
        let dim = value.dim();
        self.params.push(Param {
            name,
            value,
            first_moment: Tensor::zeros(dim),
            second_moment: Tensor::zeros(dim),
            step: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros((rows, cols)))
    }

    /// Entries drawn from uniform(-bound, bound).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = Tensor::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    /// Glorot-uniform weight matrix of shape `fan_in × fan_out`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, fan_in, fan_out, bound, rng)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total scalar parameter count.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            tensors: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    values: p.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a store (with fresh optimizer state) from a snapshot.
    pub fn from_snapshot(snap: &StoreSnapshot) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in &snap.tensors {
            let value = Tensor::from_shape_vec((t.shape[0], t.shape[1]), t.values.clone()).map_err(|e| {
                Error::Checkpoint(format!("tensor `{}` does not match its shape: {e}", t.name))
            })?;
            store.add(t.name.clone(), value)?;
        }
        Ok(store)
    }
}

/// Row-major serialized parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub tensors: Vec<NamedTensor>,
}

/// Gradients indexed by [`ParamId`]; `None` means the parameter took no part
/// in the graph.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// One bias-corrected Adam update of every parameter. Parameters without
    /// a gradient are updated as if their gradient were zero.
    pub fn step(&self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (i, p) in store.params.iter_mut().enumerate() {
            if let Some(g) = &grads.grads[i] {
                if g.dim() != p.value.dim() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        detail: format!(
                            "gradient {:?} for parameter `{}` of shape {:?}",
                            g.dim(),
                            p.name,
                            p.value.dim()
                        ),
                    });
                }
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in store.params.iter_mut().enumerate() {
            p.step += 1;
            let c1 = 1.0 - b1.powi(p.step as i32);
            let c2 = 1.0 - b2.powi(p.step as i32);
            let lr = self.lr;
            let eps = self.eps;
            match &grads.grads[i] {
                Some(g) => ndarray::Zip::from(&mut p.value)
                    .and(&mut p.first_moment)
                    .and(&mut p.second_moment)
                    .and(g)
                    .for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }),
                None => ndarray::Zip::from(&mut p.value)
                    .and(&mut p.first_moment)
                    .and(&mut p.second_moment)
                    .for_each(|w, m, v| {
                        *m *= b1;
                        *v *= b2;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add_zeros("w", 2, 2).unwrap();
        assert!(s.add_zeros("w", 1, 1).is_err());
        assert!(matches!(s.id("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.3, -1.2]]).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.set(id, Tensor::zeros((1, 2)));
        Adam::default().step(&mut s, &g).unwrap();
        assert_eq!(s.get(id), &array![[0.3, -1.2]]);
        assert_eq!(s.param(id).step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[2.0]]).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.set(id, array![[1.0]]);
        Adam::default().step(&mut s, &g).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let moved = 2.0 - s.get(id)[[0, 0]];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new();
        a.add_glorot("w", 3, 4, &mut rng).unwrap();
        let mut b = a.clone();
        let mut g = Grads::zeros_like(&a);
        g.set(ParamId(0), Tensor::from_elem((3, 4), 0.7));
        for _ in 0..3 {
            Adam::default().step(&mut a, &g).unwrap();
            Adam::default().step(&mut b, &g).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_wrong_shapes() {
        let mut s = ParamStore::new();
        let id = s.add_zeros("w", 2, 2).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.set(id, Tensor::zeros((1, 2)));
        assert!(matches!(Adam::default().step(&mut s, &g), Err(Error::Shape { .. })));
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add_glorot("a", 3, 5, &mut rng).unwrap();
        s.add_uniform("b", 7, 2, 0.05, &mut rng).unwrap();
        let json = serde_json::to_string(&s.to_snapshot()).unwrap();
        let back: StoreSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(ParamStore::from_snapshot(&back).unwrap(), s);
    }
}
