use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Copy every tensor whose name appears in `other` with the same shape.
    pub fn copy_matching(&mut self, other: &ParamSet, prefix_from: &str, prefix_to: &str) -> usize {
        let mut copied = 0;
        for (_, name, tensor) in other.iter() {
            let Some(rest) = name.strip_prefix(prefix_from) else {
                continue;
            };
            let target = format!("{prefix_to}{rest}");
            if let Some(id) = self.id(&target) {
                if self.get(id).shape() == tensor.shape() {
                    *self.get_mut(id) = tensor.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Take over `loaded`'s values if it has exactly this set's names and shapes.
    pub fn adopt(&mut self, loaded: ParamSet) -> Result<()> {
        contract!(
            self.names == loaded.names,
            "parameter names differ from the expected layout"
        );
        for (a, b) in self.tensors.iter().zip(&loaded.tensors) {
            contract!(a.shape() == b.shape(), "parameter shapes differ from the expected layout");
        }
        self.tensors = loaded.tensors;
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        ParamSet { names, tensors }
    }

    pub(crate) fn parts(&self) -> (&[String], &[Tensor]) {
        (&self.names, &self.tensors)
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add_slice(&mut self, id: ParamId, shape: &[usize], values: &[f64]) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(values) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, values.to_vec())),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_slice(ParamId(i), g.shape(), g.data());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let (_, tensors) = params.parts();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        contract!(
            params.len() == self.m.len(),
            "optimizer built for {} tensors, got {}",
            self.m.len(),
            params.len()
        );
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(ParamId(i)).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
