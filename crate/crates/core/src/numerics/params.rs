use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to one learnable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable arrays in registration order.
///
/// The version counter increases on every mutation through [`ParamStore::update`],
/// which lets a graph assert that all its uses of a parameter saw one value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    version: u64,
}

/// Equal names and values; the version counter is bookkeeping, not content.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access that bumps the version counter.
    pub fn update(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Gradients keyed by parameter; `None` for parameters that were not reached.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads { grads: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], g: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Elementwise sum of two gradient sets over the same store.
    pub fn add(&self, other: &ParamGrads) -> ParamGrads {
        let mut out = self.clone();
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(t) = g {
                out.accumulate(ParamId(i), t.shape(), t.data());
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
}
