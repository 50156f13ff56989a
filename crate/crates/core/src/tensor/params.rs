use super::{Scalar, Tape, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    tensor: Tensor<F>,
    frozen: bool,
}

/// Named, ordered parameter collection. Registration order is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            tensor: tensor.with_grad(),
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a parameter drawn from N(0, std²).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = F::from_f64(rng.normal() * std);
        }
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::filled(shape, F::one()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.entries[id.0].tensor.grad.as_deref()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Adds the parameter gradients recorded on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape<F>) {
        for (id, g) in tape.param_grads() {
            let t = &mut self.entries[id.0].tensor;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }
}
