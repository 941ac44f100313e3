use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Index of a tensor in a [`ParameterRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParameterRegistry<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over every value's bit pattern; changes iff any value does.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Named tensors that never train, such as rotation factors.
#[derive(Clone, Debug, Default)]
pub struct FrozenStore<R> {
    entries: Vec<(String, Tensor<R>)>,
}

impl<R: Real> FrozenStore<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate frozen tensor {name}")));
        }
        self.entries.push((name, tensor.with_requires_grad(false)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tensor of independent `N(0, std²)` draws.
pub fn gaussian<R: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<R>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| R::from_f64(normal.sample(rng))).collect())
}

/// Per-parameter gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ParamId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient or zeros for parameters the loss did not reach.
    pub fn get_or_zero(&self, id: ParamId, len: usize) -> Vec<R> {
        self.get(id).map_or_else(|| vec![R::zero(); len], <[R]>::to_vec)
    }

    /// Adds another pass's gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<R>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += *b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    /// Copies each gradient into the matching tensor's grad buffer.
    pub fn install(&self, registry: &mut ParameterRegistry<R>) -> Result<()> {
        for id in registry.ids().collect::<Vec<_>>() {
            let len = registry.get(id).numel();
            registry.get_mut(id).set_grad(self.get_or_zero(id, len))?;
        }
        Ok(())
    }
}

/// A tape bound to a registry. Parameters become tape leaves on first use.
pub struct Session<'r, R: Real> {
    pub tape: Tape<R>,
    registry: &'r ParameterRegistry<R>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'r, R: Real> Session<'r, R> {
    /// Session for inference: parameters are constants.
    pub fn inference(registry: &'r ParameterRegistry<R>) -> Self {
        Self::new(registry, false, 0.0, 0)
    }

    /// Session whose parameters receive gradients, with optional dropout.
    pub fn training(registry: &'r ParameterRegistry<R>, dropout: f64, seed: u64) -> Self {
        Self::new(registry, true, dropout, seed)
    }

    fn new(registry: &'r ParameterRegistry<R>, track_grads: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            registry,
            bound: vec![None; registry.len()],
            track_grads,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn registry(&self) -> &ParameterRegistry<R> {
        self.registry
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.registry.get(id);
        let v = if self.track_grads {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, v: Var) -> Result<Var> {
        self.tape.dropout(v, self.dropout, &mut self.rng)
    }

    /// Runs backward from `loss` and collects gradients by parameter.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<R>> {
        self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[R]>::to_vec)))
            .collect();
        Ok(Gradients { grads })
    }
}
