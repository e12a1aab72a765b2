//! Named parameter blocks.
//!
//! Model weights live outside any tape as plain tensors keyed by name.
//! Building a sample's computation graph binds each block once as a tape
//! input; after backward, gradients are read back by the same names. The
//! map is ordered (BTreeMap) so iteration, checkpoint layout, and update
//! order are all canonical.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    blocks: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.blocks.insert(name.clone(), tensor).is_none(),
            "duplicate parameter block {name}"
        );
    }

    /// Replace an existing block, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let slot = self
            .blocks
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"));
        assert_eq!(slot.shape(), tensor.shape(), "shape change for {name}");
        *slot = tensor;
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.get(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.blocks
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.blocks.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.blocks.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }

    /// Round all blocks to f32 precision (see [`Tensor::quantize_f32`]).
    pub fn quantize_f32(&mut self) {
        for tensor in self.blocks.values_mut() {
            *tensor = tensor.quantize_f32();
        }
    }
}

/// Tape bindings for a parameter set: each block loaded once as an input
/// node so gradients accumulate across all uses within the sample.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = BTreeMap::new();
        for (name, tensor) in params.iter() {
            ids.insert(name.clone(), tape.input(tensor.clone()));
        }
        Self { ids }
    }

    /// Bind with every name prefixed, so several parameter sets can share a
    /// tape without colliding.
    pub fn bind_prefixed(tape: &mut Tape, params: &ParamSet, prefix: &str) -> Self {
        let mut ids = BTreeMap::new();
        for (name, tensor) in params.iter() {
            ids.insert(format!("{prefix}{name}"), tape.input(tensor.clone()));
        }
        Self { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect gradients for every bound block, zeros where unreached.
    pub fn gradients(&self, tape: &Tape, grads: &crate::tape::Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &id) in &self.ids {
            let shape = tape.value(id).shape();
            out.insert(name.clone(), grads.get_or_zeros(id, shape));
        }
        out
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Bias initialization: uniform with the layer's fan-in, like the weights.
///
/// Nonzero biases keep randomly initialized networks off exact ReLU kinks
/// (an all-dead previous layer would otherwise land every pre-activation
/// at precisely zero).
pub fn init_bias(rng: &mut impl Rng, cols: usize, fan_in: usize) -> Tensor {
    init_uniform(rng, 1, cols, fan_in)
}

/// Gradient arithmetic over whole parameter sets, entrywise by name.
pub fn axpy(acc: &mut ParamSet, scale: f64, delta: &ParamSet) {
    for (name, d) in delta.iter() {
        match acc.get(name) {
            Some(t) => {
                let updated = t.zip(d, |a, b| a + scale * b);
                acc.set(name, updated);
            }
            None => acc.insert(name.clone(), d.scale(scale)),
        }
    }
}

/// Global L2 norm over all blocks.
pub fn global_norm(set: &ParamSet) -> f64 {
    set.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
}
