//! Networks and their parameters.
//!
//! Everything trainable lives in a [`ParameterSet`]: named f64 tensors with a
//! layer-depth index used by layer-wise lr decay and EMA shadowing. Models
//! are thin structs (config + parameter set) whose `forward` records onto a
//! tape; running the same forward with frozen bindings is the inference path,
//! so train and eval share one implementation of every op.

mod checkpoint;
mod models;

pub use checkpoint::{load_entries, save_entries, CheckpointEntry};
pub use models::{
    AeEncoder, Autoencoder, DenoiserConfig, DenoiserNet, ImageEncoder, ImageEncoderConfig,
    LatentDecoder, LatentEncoder, LinearProbe,
};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One named, trainable tensor. `depth` orders layers from input (0) upward;
/// the probe on top of an encoder gets the largest depth in its branch.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub depth: usize,
    pub tensor: Tensor,
}

/// Ordered collection of parameters. Order is fixed at construction and is
/// the serialization order, which is what makes checkpoint round trips
/// byte-identical.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, depth: usize, mut tensor: Tensor) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(true);
        self.params.push(Param { name, depth, tensor });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn max_depth(&self) -> usize {
        self.params.iter().map(|p| p.depth).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Registers every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(&p.tensor)).collect(),
        }
    }

    /// Registers every parameter as a constant leaf (inference path).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    tape.leaf(p.tensor.shape(), p.tensor.data().to_vec(), false)
                        .expect("parameter tensors are consistent")
                })
                .collect(),
        }
    }

    /// Pulls gradients off the tape into each tensor's grad slot.
    pub fn harvest(&mut self, tape: &Tape, bound: &Bound) {
        assert_eq!(bound.vars.len(), self.params.len());
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            tape.harvest_into(v, &mut p.tensor);
        }
    }

    /// Bitwise equality of all parameter values (names and shapes included).
    pub fn bits_equal(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Flattens into checkpoint entries under a component prefix.
    pub fn entries(&self, prefix: &str) -> Vec<CheckpointEntry> {
        self.params
            .iter()
            .map(|p| CheckpointEntry {
                name: format!("{prefix}.{}", p.name),
                depth: p.depth,
                tensor: p.tensor.clone(),
            })
            .collect()
    }

    /// Overwrites values from prefixed entries; every parameter must be
    /// present with a matching shape, and names how it fails otherwise.
    pub fn load_from_entries(&mut self, prefix: &str, entries: &[CheckpointEntry]) -> Result<()> {
        for p in self.params.iter_mut() {
            let want = format!("{prefix}.{}", p.name);
            let found = entries
                .iter()
                .find(|e| e.name == want)
                .ok_or_else(|| Error::InvalidArg(format!("checkpoint is missing parameter {want}")))?;
            if found.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "load_from_entries",
                    detail: format!(
                        "{want}: checkpoint shape {:?} vs model shape {:?}",
                        found.tensor.shape(),
                        p.tensor.shape()
                    ),
                });
            }
            let grad_kept = p.tensor.requires_grad();
            p.tensor = found.tensor.clone();
            p.tensor.set_requires_grad(grad_kept);
        }
        Ok(())
    }
}

/// Tape handles for a bound parameter set, index-aligned with the set.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

// ── initialization ──────────────────────────────────────────────────────

/// Kaiming-uniform fan-in draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Bias companion draw: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn bias_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[n], data).unwrap()
}
