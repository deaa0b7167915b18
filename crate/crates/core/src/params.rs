//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::{Array, Gradients, NumericsError, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Missing(String),
    #[error("parameter `{path}`: expected shape {expected:?}, found {found:?}")]
    Shape { path: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter sets differ: {0}")]
    Mismatch(String),
}

/// Parameters keyed by dotted path (`encoder.gru.w_ih`), iterated in
/// lexicographic order so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Array) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Array, ParamError> {
        self.entries.get(path).ok_or_else(|| ParamError::Missing(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Array, ParamError> {
        self.entries.get_mut(path).ok_or_else(|| ParamError::Missing(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Verifies that `other` has exactly the same paths and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<(), ParamError> {
        for (path, value) in &self.entries {
            let theirs = other.get(path)?;
            if theirs.shape() != value.shape() {
                return Err(ParamError::Shape {
                    path: path.clone(),
                    expected: value.shape().to_vec(),
                    found: theirs.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.paths().find(|p| !self.entries.contains_key(*p)) {
            return Err(ParamError::Mismatch(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Bound { vars }
    }

    /// Parameter values in path order, matching [`Bound::from_vars`].
    pub fn values(&self) -> Vec<Array> {
        self.entries.values().cloned().collect()
    }

    /// Registers every parameter as a constant, for inference-only passes.
    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds the paths of `store`, in order, to already-registered leaves.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Result<Bound, ParamError> {
        if vars.len() != store.len() {
            return Err(ParamError::Mismatch(format!("{} leaves for {} parameters", vars.len(), store.len())));
        }
        Ok(Bound { vars: store.paths().map(String::from).zip(vars.iter().copied()).collect() })
    }

    pub fn get(&self, path: &str) -> Result<Var, ParamError> {
        self.vars.get(path).copied().ok_or_else(|| ParamError::Missing(path.to_string()))
    }

    pub fn has(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }

    /// Gradient per parameter path; `None` for parameters the loss never reached.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Option<Array>> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get(*v).cloned())).collect()
    }
}

/// `x · W + b` using `{prefix}.w` and `{prefix}.b`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, crate::Error> {
    let w = p.get(&format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    match p.get(&format!("{prefix}.b")) {
        Ok(b) => Ok(tape.add_row(y, b)?),
        Err(_) => Ok(y),
    }
}

/// Uniform(±1/√fan_in) weights and zero bias.
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    store.insert(format!("{prefix}.w"), Array::new(vec![fan_in, fan_out], data).expect("sized"));
    if bias {
        store.insert(format!("{prefix}.b"), Array::zeros(&[fan_out]));
    }
}

pub fn init_zero_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Array::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Array::zeros(&[fan_out]));
}

/// Embedding table with N(0, std²) entries.
pub fn init_embedding(store: &mut ParamStore, rng: &mut impl Rng, path: &str, rows: usize, dim: usize, std: f64) {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * dim).map(|_| dist.sample(rng)).collect();
    store.insert(path, Array::new(vec![rows, dim], data).expect("sized"));
}

impl From<ParamError> for NumericsError {
    fn from(e: ParamError) -> Self {
        NumericsError::Domain { op: "param", msg: e.to_string() }
    }
}
