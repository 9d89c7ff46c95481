//! Named, shaped parameter tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a tensor is used for; decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    Norm,
    Prototype,
}

impl ParamKind {
    /// Prototypes and layer-norm affines are exempt from weight decay.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Norm | ParamKind::Prototype)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Mat>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Zeroed tensors matching every parameter's shape.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|v| Mat::zeros(v.dim())).collect()
    }

    /// Uniform in `±1/sqrt(fan_in)`, the usual dense-layer initialization.
    pub fn init_linear<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
    }

    pub fn init_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }
}

/// Every parameter of a store placed on one tape as a leaf.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Trainable leaves receive gradients; otherwise they are constants.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .ids()
            .map(|id| {
                let v = store.get(id).clone();
                if trainable {
                    tape.param(id, v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
