use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    /// `rows × cols` weight with fan-in `rows`.
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![rows, cols],
            init: Init::Uniform { fan_in: rows },
        }
    }

    pub fn bias(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![width],
            init: Init::Zeros,
        }
    }

    pub fn gain(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![width],
            init: Init::Ones,
        }
    }

    pub fn entries(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::filled(&self.shape, 1.0),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..self.entries())
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                Tensor::new(self.shape.clone(), data).expect("spec shape")
            }
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Arc<Tensor>>,
}

/// Serialized form of one named tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut set = Self::new();
        for s in specs {
            set.insert(s.name.clone(), s.sample(rng));
        }
        set
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Records every tensor as a named leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k, Arc::clone(v))))
                .collect(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect()
    }

    pub fn from_named(named: Vec<NamedTensor>) -> Result<Self> {
        let mut set = Self::new();
        for n in named {
            if set.contains(&n.name) {
                return Err(Error::Config(format!("duplicate parameter `{}`", n.name)));
            }
            let t = Tensor::new(n.shape, n.values)?;
            set.insert(n.name, t);
        }
        Ok(set)
    }
}

/// Parameters recorded on one tape, looked up by name.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn from_vars(names: &[String], vars: &[Var<'t>]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Looks up `{prefix}.{suffix}`.
    pub fn at(&self, prefix: &str, suffix: &str) -> Result<Var<'t>> {
        self.get(&format!("{prefix}.{suffix}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
