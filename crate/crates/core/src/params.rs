//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight/bias specs of a `cout×cin×k×k` convolution.
pub fn conv_specs(prefix: &str, cout: usize, cin: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[cout, cin, k, k], Init::FanInUniform { fan_in: cin * k * k }),
        ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

/// Weight/bias specs of a `cin → cout` linear map.
pub fn linear_specs(prefix: &str, cout: usize, cin: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[cout, cin], Init::FanInUniform { fan_in: cin }),
        ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[channels], Init::Zeros),
    ]
}

// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Initialize every spec. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so toggling unrelated parameters leaves it unchanged.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::full(&s.shape, 1.0),
                    Init::FanInUniform { fan_in } => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&s.name));
                        Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..bound))
                    }
                };
                (s.name.clone(), t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Lists every disagreement between stored tensors and `specs`.
    pub fn shape_diff(&self, specs: &[ParamSpec]) -> Vec<String> {
        let mut diffs = Vec::new();
        for s in specs {
            match self.tensors.get(&s.name) {
                None => diffs.push(format!("missing `{}` {:?}", s.name, s.shape)),
                Some(t) if t.shape() != s.shape.as_slice() => diffs.push(format!(
                    "`{}`: checkpoint {:?}, model {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )),
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                diffs.push(format!("unexpected `{name}`"));
            }
        }
        diffs
    }

    /// Bind a stored parameter as a graph leaf (once per graph).
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = g.bound_param(name) {
            return Ok(v);
        }
        Ok(g.param(name, self.get(name)?.clone()))
    }

    /// `x·Wᵀ + b` with `{prefix}.weight` / `{prefix}.bias`.
    pub fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.bind(g, &format!("{prefix}.weight"))?;
        let b = self.bind(g, &format!("{prefix}.bias"))?;
        g.linear(x, w, b)
    }

    pub fn conv(&self, g: &mut Graph, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind(g, &format!("{prefix}.weight"))?;
        let b = self.bind(g, &format!("{prefix}.bias"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn group_norm(&self, g: &mut Graph, prefix: &str, x: Var, groups: usize) -> Result<Var> {
        let gamma = self.bind(g, &format!("{prefix}.gamma"))?;
        let beta = self.bind(g, &format!("{prefix}.beta"))?;
        g.group_norm(x, gamma, beta, groups)
    }
}
