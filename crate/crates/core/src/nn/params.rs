use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Running statistics are buffers: updated by batch norm, never by the optimizer.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub trainable: bool,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered, named parameter collection. Registration order is the iteration order
/// for initialization, optimization and serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let init = match role {
            ParamRole::BnScale | ParamRole::RunningVar => 1.0,
            _ => 0.0,
        };
        let id = self.params.len();
        self.params.push(Param {
            name: name.clone(),
            shape: shape.to_vec(),
            role,
            trainable: true,
            value: vec![init; n],
            grad: vec![0.0; n],
        });
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.grad.len() != p.value.len() {
                p.grad = vec![0.0; p.value.len()];
            } else {
                p.grad.fill(0.0);
            }
        }
    }

    /// Fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and
    /// biases; batch norm scale 1, shift 0, running mean 0, running variance 1.
    pub fn init_uniform(&mut self, fan_in: &BTreeMap<ParamId, usize>, rng: &mut impl Rng) {
        for (id, p) in self.params.iter_mut().enumerate() {
            match p.role {
                ParamRole::Weight | ParamRole::Bias => {
                    let fan = fan_in.get(&id).copied().unwrap_or(1).max(1);
                    let bound = 1.0 / (fan as f64).sqrt();
                    for v in &mut p.value {
                        *v = rng.random_range(-bound..bound) as f32;
                    }
                }
                ParamRole::BnScale | ParamRole::RunningVar => p.value.fill(1.0),
                ParamRole::BnShift | ParamRole::RunningMean => p.value.fill(0.0),
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}
