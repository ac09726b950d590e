//! Named parameters, the adaptive-moment optimizer and checkpoint files.
//!
//! Checkpoints are JSON documents:
//!
//! ```json
//! { "format": "docforge-params", "version": 1, "meta": { ... },
//!   "params": { "<name>": { "shape": [..], "values": [..] } } }
//! ```
//!
//! Parameter names are sorted; values are written in shortest round-trip
//! decimal form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "docforge-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

/// Graph leaves created for a store by [`ParameterStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Substitutes a different node for one parameter.
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

impl Index<&str> for Bindings {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    params: BTreeMap<String, CheckpointEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    /// Adds every parameter to `graph` as a leaf; gradient-tracked when `trainable`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients of bound parameters to their stored gradients.
    /// A bound parameter that received no gradient gets zeros.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients) {
        for (name, param) in self.params.iter_mut() {
            let Some(&var) = bindings.vars.get(name) else { continue };
            let g = grads
                .get(var)
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            match &mut param.grad {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// One bias-corrected adaptive-moment update; clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
        }
        for p in self.params.values_mut() {
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let values = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                values[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn to_json(&self, meta: serde_json::Value) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        CheckpointEntry {
                            shape: p.value.shape().to_vec(),
                            values: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&ckpt).map_err(|e| Error::Data(e.to_string()))
    }

    /// Parses a checkpoint, returning the store and its metadata block.
    pub fn from_json(text: &str, context: &str) -> Result<(Self, serde_json::Value)> {
        let parse = |message: String| Error::Parse {
            context: context.to_string(),
            message,
        };
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(parse(format!("unexpected format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(parse(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let mut store = Self::new();
        for (name, entry) in ckpt.params {
            let t = Tensor::new(entry.shape, entry.values).map_err(|e| parse(format!("`{name}`: {e}")))?;
            store.insert(name, t)?;
        }
        Ok((store, ckpt.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
