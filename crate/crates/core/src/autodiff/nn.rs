//! Layers built from graph operations. Each layer owns only parameter names;
//! values live in a [`ParameterStore`] and are looked up through [`Bindings`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Bindings, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, Tensor::uniform(&[inputs, outputs], bound, rng))?;
        store.insert(&bias, Tensor::uniform(&[outputs], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// `x: [rows, inputs]` → `[rows, outputs]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.affine(x, p[&self.weight], p[&self.bias])
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

/// Pre-norm transformer layer without positional encoding:
/// `h = x + MHA(LN(x))`, `out = h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    ln1: (String, String),
    ln2: (String, String),
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ff1: Linear,
    ff2: Linear,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        config: AttentionConfig,
    ) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let d = config.dim;
        let mut norm = |suffix: &str| -> Result<(String, String)> {
            let gamma = format!("{name}.{suffix}.gamma");
            let beta = format!("{name}.{suffix}.beta");
            store.insert(&gamma, Tensor::full(&[d], 1.0))?;
            store.insert(&beta, Tensor::zeros(&[d]))?;
            Ok((gamma, beta))
        };
        let ln1 = norm("ln1")?;
        let ln2 = norm("ln2")?;
        Ok(Self {
            config,
            ln1,
            ln2,
            query: Linear::new(store, rng, &format!("{name}.query"), d, d)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d, d)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d, d)?,
            out: Linear::new(store, rng, &format!("{name}.out"), d, d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, config.ff_hidden)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), config.ff_hidden, d)?,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, n: usize) -> Result<Var> {
        let (h, dh) = (self.config.heads, self.config.dim / self.config.heads);
        let x = g.reshape(x, &[b, n, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, n, dh])
    }

    /// `x: [b, n, dim]`; `keep` (length `b·n`) marks real elements, padded
    /// slots get zero attention weight and a zero output row.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d = self.config.dim;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape("attention", &shape, &[d]));
        }
        if self.config.heads == 0 || d % self.config.heads != 0 {
            return Err(Error::Config(format!("attention dim {d} not divisible by {} heads", self.config.heads)));
        }
        let (b, n) = (shape[0], shape[1]);
        if let Some(k) = keep {
            if k.len() != b * n {
                return Err(Error::shape("attention mask", &shape, &[k.len()]));
            }
        }
        let heads = self.config.heads;
        let dh = d / heads;

        let flat = g.reshape(x, &[b * n, d])?;
        let h1 = g.layer_norm(flat, p[&self.ln1.0], p[&self.ln1.1], LN_EPS)?;
        let q = self.query.forward(g, p, h1)?;
        let k = self.key.forward(g, p, h1)?;
        let v = self.value.forward(g, p, h1)?;
        let q = self.split_heads(g, q, b, n)?;
        let k = self.split_heads(g, k, b, n)?;
        let v = self.split_heads(g, v, b, n)?;

        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = match keep {
            Some(keep) => {
                let mut full = Vec::with_capacity(b * heads * n * n);
                for bi in 0..b {
                    for _ in 0..heads {
                        for _ in 0..n {
                            full.extend_from_slice(&keep[bi * n..(bi + 1) * n]);
                        }
                    }
                }
                g.masked_softmax(scores, &full)?
            }
            None => g.softmax(scores),
        };
        let ctx = g.bmm(weights, v, false)?;
        let ctx = g.reshape(ctx, &[b, heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * n, d])?;
        let attended = self.out.forward(g, p, ctx)?;
        let x1 = g.add(flat, attended)?;

        let h2 = g.layer_norm(x1, p[&self.ln2.0], p[&self.ln2.1], LN_EPS)?;
        let ff = self.ff1.forward(g, p, h2)?;
        let ff = g.relu(ff);
        let ff = self.ff2.forward(g, p, ff)?;
        let mut out = g.add(x1, ff)?;
        if let Some(keep) = keep {
            out = g.row_mask(out, keep)?;
        }
        g.reshape(out, &[b, n, d])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng))?;
        store.insert(&bias, Tensor::uniform(&[out_ch], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, p[&self.weight], p[&self.bias], self.stride, self.pad)
    }
}
