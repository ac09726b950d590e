//! Layout generator: per-element MLP encoder, set attention, per-element
//! MLP decoder, trained against a set critic.
//!
//! Element features are a class one-hot (3) followed by geometry (4). The
//! decoder emits 3 class logits and 4 geometry pre-activations, squashed onto
//! the page as `x = σ(a)`, `w = w_min + (1 − w_min)·σ(c)`, then `x` clamped so
//! `x + w ≤ 1` (same for `y`, `h`).

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{AttentionBlock, AttentionConfig, Bindings, Graph, Mlp, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::{
    sample_latent_layout_with, ElementClass, LayoutElement, PageLayout, MAX_ELEMENTS, MIN_SIZE,
};

pub use train::{
    critic_loss, generator_loss, train_adversarial, EpochRecord, LatentBatch, Regularizers, TrainConfig, TrainReport,
};

pub const FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_hidden: usize,
    pub layers: usize,
    pub min_w: f64,
    pub min_h: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            hidden: 128,
            ff_hidden: 128,
            layers: 2,
            min_w: MIN_SIZE,
            min_h: MIN_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.ff_hidden == 0 || self.layers == 0 {
            return Err(Error::Config("model widths and layer count must be positive".into()));
        }
        for (name, v) in [("min_w", self.min_w), ("min_h", self.min_h)] {
            if !(MIN_SIZE..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [{MIN_SIZE}, 1)")));
            }
        }
        Ok(())
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
        }
    }
}

/// A padded batch of element sets: `[b, n, 7]` features and a `b·n` keep mask.
#[derive(Clone, Debug)]
pub struct SetBatch {
    pub features: Tensor,
    pub keep: Vec<bool>,
    pub counts: Vec<usize>,
}

impl SetBatch {
    pub fn from_layouts(layouts: &[&PageLayout]) -> Result<Self> {
        if layouts.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let n = layouts.iter().map(|l| l.len()).max().unwrap_or(0).max(1);
        let b = layouts.len();
        let mut data = vec![0.0; b * n * FEATURES];
        let mut keep = vec![false; b * n];
        for (i, layout) in layouts.iter().enumerate() {
            for (j, e) in layout.elements.iter().enumerate() {
                let row = &mut data[(i * n + j) * FEATURES..(i * n + j + 1) * FEATURES];
                row[..3].copy_from_slice(&one_hot(e.class));
                row[3..].copy_from_slice(&e.geometry());
                keep[i * n + j] = true;
            }
        }
        Ok(Self {
            features: Tensor::new(vec![b, n, FEATURES], data)?,
            keep,
            counts: layouts.iter().map(|l| l.len()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }
}

pub fn one_hot(class: ElementClass) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[class.code() as usize] = 1.0;
    v
}

fn encoder_stack<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    rng: &mut R,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<(Mlp, Vec<AttentionBlock>)> {
    cfg.validate()?;
    let f = Mlp::new(store, rng, &format!("{prefix}.f"), &[FEATURES, cfg.hidden, cfg.dim])?;
    let phi = (0..cfg.layers)
        .map(|i| AttentionBlock::new(store, rng, &format!("{prefix}.phi{i}"), cfg.attention()))
        .collect::<Result<_>>()?;
    Ok((f, phi))
}

fn encode_sets(
    g: &mut Graph,
    p: &Bindings,
    f: &Mlp,
    phi: &[AttentionBlock],
    x: Var,
    keep: &[bool],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let flat = g.reshape(x, &[b * n, FEATURES])?;
    let e = f.forward(g, p, flat)?;
    let d = g.shape(e)[1];
    let mut h = g.reshape(e, &[b, n, d])?;
    for block in phi {
        h = block.forward(g, p, h, Some(keep))?;
    }
    Ok(h)
}

fn check_store(fresh: &ParameterStore, loaded: &ParameterStore, what: &str) -> Result<()> {
    let a: Vec<(&str, &[usize])> = fresh.iter().map(|(n, p)| (n, p.value.shape())).collect();
    let b: Vec<(&str, &[usize])> = loaded.iter().map(|(n, p)| (n, p.value.shape())).collect();
    if a != b {
        return Err(Error::Data(format!(
            "{what} checkpoint parameters do not match the configured architecture"
        )));
    }
    Ok(())
}

/// Generator `G`: `e = f(v)`, `e' = φ({e})`, `v' = g(e')`.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    f: Mlp,
    phi: Vec<AttentionBlock>,
    g: Mlp,
}

/// Decoder outputs for a batch: `[b·n, 3]` logits, `[b·n, 4]` geometry
/// pre-activations and the squashed geometry.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub logits: Var,
    pub raw: Var,
    pub geometry: Var,
}

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParameterStore::new();
        let (f, phi) = encoder_stack(&mut store, rng, "gen", &config)?;
        let g = Mlp::new(&mut store, rng, "gen.g", &[config.dim, config.hidden, FEATURES])?;
        Ok(Self {
            config,
            store,
            f,
            phi,
            g,
        })
    }

    pub fn with_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        let mut fresh = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_store(&fresh.store, &store, "generator")?;
        fresh.store = store;
        Ok(fresh)
    }

    /// `e = f(v)` for a single element.
    pub fn element_encode(&self, v: &LayoutElement) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let mut row = one_hot(v.class).to_vec();
        row.extend_from_slice(&v.geometry());
        let x = g.constant(Tensor::new(vec![1, FEATURES], row)?);
        let e = self.f.forward(&mut g, &p, x)?;
        let d = self.config.dim;
        g.value(e).clone().reshaped(&[d])
    }

    /// Runs the full generator on latent features `[b, n, 7]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, keep: &[bool]) -> Result<Decoded> {
        let h = encode_sets(g, p, &self.f, &self.phi, x, keep)?;
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0] * shape[1], shape[2]])?;
        let out = self.g.forward(g, p, flat)?;
        let logits = g.slice_last(out, 0, 3)?;
        let delta = g.slice_last(out, 3, 4)?;
        // Geometry is an update of each element's own latent code, so
        // elements of one class do not start out decoded to the same box.
        let xs = g.shape(x).to_vec();
        let latent = g.reshape(x, &[xs[0] * xs[1], xs[2]])?;
        let latent = g.slice_last(latent, 3, 4)?;
        let raw = g.add(delta, latent)?;
        let s = g.sigmoid(raw);
        let pos = g.slice_last(s, 0, 2)?;
        let size = g.slice_last(s, 2, 2)?;
        let wh = {
            let ws = g.slice_last(size, 0, 1)?;
            let hs = g.slice_last(size, 1, 1)?;
            let ws = g.scale(ws, 1.0 - self.config.min_w);
            let ws = g.add_scalar(ws, self.config.min_w);
            let hs = g.scale(hs, 1.0 - self.config.min_h);
            let hs = g.add_scalar(hs, self.config.min_h);
            g.concat_last(&[ws, hs])?
        };
        let room = g.scale(wh, -1.0);
        let room = g.add_scalar(room, 1.0);
        // Positions are fractions of the room left by the size, so `x + w ≤ 1`
        // without clamping and every output stays differentiable.
        let xy = g.mul(pos, room)?;
        let geometry = g.concat_last(&[xy, wh])?;
        Ok(Decoded { logits, raw, geometry })
    }

    /// Decodes latent layouts, all in one padded batch.
    pub fn decode_batch(&self, latents: &[&PageLayout]) -> Result<Vec<PageLayout>> {
        for l in latents {
            if l.len() > MAX_ELEMENTS {
                return Err(Error::Bounds(format!("{} elements exceeds {MAX_ELEMENTS}", l.len())));
            }
        }
        let nonempty: Vec<&PageLayout> = latents.iter().copied().filter(|l| !l.is_empty()).collect();
        let mut decoded = if nonempty.is_empty() {
            Vec::new()
        } else {
            let batch = SetBatch::from_layouts(&nonempty)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let x = g.constant(batch.features.clone());
            let out = self.forward(&mut g, &p, x, &batch.keep)?;
            let n = batch.width();
            let logits = g.value(out.logits).data();
            let geometry = g.value(out.geometry).data();
            batch
                .counts
                .iter()
                .enumerate()
                .map(|(i, &count)| {
                    let elements = (0..count)
                        .map(|j| {
                            let r = i * n + j;
                            let l = &logits[r * 3..r * 3 + 3];
                            let q = &geometry[r * 4..r * 4 + 4];
                            let (x, w) = fit_unit(q[0], q[2]);
                            let (y, h) = fit_unit(q[1], q[3]);
                            LayoutElement::new(argmax_class(l), x, y, w, h)
                        })
                        .collect();
                    PageLayout::decoded(elements)
                })
                .collect::<Result<Vec<_>>>()?
        }
        .into_iter();
        Ok(latents
            .iter()
            .map(|l| {
                if l.is_empty() {
                    PageLayout::default()
                } else {
                    decoded.next().expect("one decoded layout per nonempty latent")
                }
            })
            .collect())
    }
}

/// Summed pairwise excess IoU `max(0, IoU − margin)` of kept boxes, averaged
/// over layouts. `geometry` is `[b·n, 4]` in `(x, y, w, h)` order with
/// positive sizes.
pub fn overlap_penalty(
    g: &mut Graph,
    geometry: Var,
    batch: usize,
    width: usize,
    keep: &[bool],
    margin: f64,
) -> Result<Var> {
    let geom = g.reshape(geometry, &[batch, width, 4])?;
    let ones = g.constant(Tensor::full(&[batch, 1, width], 1.0));
    // [b, n, n] grids holding v_i (rows) and v_j (columns).
    let pair = |g: &mut Graph, v: Var| -> Result<(Var, Var)> {
        let rows = g.bmm(v, ones, false)?;
        let cols = g.permute(rows, &[0, 2, 1])?;
        Ok((rows, cols))
    };
    let extent = |g: &mut Graph, start: usize| -> Result<Var> {
        let lo = g.slice_last(geom, start, 1)?;
        let size = g.slice_last(geom, start + 2, 1)?;
        let hi = g.add(lo, size)?;
        let (lo_i, lo_j) = pair(g, lo)?;
        let (hi_i, hi_j) = pair(g, hi)?;
        let hi = g.minimum(hi_i, hi_j)?;
        let neg_i = g.scale(lo_i, -1.0);
        let neg_j = g.scale(lo_j, -1.0);
        let neg_lo = g.minimum(neg_i, neg_j)?;
        let span = g.add(hi, neg_lo)?;
        Ok(g.relu(span))
    };
    let ix = extent(g, 0)?;
    let iy = extent(g, 1)?;
    let inter = g.mul(ix, iy)?;
    let w = g.slice_last(geom, 2, 1)?;
    let h = g.slice_last(geom, 3, 1)?;
    let area = g.mul(w, h)?;
    let (area_i, area_j) = pair(g, area)?;
    let union = g.add(area_i, area_j)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, 1e-12);
    let mut iou = g.div(inter, union)?;
    if margin > 0.0 {
        let excess = g.add_scalar(iou, -margin);
        iou = g.relu(excess);
    }
    let mut mask = vec![0.0; batch * width * width];
    for b in 0..batch {
        for i in 0..width {
            for j in i + 1..width {
                if keep[b * width + i] && keep[b * width + j] {
                    mask[(b * width + i) * width + j] = 1.0;
                }
            }
        }
    }
    let mask = g.constant(Tensor::new(vec![batch, width, width], mask)?);
    let iou = g.mul(iou, mask)?;
    let total = g.sum(iou);
    Ok(g.scale(total, 1.0 / batch.max(1) as f64))
}

/// Clamps a decoded `(pos, size)` pair so `pos + size ≤ 1` holds exactly in
/// floating point.
fn fit_unit(pos: f64, size: f64) -> (f64, f64) {
    let size = size.clamp(0.0, 1.0);
    let mut pos = pos.clamp(0.0, 1.0 - size);
    while pos > 0.0 && pos + size > 1.0 {
        pos = f64::from_bits(pos.to_bits() - 1);
    }
    (pos, size)
}

fn argmax_class(logits: &[f64]) -> ElementClass {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    ElementClass::from_code(best as u8).expect("three logits")
}

/// `G(V)`: decodes one latent layout.
pub fn generator_forward(model: &GeneratorModel, latent: &PageLayout) -> Result<PageLayout> {
    if latent.len() > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("{} elements exceeds {MAX_ELEMENTS}", latent.len())));
    }
    Ok(model.decode_batch(&[latent])?.pop().expect("one layout"))
}

pub fn element_encode(v: &LayoutElement, model: &GeneratorModel) -> Result<Tensor> {
    model.element_encode(v)
}

/// Set critic: element MLP, attention, masked mean pool, scoring MLP.
#[derive(Clone, Debug)]
pub struct CriticModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    f: Mlp,
    phi: Vec<AttentionBlock>,
    head: Mlp,
}

impl CriticModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParameterStore::new();
        let (f, phi) = encoder_stack(&mut store, rng, "critic", &config)?;
        let head = Mlp::new(&mut store, rng, "critic.head", &[config.dim, config.hidden, 1])?;
        Ok(Self {
            config,
            store,
            f,
            phi,
            head,
        })
    }

    pub fn with_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        let mut fresh = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_store(&fresh.store, &store, "critic")?;
        fresh.store = store;
        Ok(fresh)
    }

    /// Logits `[b, 1]` for element sets `[b, n, 7]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, keep: &[bool]) -> Result<Var> {
        let h = encode_sets(g, p, &self.f, &self.phi, x, keep)?;
        let pooled = g.masked_mean_pool(h, keep)?;
        self.head.forward(g, p, pooled)
    }

    pub fn score_batch(&self, layouts: &[&PageLayout]) -> Result<Vec<f64>> {
        if let Some(l) = layouts.iter().find(|l| l.is_latent()) {
            return Err(Error::Usage(format!("critic needs decoded layouts, got a latent one of {}", l.len())));
        }
        let batch = SetBatch::from_layouts(layouts)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(batch.features);
        let out = self.forward(&mut g, &p, x, &batch.keep)?;
        Ok(g.value(out).data().to_vec())
    }
}

pub fn critic_forward(layout: &PageLayout, model: &CriticModel) -> Result<f64> {
    Ok(model.score_batch(&[layout])?[0])
}

/// Empirical distribution of element counts, used to size sampled pages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementCounts {
    /// `histogram[n]` = number of corpus pages with `n` elements.
    pub histogram: Vec<u64>,
}

impl ElementCounts {
    pub fn from_corpus(corpus: &[PageLayout]) -> Result<Self> {
        let mut histogram = vec![0u64; MAX_ELEMENTS + 1];
        for l in corpus.iter().filter(|l| !l.is_empty()) {
            histogram[l.len().min(MAX_ELEMENTS)] += 1;
        }
        Self::new(histogram)
    }

    pub fn new(mut histogram: Vec<u64>) -> Result<Self> {
        histogram.resize(MAX_ELEMENTS + 1, 0);
        if histogram.len() > MAX_ELEMENTS + 1 || histogram[0] != 0 {
            return Err(Error::Data(format!("element counts must lie in 1..={MAX_ELEMENTS}")));
        }
        if histogram.iter().all(|&c| c == 0) {
            return Err(Error::Data("element-count distribution is empty".into()));
        }
        Ok(Self { histogram })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: u64 = self.histogram.iter().sum();
        let mut t = rng.gen_range(0..total);
        for (n, &c) in self.histogram.iter().enumerate() {
            if t < c {
                return n;
            }
            t -= c;
        }
        unreachable!("draw below histogram total")
    }
}

const SAMPLE_CHUNK: usize = 64;

/// Draws `count` decoded layouts. Element counts follow `counts`; each chunk
/// of pages has its own seed so chunks decode in parallel.
pub fn sample_layouts(
    model: &GeneratorModel,
    count: usize,
    counts: &ElementCounts,
    seed: u64,
) -> Result<Vec<PageLayout>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks: Vec<(usize, u64)> = (0..count)
        .step_by(SAMPLE_CHUNK)
        .map(|start| (SAMPLE_CHUNK.min(count - start), rng.gen()))
        .collect();
    let out: Vec<Vec<PageLayout>> = chunks
        .into_par_iter()
        .map(|(len, chunk_seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed);
            let latents = (0..len)
                .map(|_| sample_latent_layout_with(counts.sample(&mut rng), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PageLayout> = latents.iter().collect();
            model.decode_batch(&refs)
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

const GENERATOR_KIND: &str = "dlg-generator";
const CRITIC_KIND: &str = "dlg-critic";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorMeta {
    kind: String,
    config: ModelConfig,
    element_counts: ElementCounts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriticMeta {
    kind: String,
    config: ModelConfig,
}

fn meta_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes the generator with the element-count distribution it samples from.
pub fn save_generator(model: &GeneratorModel, counts: &ElementCounts, path: impl AsRef<Path>) -> Result<()> {
    let meta = GeneratorMeta {
        kind: GENERATOR_KIND.into(),
        config: model.config.clone(),
        element_counts: counts.clone(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?;
    model.store.save(path, meta)
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<(GeneratorModel, ElementCounts)> {
    let path = path.as_ref();
    let (store, meta) = ParameterStore::load(path)?;
    let meta: GeneratorMeta = serde_json::from_value(meta).map_err(|e| meta_error(path, e))?;
    if meta.kind != GENERATOR_KIND {
        return Err(meta_error(path, format!("expected a generator checkpoint, found `{}`", meta.kind)));
    }
    let counts = ElementCounts::new(meta.element_counts.histogram)?;
    Ok((GeneratorModel::with_store(meta.config, store)?, counts))
}

pub fn save_critic(model: &CriticModel, path: impl AsRef<Path>) -> Result<()> {
    let meta = CriticMeta {
        kind: CRITIC_KIND.into(),
        config: model.config.clone(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?;
    model.store.save(path, meta)
}

pub fn load_critic(path: impl AsRef<Path>) -> Result<CriticModel> {
    let path = path.as_ref();
    let (store, meta) = ParameterStore::load(path)?;
    let meta: CriticMeta = serde_json::from_value(meta).map_err(|e| meta_error(path, e))?;
    if meta.kind != CRITIC_KIND {
        return Err(meta_error(path, format!("expected a critic checkpoint, found `{}`", meta.kind)));
    }
    CriticModel::with_store(meta.config, store)
}

/// First Wasserstein distance between two empirical distributions on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("wasserstein distance of an empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    // Integrate |F_a − F_b| over the merged support.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

pub fn box_areas(layouts: &[PageLayout]) -> Vec<f64> {
    layouts.iter().flat_map(|l| l.elements.iter().map(LayoutElement::area)).collect()
}
