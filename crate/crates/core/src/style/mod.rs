//! Page-style encoder trained with a supervised contrastive loss, and the two
//! scoring modes built on it: quality filtering against designed/poor page
//! sets, and selection of pages resembling an unlabeled target corpus.

mod corpus;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use image::RgbImage;

use crate::autodiff::{AdamConfig, Conv2d, Graph, Linear, ParameterStore, Tensor, Var};
use crate::autodiff::Bindings;
use crate::error::{Error, Result};

pub use corpus::{load_page, read_corpus_file, reports_to_tsv, CorpusEntry, CorpusRole};

pub const THUMB: usize = 128;
pub const MIN_PAGE_SIDE: u32 = 64;
pub const MIN_CLASS_PAGES: usize = 50;
const CHANNELS: [usize; 3] = [8, 16, 32];

/// Luminance thumbnail `[1, 128, 128]` in `[0, 1]`, resized by exact area
/// averaging.
pub fn preprocess(page: &RgbImage) -> Result<Tensor> {
    let (w, h) = page.dimensions();
    if w < MIN_PAGE_SIDE || h < MIN_PAGE_SIDE {
        return Err(Error::Input(format!(
            "page {w}x{h} below {MIN_PAGE_SIDE}x{MIN_PAGE_SIDE}"
        )));
    }
    let luma: Vec<f64> = page
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(u32::from);
            (2126 * r + 7152 * g + 722 * b) as f64 / (10_000.0 * 255.0)
        })
        .collect();
    let wx = area_weights(w as usize, THUMB);
    let wy = area_weights(h as usize, THUMB);
    // Rows first, then columns.
    let mut rows = vec![0.0; h as usize * THUMB];
    for y in 0..h as usize {
        let src = &luma[y * w as usize..(y + 1) * w as usize];
        for (o, weights) in wx.iter().enumerate() {
            rows[y * THUMB + o] = weights.iter().map(|&(j, a)| a * src[j]).sum();
        }
    }
    let mut out = vec![0.0; THUMB * THUMB];
    for (o, weights) in wy.iter().enumerate() {
        for x in 0..THUMB {
            out[o * THUMB + x] = weights.iter().map(|&(j, a)| a * rows[j * THUMB + x]).sum();
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, THUMB, THUMB], out)
}

/// For each of `m` output cells, the input cells it overlaps and the
/// fraction of the output cell each covers.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embedding: 64 }
    }
}

/// Three stride-2 3×3 convolutions (8, 16, 32 channels, ReLU), flatten, affine
/// projection, L2 normalization.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub config: EncoderConfig,
    pub store: ParameterStore,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl StyleEncoder {
    pub fn new<R: rand::Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.embedding == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let mut convs = Vec::new();
        let mut inputs = 1;
        for (i, &c) in CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, rng, &format!("dsd.conv{i}"), inputs, c, 3, 2, 1)?);
            inputs = c;
        }
        let side = THUMB >> CHANNELS.len();
        let proj = Linear::new(&mut store, rng, "dsd.proj", inputs * side * side, config.embedding)?;
        Ok(Self {
            config,
            store,
            convs,
            proj,
        })
    }

    pub fn with_store(config: EncoderConfig, store: ParameterStore) -> Result<Self> {
        let mut fresh = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let shapes = |s: &ParameterStore| -> Vec<(String, Vec<usize>)> {
            s.iter().map(|(n, p)| (n.to_string(), p.value.shape().to_vec())).collect()
        };
        if shapes(&fresh.store) != shapes(&store) {
            return Err(Error::Data("encoder checkpoint does not match the architecture".into()));
        }
        fresh.store = store;
        Ok(fresh)
    }

    /// Unit-norm embeddings `[b, d]` of thumbnails `[b, 1, 128, 128]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[b, flat])?;
        let z = self.proj.forward(g, p, h)?;
        Ok(g.l2_normalize(z))
    }

    pub fn embed_thumbnails(&self, thumbs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Vec<Vec<f64>>> = thumbs
            .par_chunks(16)
            .map(|chunk| {
                let mut data = Vec::with_capacity(chunk.len() * THUMB * THUMB);
                for t in chunk {
                    data.extend_from_slice(t.data());
                }
                let mut g = Graph::new();
                let p = self.store.bind(&mut g, false);
                let x = g.constant(Tensor::new(vec![chunk.len(), 1, THUMB, THUMB], data)?);
                let z = self.forward(&mut g, &p, x)?;
                Ok(g.value(z).data().chunks(self.config.embedding).map(<[f64]>::to_vec).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn embed_pages(&self, pages: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let thumbs = preprocess_all(pages)?;
        self.embed_thumbnails(&thumbs)
    }
}

pub fn preprocess_all(pages: &[&RgbImage]) -> Result<Vec<Tensor>> {
    pages.par_iter().map(|p| preprocess(p)).collect()
}

/// `γ(p)`.
pub fn embed(encoder: &StyleEncoder, page: &RgbImage) -> Result<Vec<f64>> {
    Ok(encoder.embed_pages(&[page])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            temperature: 0.1,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainReport {
    pub seed: u64,
    /// Mean contrastive loss per epoch.
    pub losses: Vec<f64>,
}

/// Two-class contrastive training. Every batch holds `batch/2` pages of each
/// class; the smaller class is cycled so each epoch sees every page of the
/// larger one.
pub fn train_dsd(
    pos_pages: &[&RgbImage],
    neg_pages: &[&RgbImage],
    config: &StyleTrainConfig,
) -> Result<(StyleEncoder, StyleTrainReport)> {
    let pos = preprocess_all(pos_pages)?;
    let neg = preprocess_all(neg_pages)?;
    train_dsd_thumbnails(&pos, &neg, config)
}

pub fn train_dsd_thumbnails(
    pos: &[Tensor],
    neg: &[Tensor],
    config: &StyleTrainConfig,
) -> Result<(StyleEncoder, StyleTrainReport)> {
    for (name, set) in [("positive", pos), ("negative", neg)] {
        if set.len() < MIN_CLASS_PAGES {
            return Err(Error::Data(format!(
                "{name} class has {} pages, at least {MIN_CLASS_PAGES} required",
                set.len()
            )));
        }
    }
    if config.batch < 4 || config.batch % 2 != 0 {
        return Err(Error::Config(format!(
            "style batch {} must be even and at least 4",
            config.batch
        )));
    }
    if config.temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = StyleEncoder::new(config.encoder.clone(), &mut rng)?;
    let adam = AdamConfig::with_lr(config.lr);
    let half = config.batch / 2;
    let steps = pos.len().max(neg.len()).div_ceil(half);
    let mut report = StyleTrainReport {
        seed: config.seed,
        losses: Vec::with_capacity(config.epochs),
    };
    let mut pi: Vec<usize> = (0..pos.len()).collect();
    let mut ni: Vec<usize> = (0..neg.len()).collect();
    for epoch in 0..config.epochs {
        pi.shuffle(&mut rng);
        ni.shuffle(&mut rng);
        let mut total = 0.0;
        for s in 0..steps {
            let mut data = Vec::with_capacity(config.batch * THUMB * THUMB);
            for k in 0..half {
                data.extend_from_slice(pos[pi[(s * half + k) % pos.len()]].data());
            }
            for k in 0..half {
                data.extend_from_slice(neg[ni[(s * half + k) % neg.len()]].data());
            }
            let labels: Vec<usize> = (0..config.batch).map(|i| usize::from(i >= half)).collect();
            let mut g = Graph::new();
            let p = encoder.store.bind(&mut g, true);
            let x = g.constant(Tensor::new(vec![config.batch, 1, THUMB, THUMB], data)?);
            let z = encoder.forward(&mut g, &p, x)?;
            let loss = g.supcon_loss(z, &labels, config.temperature)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    message: format!("contrastive loss is {value}"),
                });
            }
            total += value;
            let grads = g.backward(loss)?;
            encoder.store.accumulate_grads(&p, &grads);
            encoder.store.clip_grad_norm(5.0);
            encoder.store.adam_step(&adam)?;
        }
        report.losses.push(total / steps as f64);
    }
    Ok((encoder, report))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn default_k(set_len: usize) -> usize {
    set_len.min(5)
}

/// Mean cosine similarity between `e` and its `k` most similar members of `set`.
pub fn set_similarity(e: &[f64], set: &[Vec<f64>], k: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Usage("similarity against an empty set".into()));
    }
    if k == 0 {
        return Err(Error::Usage("similarity needs k ≥ 1".into()));
    }
    let mut sims: Vec<f64> = set.iter().map(|s| cosine(e, s)).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(sims.len());
    Ok(sims[..k].iter().sum::<f64>() / k as f64)
}

/// Embedded positive and negative reference sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleCorpus {
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub positive_sources: Vec<String>,
    pub negative_sources: Vec<String>,
}

impl StyleCorpus {
    pub fn embed(
        encoder: &StyleEncoder,
        positives: &[&RgbImage],
        negatives: &[&RgbImage],
    ) -> Result<Self> {
        Ok(Self {
            positives: encoder.embed_pages(positives)?,
            negatives: encoder.embed_pages(negatives)?,
            positive_sources: (0..positives.len()).map(|i| format!("positive:{i}")).collect(),
            negative_sources: (0..negatives.len()).map(|i| format!("negative:{i}")).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub s_plus: f64,
    pub s_minus: f64,
    /// `min(s⁺, s⁻)`.
    pub e_min: f64,
    pub margin: f64,
    pub accepted: bool,
}

/// Scores an embedding: accepted iff `s⁺ − s⁻ > τ`.
pub fn assess_embedding(e: &[f64], corpus: &StyleCorpus, tau: f64) -> Result<ScoreReport> {
    if corpus.positives.is_empty() || corpus.negatives.is_empty() {
        return Err(Error::Usage("style corpus needs positive and negative pages".into()));
    }
    let s_plus = set_similarity(e, &corpus.positives, default_k(corpus.positives.len()))?;
    let s_minus = set_similarity(e, &corpus.negatives, default_k(corpus.negatives.len()))?;
    let margin = s_plus - s_minus;
    Ok(ScoreReport {
        s_plus,
        s_minus,
        e_min: s_plus.min(s_minus),
        margin,
        accepted: margin > tau,
    })
}

pub fn assess(page: &RgbImage, encoder: &StyleEncoder, corpus: &StyleCorpus, tau: f64) -> Result<ScoreReport> {
    assess_embedding(&embed(encoder, page)?, corpus, tau)
}

/// An order-preserving accept/reject partition of page indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// `|accepted| / |pages|`, or 0 with `empty` set for no input.
    pub rate: f64,
    pub empty: bool,
    pub reports: Vec<ScoreReport>,
}

pub fn select_embeddings(embeddings: &[Vec<f64>], corpus: &StyleCorpus, tau: f64) -> Result<Selection> {
    let reports = embeddings
        .iter()
        .map(|e| assess_embedding(e, corpus, tau))
        .collect::<Result<Vec<_>>>()?;
    let (accepted, rejected): (Vec<usize>, Vec<usize>) = (0..reports.len()).partition(|&i| reports[i].accepted);
    let empty = reports.is_empty();
    Ok(Selection {
        rate: if empty { 0.0 } else { accepted.len() as f64 / reports.len() as f64 },
        accepted,
        rejected,
        empty,
        reports,
    })
}

/// `SD: P → P_q`.
pub fn quality_filter(
    pages: &[&RgbImage],
    encoder: &StyleEncoder,
    corpus: &StyleCorpus,
    tau: f64,
) -> Result<Selection> {
    if corpus.positives.is_empty() || corpus.negatives.is_empty() {
        return Err(Error::Usage("style corpus needs positive and negative pages".into()));
    }
    select_embeddings(&encoder.embed_pages(pages)?, corpus, tau)
}

/// `O: P_q → P_s`: target pages form `S⁺`, `neg_pages` form `S⁻`.
pub fn cross_domain_select(
    pages: &[&RgbImage],
    encoder: &StyleEncoder,
    target_pages: &[&RgbImage],
    neg_pages: &[&RgbImage],
    tau: f64,
) -> Result<Selection> {
    if target_pages.is_empty() {
        return Err(Error::Usage("cross-domain selection needs target pages".into()));
    }
    if neg_pages.is_empty() {
        return Err(Error::Usage("cross-domain selection needs negative pages".into()));
    }
    let corpus = StyleCorpus::embed(encoder, target_pages, neg_pages)?;
    select_embeddings(&encoder.embed_pages(pages)?, &corpus, tau)
}

/// Leave-nothing-out nearest-centroid classification accuracy of labelled
/// embeddings against class centroids computed from `train`.
pub fn nearest_centroid_accuracy(
    train_pos: &[Vec<f64>],
    train_neg: &[Vec<f64>],
    test_pos: &[Vec<f64>],
    test_neg: &[Vec<f64>],
) -> Result<f64> {
    if train_pos.is_empty() || train_neg.is_empty() || test_pos.len() + test_neg.len() == 0 {
        return Err(Error::Usage("centroid accuracy needs both classes".into()));
    }
    let centroid = |set: &[Vec<f64>]| {
        let mut c = vec![0.0; set[0].len()];
        for e in set {
            c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|v| *v /= set.len() as f64);
        c
    };
    let (cp, cn) = (centroid(train_pos), centroid(train_neg));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = test_pos.iter().filter(|e| dist(e, &cp) < dist(e, &cn)).count()
        + test_neg.iter().filter(|e| dist(e, &cn) < dist(e, &cp)).count();
    Ok(correct as f64 / (test_pos.len() + test_neg.len()) as f64)
}

const ENCODER_KIND: &str = "dsd-encoder";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    kind: String,
    config: EncoderConfig,
}

pub fn save_encoder(encoder: &StyleEncoder, path: impl AsRef<Path>) -> Result<()> {
    let meta = EncoderMeta {
        kind: ENCODER_KIND.into(),
        config: encoder.config.clone(),
    };
    encoder
        .store
        .save(path, serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<StyleEncoder> {
    let path = path.as_ref();
    let (store, meta) = ParameterStore::load(path)?;
    let parse = |message: String| Error::Parse {
        context: path.display().to_string(),
        message,
    };
    let meta: EncoderMeta = serde_json::from_value(meta).map_err(|e| parse(e.to_string()))?;
    if meta.kind != ENCODER_KIND {
        return Err(parse(format!("expected an encoder checkpoint, found `{}`", meta.kind)));
    }
    StyleEncoder::with_store(meta.config, store)
}
