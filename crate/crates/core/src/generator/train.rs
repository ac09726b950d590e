//! Adversarial training with the non-saturating logistic objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{box_areas, overlap_penalty, sample_layouts, wasserstein_1d, Decoded, CriticModel, ElementCounts, GeneratorModel, ModelConfig, SetBatch, FEATURES};
use crate::autodiff::{AdamConfig, Bindings, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::{is_valid, sample_latent_layout_with, PageLayout};

pub const MIN_CORPUS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip: f64,
    pub seed: u64,
    /// IoU above which two sampled boxes count as colliding when measuring
    /// the per-epoch validity rate.
    pub validity_overlap: f64,
    pub validity_samples: usize,
    /// Upper bound of the weight given to a random simplex point when
    /// softening real class one-hots, so real and generated class vectors
    /// share support.
    pub real_class_mix: f64,
    /// Standard deviation of Gaussian noise added to the geometry the critic
    /// sees, real and generated alike.
    pub instance_noise: f64,
    /// Critic learning rate as a multiple of `lr`.
    pub critic_lr_scale: f64,
    /// Target for real layouts in the critic loss (1 means no smoothing).
    pub real_label: f64,
    /// Weight of the pairwise IoU penalty added to the
    /// generator loss.
    pub overlap_weight: f64,
    /// IoU below which a pair of generated boxes is not penalized.
    pub overlap_margin: f64,
    /// Weight of the mean squared geometry pre-activation, which keeps the
    /// squashing sigmoids away from their flat tails.
    pub saturation_weight: f64,
    /// Decay of the exponential moving average of generator weights that
    /// is evaluated and returned; 0 returns the raw weights.
    pub ema_decay: f64,
    /// Both learning rates fall linearly over training to this fraction of
    /// their initial values.
    pub final_lr_scale: f64,
    /// Return the epoch snapshot with the highest validity rate, ties going
    /// to the lower box-area distance, instead of the last one. Needs
    /// `validity_samples > 0`.
    pub keep_best: bool,
    /// Fraction of training after which snapshots are eligible under
    /// `keep_best`. Early snapshots emit small scattered boxes that are
    /// valid but barely trained.
    pub best_from: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 80,
            batch: 64,
            lr: 1e-3,
            beta1: adam.beta1,
            beta2: adam.beta2,
            clip: 5.0,
            seed: 0,
            validity_overlap: 0.5,
            validity_samples: 256,
            real_class_mix: 0.2,
            instance_noise: 0.1,
            critic_lr_scale: 1.0,
            real_label: 0.9,
            overlap_weight: 8.0,
            overlap_margin: 0.0,
            saturation_weight: 0.1,
            ema_decay: 0.0,
            final_lr_scale: 0.1,
            keep_best: true,
            best_from: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub generator_loss: f64,
    pub critic_loss: f64,
    pub validity_rate: f64,
    /// 1-D Wasserstein distance between the box areas of the validity
    /// samples and those of the corpus.
    pub area_w1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose generator was returned under `keep_best`. The critic is
    /// always the last one.
    pub selected_epoch: Option<usize>,
}

impl TrainReport {
    /// One JSON record per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            let mut v = serde_json::to_value(r).map_err(|e| Error::Data(e.to_string()))?;
            v["seed"] = self.seed.into();
            v["selected"] = (self.selected_epoch == Some(r.epoch)).into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        Ok(out)
    }
}

/// Latent sets shaped like `counts`, as a padded batch.
pub struct LatentBatch;

impl LatentBatch {
    pub fn sample(counts: &[usize], rng: &mut ChaCha8Rng) -> Result<SetBatch> {
        let latents = counts
            .iter()
            .map(|&n| sample_latent_layout_with(n, rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PageLayout> = latents.iter().collect();
        SetBatch::from_layouts(&refs)
    }
}

/// Critic input for generated sets: class softmax (a differentiable stand-in
/// for the one-hot) next to the squashed geometry.
fn fake_features(
    g: &mut Graph,
    gen: &GeneratorModel,
    gp: &Bindings,
    latent: &SetBatch,
) -> Result<(Var, Decoded)> {
    let x = g.constant(latent.features.clone());
    let out = gen.forward(g, gp, x, &latent.keep)?;
    let probs = g.softmax(out.logits);
    let feats = g.concat_last(&[probs, out.geometry])?;
    let feats = g.reshape(feats, &[latent.batch(), latent.width(), FEATURES])?;
    Ok((feats, out))
}

/// Weights of the generator's auxiliary terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularizers {
    pub overlap: f64,
    pub overlap_margin: f64,
    pub saturation: f64,
}

/// `−log σ(D(G(z)))` averaged over the batch, plus the weighted mean summed
/// pairwise excess IoU of generated boxes and the weighted mean
/// squared geometry pre-activation over kept elements.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    g: &mut Graph,
    gen: &GeneratorModel,
    gp: &Bindings,
    critic: &CriticModel,
    cp: &Bindings,
    latent: &SetBatch,
    noise: Option<&Tensor>,
    reg: Regularizers,
) -> Result<Var> {
    let (mut fake, out) = fake_features(g, gen, gp, latent)?;
    if let Some(n) = noise {
        let n = g.constant(n.clone());
        fake = g.add(fake, n)?;
    }
    let logits = critic.forward(g, cp, fake, &latent.keep)?;
    let mut loss = g.bce_with_logits(logits, &vec![1.0; latent.batch()])?;
    if reg.overlap != 0.0 {
        let pen = overlap_penalty(
            g,
            out.geometry,
            latent.batch(),
            latent.width(),
            &latent.keep,
            reg.overlap_margin,
        )?;
        let pen = g.scale(pen, reg.overlap);
        loss = g.add(loss, pen)?;
    }
    if reg.saturation != 0.0 {
        let kept = g.row_mask(out.raw, &latent.keep)?;
        let sq = g.mul(kept, kept)?;
        let total = g.sum(sq);
        let rows = latent.keep.iter().filter(|&&k| k).count().max(1);
        let pen = g.scale(total, reg.saturation / (4 * rows) as f64);
        loss = g.add(loss, pen)?;
    }
    Ok(loss)
}

/// `−log σ(D(x)) − log(1 − σ(D(x̃)))`, each term averaged over its batch.
pub fn critic_loss(
    g: &mut Graph,
    critic: &CriticModel,
    cp: &Bindings,
    real: &SetBatch,
    fake: &SetBatch,
    real_label: f64,
) -> Result<Var> {
    let r = g.constant(real.features.clone());
    let f = g.constant(fake.features.clone());
    let lr = critic.forward(g, cp, r, &real.keep)?;
    let lf = critic.forward(g, cp, f, &fake.keep)?;
    let a = g.bce_with_logits(lr, &vec![real_label; real.batch()])?;
    let b = g.bce_with_logits(lf, &vec![0.0; fake.batch()])?;
    g.add(a, b)
}

/// Gaussian noise on the geometry columns of kept rows, zero elsewhere.
fn geometry_noise(batch: &SetBatch, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut data = vec![0.0; batch.features.numel()];
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for (row, &keep) in data.chunks_mut(FEATURES).zip(&batch.keep) {
            if keep {
                row[3..].iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
    }
    Tensor::new(batch.features.shape().to_vec(), data)
}

/// Mixes each real class one-hot with a uniform point of the simplex.
fn soften_classes(batch: &mut SetBatch, max_mix: f64, rng: &mut ChaCha8Rng) {
    if max_mix <= 0.0 {
        return;
    }
    let keep = batch.keep.clone();
    for (row, keep) in batch.features.data_mut().chunks_mut(FEATURES).zip(keep) {
        if !keep {
            continue;
        }
        let mix = rng.gen_range(0.0..max_mix);
        let e: [f64; 3] = [0, 1, 2].map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0).ln());
        let total: f64 = e.iter().sum();
        for c in 0..3 {
            row[c] = (1.0 - mix) * row[c] + mix * e[c] / total;
        }
    }
}

fn add_into(batch: &mut SetBatch, noise: &Tensor) {
    batch.features.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
}

fn finite(v: f64, epoch: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            epoch,
            message: format!("{what} loss is {v}"),
        })
    }
}

/// Trains a generator/critic pair on `corpus`, alternating one critic and one
/// generator update per batch. Fake batches copy the element counts of the
/// real batch they are compared against.
pub fn train_adversarial(
    corpus: &[PageLayout],
    config: &TrainConfig,
) -> Result<(GeneratorModel, CriticModel, TrainReport)> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::Data(format!(
            "training corpus has {} layouts, at least {MIN_CORPUS} required",
            corpus.len()
        )));
    }
    if corpus.iter().any(PageLayout::is_latent) {
        return Err(Error::Data("training corpus contains latent layouts".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let counts = ElementCounts::from_corpus(corpus)?;
    let pages: Vec<&PageLayout> = corpus.iter().filter(|l| !l.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = GeneratorModel::new(config.model.clone(), &mut rng)?;
    let mut critic = CriticModel::new(config.model.clone(), &mut rng)?;
    let adam = config.adam();
    let critic_adam = AdamConfig {
        lr: config.lr * config.critic_lr_scale,
        ..adam
    };
    if !(0.0..1.0).contains(&config.ema_decay) {
        return Err(Error::Config(format!("ema decay {} outside [0, 1)", config.ema_decay)));
    }
    let mut ema = gen.clone();
    let mut report = TrainReport {
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
        selected_epoch: None,
    };
    let corpus_areas = box_areas(corpus);
    let eval_seed = eval_seed(config.seed);
    let mut best: Option<(f64, f64, usize, GeneratorModel)> = None;

    if !(0.0..1.0).contains(&config.best_from) {
        return Err(Error::Config(format!("best_from {} outside [0, 1)", config.best_from)));
    }
    let first_eligible = (config.best_from * config.epochs as f64).floor() as usize;
    if !(0.0..=1.0).contains(&config.final_lr_scale) {
        return Err(Error::Config(format!(
            "final learning-rate scale {} outside [0, 1]",
            config.final_lr_scale
        )));
    }
    let total_steps = (config.epochs * pages.len().div_ceil(config.batch)).max(1);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..pages.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut g_sum, mut c_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let decay = 1.0 - (1.0 - config.final_lr_scale) * step as f64 / total_steps as f64;
            step += 1;
            let adam = AdamConfig {
                lr: adam.lr * decay,
                ..adam
            };
            let critic_adam = AdamConfig {
                lr: critic_adam.lr * decay,
                ..critic_adam
            };
            let batch: Vec<&PageLayout> = chunk.iter().map(|&i| pages[i]).collect();
            let mut real = SetBatch::from_layouts(&batch)?;
            soften_classes(&mut real, config.real_class_mix, &mut rng);
            let noise = geometry_noise(&real, config.instance_noise, &mut rng)?;
            add_into(&mut real, &noise);

            // Critic step on detached generator output.
            let latent = LatentBatch::sample(&real.counts, &mut rng)?;
            let mut fake = {
                let mut g = Graph::new();
                let gp = gen.store.bind(&mut g, false);
                let (f, _) = fake_features(&mut g, &gen, &gp, &latent)?;
                SetBatch {
                    features: g.value(f).clone(),
                    keep: latent.keep.clone(),
                    counts: latent.counts.clone(),
                }
            };
            let noise = geometry_noise(&fake, config.instance_noise, &mut rng)?;
            add_into(&mut fake, &noise);
            {
                let mut g = Graph::new();
                let cp = critic.store.bind(&mut g, true);
                let loss = critic_loss(&mut g, &critic, &cp, &real, &fake, config.real_label)?;
                c_sum += finite(g.value(loss).data()[0], epoch, "critic")?;
                let grads = g.backward(loss)?;
                critic.store.accumulate_grads(&cp, &grads);
                critic.store.clip_grad_norm(config.clip);
                critic.store.adam_step(&critic_adam)?;
            }

            // Generator step through a frozen critic.
            let latent = LatentBatch::sample(&real.counts, &mut rng)?;
            let noise = geometry_noise(&latent, config.instance_noise, &mut rng)?;
            {
                let mut g = Graph::new();
                let gp = gen.store.bind(&mut g, true);
                let cp = critic.store.bind(&mut g, false);
                let loss = generator_loss(
                    &mut g,
                    &gen,
                    &gp,
                    &critic,
                    &cp,
                    &latent,
                    Some(&noise),
                    Regularizers {
                        overlap: config.overlap_weight,
                        overlap_margin: config.overlap_margin,
                        saturation: config.saturation_weight,
                    },
                )?;
                g_sum += finite(g.value(loss).data()[0], epoch, "generator")?;
                let grads = g.backward(loss)?;
                gen.store.accumulate_grads(&gp, &grads);
                gen.store.clip_grad_norm(config.clip);
                gen.store.adam_step(&adam)?;
            }
            ema_update(&mut ema, &gen, config.ema_decay);
            steps += 1;
        }
        if !gen.store.is_finite() || !critic.store.is_finite() {
            return Err(Error::Numeric {
                epoch,
                message: "non-finite parameters".into(),
            });
        }
        let (validity_rate, area_w1) = if config.validity_samples == 0 {
            (0.0, 0.0)
        } else {
            let samples = sample_layouts(&ema, config.validity_samples, &counts, eval_seed)?;
            let valid = samples.iter().filter(|l| is_valid(l, config.validity_overlap)).count();
            let w1 = wasserstein_1d(&box_areas(&samples), &corpus_areas)?;
            (valid as f64 / samples.len() as f64, w1)
        };
        if config.keep_best && config.validity_samples > 0 && epoch >= first_eligible {
            let better = match &best {
                None => true,
                Some((v, w, _, _)) => validity_rate > *v || (validity_rate == *v && area_w1 < *w),
            };
            if better {
                best = Some((validity_rate, area_w1, epoch, ema.clone()));
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            generator_loss: g_sum / steps as f64,
            critic_loss: c_sum / steps as f64,
            validity_rate,
            area_w1,
        });
    }
    if let Some((_, _, epoch, snapshot)) = best {
        report.selected_epoch = Some(epoch);
        ema = snapshot;
    }
    Ok((ema, critic, report))
}

/// One latent draw for every epoch, so snapshots are compared on equal terms.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn ema_update(ema: &mut GeneratorModel, gen: &GeneratorModel, decay: f64) {
    for (name, p) in gen.store.iter() {
        let avg = ema.store.get_mut(name).expect("ema mirrors the generator");
        for (a, &v) in avg.data_mut().iter_mut().zip(p.value.data()) {
            *a = decay * *a + (1.0 - decay) * v;
        }
    }
}
