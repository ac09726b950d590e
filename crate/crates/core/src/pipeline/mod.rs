//! End-to-end dataset generation: grammar corpus, generator training,
//! quality and target-style discriminators, then rounds of
//! sample → decorate → quality filter → target selection until the quota of
//! selected pages is met.

mod metrics;
mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::generator::{
    load_generator, sample_layouts, save_critic, save_generator, train_adversarial, ElementCounts, GeneratorModel,
    ModelConfig, TrainConfig,
};
use crate::layout::{grammar_generate_corpus, uniform_random_layout_with, GrammarStyle, PageLayout};
use crate::render::{decorate_batch, sha256_hex, AssetLibrary, DatasetWriter, MIN_IMAGE_BOX, MIN_TEXT_HEIGHT};
use crate::style::{
    load_encoder, load_page, preprocess_all, read_corpus_file, reports_to_tsv, save_encoder, select_embeddings,
    train_dsd_thumbnails, CorpusRole, StyleCorpus, StyleEncoder, StyleTrainConfig,
};

pub use metrics::{compute_metrics, confusion_matrix, f1_score, metrics_from_slices, ClassMetrics, SegMetrics};
pub use stats::{mann_whitney_greater, welch_t_greater, TestResult};

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusStyle {
    Academic,
    Magazine,
    /// Academic and magazine pages interleaved, academic first.
    Mixed,
}

impl std::str::FromStr for CorpusStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "academic" => Ok(CorpusStyle::Academic),
            "magazine" => Ok(CorpusStyle::Magazine),
            "mixed" => Ok(CorpusStyle::Mixed),
            other => Err(Error::Usage(format!("unknown corpus style `{other}`"))),
        }
    }
}

/// Grammar layouts of `style`; a mixed corpus draws each family from its own
/// seed.
pub fn generate_corpus(style: CorpusStyle, size: usize, seed: u64) -> Vec<PageLayout> {
    match style {
        CorpusStyle::Academic => grammar_generate_corpus(GrammarStyle::Academic, size, seed),
        CorpusStyle::Magazine => grammar_generate_corpus(GrammarStyle::Magazine, size, seed),
        CorpusStyle::Mixed => {
            let a = grammar_generate_corpus(GrammarStyle::Academic, size.div_ceil(2), seed);
            let m = grammar_generate_corpus(GrammarStyle::Magazine, size / 2, seed.wrapping_add(1));
            let mut out = Vec::with_capacity(size);
            let (mut a, mut m) = (a.into_iter(), m.into_iter());
            for i in 0..size {
                out.extend(if i % 2 == 0 { a.next() } else { m.next() });
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub style: CorpusStyle,
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            style: CorpusStyle::Academic,
            size: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for PageSize {
    fn default() -> Self {
        Self {
            width: 480,
            height: 640,
        }
    }
}

/// Quality mode: designed grammar pages against overlap-heavy random pages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub train: StyleTrainConfig,
    pub tau: f64,
    /// Rendered pages per class when no corpus file is given.
    pub pages_per_class: usize,
    /// Corpus file with `positive` and `negative` pages.
    pub corpus: Option<PathBuf>,
    /// Pretrained encoder; skips training.
    pub encoder: Option<PathBuf>,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            train: StyleTrainConfig::default(),
            tau: 0.0,
            pages_per_class: 200,
            corpus: None,
            encoder: None,
        }
    }
}

/// Target mode: unlabeled target pages against the overlap-heavy pages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossDomainConfig {
    pub train: StyleTrainConfig,
    pub tau: f64,
    /// Grammar family rendered as the target set when no corpus file is given.
    pub target_style: CorpusStyle,
    pub pages_per_class: usize,
    /// Corpus file with `target` and `negative` pages.
    pub corpus: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    /// Score with the quality encoder instead of training a second one.
    pub reuse_quality_encoder: bool,
}

impl Default for CrossDomainConfig {
    fn default() -> Self {
        Self {
            train: StyleTrainConfig::default(),
            tau: 0.0,
            target_style: CorpusStyle::Academic,
            pages_per_class: 200,
            corpus: None,
            encoder: None,
            reuse_quality_encoder: false,
        }
    }
}

/// Versioned run configuration. Every key except `version` has a default;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub dlg: TrainConfig,
    /// Pretrained generator; skips corpus-based training.
    #[serde(default)]
    pub dlg_checkpoint: Option<PathBuf>,
    /// Directory with `images/`, `fonts/` and `corpus.txt`; built-in assets
    /// when absent.
    #[serde(default)]
    pub asset_dir: Option<PathBuf>,
    #[serde(default)]
    pub page: PageSize,
    #[serde(default)]
    pub quality: QualityConfig,
    #[serde(default)]
    pub cross_domain: CrossDomainConfig,
    /// Layouts generated per round.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_quota")]
    pub quota: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

fn default_batch() -> usize {
    600
}

fn default_quota() -> usize {
    300
}

fn default_max_rounds() -> usize {
    50
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: CorpusConfig::default(),
            dlg: TrainConfig::default(),
            dlg_checkpoint: None,
            asset_dir: None,
            page: PageSize::default(),
            quality: QualityConfig::default(),
            cross_domain: CrossDomainConfig::default(),
            batch: default_batch(),
            quota: default_quota(),
            max_rounds: default_max_rounds(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{context}: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "{context}: config version {} unsupported, expected {CONFIG_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        // Relative paths in the file resolve against its directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.dlg_checkpoint,
            &mut cfg.asset_dir,
            &mut cfg.quality.corpus,
            &mut cfg.quality.encoder,
            &mut cfg.cross_domain.corpus,
            &mut cfg.cross_domain.encoder,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.quota == 0 {
            return Err(Error::Config("quota must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        for p in [
            &self.dlg_checkpoint,
            &self.asset_dir,
            &self.quality.corpus,
            &self.quality.encoder,
            &self.cross_domain.corpus,
            &self.cross_domain.encoder,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "configured path does not exist"),
                ));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (u32, u32) {
        (self.page.width, self.page.height)
    }

    /// Smallest box, as page fractions, that every element class can be
    /// rendered into at this page size.
    pub fn min_box(&self) -> (f64, f64) {
        (
            (MIN_IMAGE_BOX + 1) as f64 / self.page.width as f64,
            (MIN_TEXT_HEIGHT + 1) as f64 / self.page.height as f64,
        )
    }

    /// Generator training settings with the configured seed and box floor.
    pub fn dlg_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.dlg.clone();
        cfg.seed = seed;
        self.raise_box_floor(&mut cfg.model);
        cfg
    }

    /// Lifts the model's smallest box to `min_box`, so a checkpoint trained
    /// for another page size still decorates at this one.
    pub fn raise_box_floor(&self, model: &mut ModelConfig) {
        let (min_w, min_h) = self.min_box();
        model.min_w = model.min_w.max(min_w);
        model.min_h = model.min_h.max(min_h);
    }

    pub fn assets(&self) -> Result<AssetLibrary> {
        let lib = match &self.asset_dir {
            Some(dir) => AssetLibrary::from_dir(dir, self.page.width, self.page.height)?,
            None => AssetLibrary::builtin(self.page.width, self.page.height),
        };
        lib.validate()?;
        Ok(lib)
    }
}

/// Seed for `stage` (and item `index`) of a run: the first eight bytes of
/// `SHA-256(master ‖ stage ‖ index)`, little-endian.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: usize,
    pub decorated: usize,
    pub accepted_quality: usize,
    pub accepted_cross_domain: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.generated += o.generated;
        self.decorated += o.decorated;
        self.accepted_quality += o.accepted_quality;
        self.accepted_cross_domain += o.accepted_cross_domain;
    }

    /// `cross ≤ quality ≤ decorated = generated`.
    pub fn consistent(&self) -> bool {
        self.accepted_cross_domain <= self.accepted_quality
            && self.accepted_quality <= self.decorated
            && self.decorated == self.generated
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sample_seed: u64,
    pub decorate_seed: u64,
    pub counts: Counts,
    pub cumulative: Counts,
    pub exported: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config_sha256: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub quota: usize,
    pub rounds: Vec<RoundRecord>,
    pub totals: Counts,
    /// `accepted_quality / decorated` over the run.
    pub quality_rate: f64,
    pub exported: usize,
    pub complete: bool,
    /// Output files relative to the run directory.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Wall-clock seconds per stage, kept apart from the manifest so that
/// manifests of identical runs are byte-identical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
    pub total: f64,
}

/// Files written by a run, with checksums.
struct Outputs {
    dir: PathBuf,
    checksums: BTreeMap<String, String>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.checksums.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Output path for `rel`, with its parent directory created.
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.checksums.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Data(e.to_string()))
}

/// Overlap-heavy pages standing in for poorly designed documents: uniform
/// random boxes with the corpus element-count distribution.
pub fn negative_layouts(count: usize, counts: &ElementCounts, min_box: (f64, f64), seed: u64) -> Result<Vec<PageLayout>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = counts.sample(&mut rng).max(1);
            uniform_random_layout_with(n, min_box.0, min_box.1, &mut rng)
        })
        .collect()
}

/// Decorates `layouts` and returns their style thumbnails.
pub fn render_thumbs(layouts: &[PageLayout], assets: &AssetLibrary, size: (u32, u32), seed: u64) -> Result<Vec<Tensor>> {
    let pages = decorate_batch(layouts, assets, size, seed)?;
    let refs: Vec<&RgbImage> = pages.iter().map(|p| &p.page).collect();
    preprocess_all(&refs)
}

/// Thumbnails of the pages listed under `role` in a corpus file.
pub fn corpus_thumbs(path: &Path, role: CorpusRole) -> Result<Vec<Tensor>> {
    let entries = read_corpus_file(path)?;
    let pages = entries
        .iter()
        .filter(|e| e.role == role)
        .map(|e| load_page(&e.path))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RgbImage> = pages.iter().collect();
    preprocess_all(&refs)
}

/// A trained (or loaded) encoder with its embedded reference sets.
pub struct StyleStage {
    pub encoder: StyleEncoder,
    pub corpus: StyleCorpus,
    pub losses: Vec<f64>,
}

fn style_stage(
    pos: &[Tensor],
    neg: &[Tensor],
    train: &StyleTrainConfig,
    pretrained: Option<&Path>,
    reuse: Option<&StyleEncoder>,
) -> Result<StyleStage> {
    let (encoder, losses) = match (reuse, pretrained) {
        (Some(e), _) => (e.clone(), Vec::new()),
        (None, Some(p)) => (load_encoder(p)?, Vec::new()),
        (None, None) => {
            let (e, r) = train_dsd_thumbnails(pos, neg, train)?;
            (e, r.losses)
        }
    };
    let corpus = StyleCorpus {
        positives: encoder.embed_thumbnails(pos)?,
        negatives: encoder.embed_thumbnails(neg)?,
        positive_sources: (0..pos.len()).map(|i| format!("positive:{i}")).collect(),
        negative_sources: (0..neg.len()).map(|i| format!("negative:{i}")).collect(),
    };
    Ok(StyleStage { encoder, corpus, losses })
}

/// Seeded stages of a run, each recorded in the manifest.
pub const STAGES: [&str; 9] = [
    "corpus",
    "dlg",
    "negative-layouts",
    "negative-render",
    "quality-render",
    "quality-train",
    "target-layouts",
    "target-render",
    "cross-train",
];

pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleMode {
    Quality,
    CrossDomain,
}

impl std::str::FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(StyleMode::Quality),
            "cross-domain" => Ok(StyleMode::CrossDomain),
            other => Err(Error::Usage(format!("unknown style mode `{other}`"))),
        }
    }
}

/// Positive and negative thumbnails for one discriminator: from the
/// configured corpus file, else rendered. Quality positives are the first
/// corpus layouts, target positives a fresh grammar corpus of the target
/// style, and negatives overlap-heavy random pages in both modes.
pub fn style_sets(
    config: &PipelineConfig,
    mode: StyleMode,
    corpus: &[PageLayout],
    assets: &AssetLibrary,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let master = config.seed;
    let size = config.size();
    let (file, pos_role, per_class) = match mode {
        StyleMode::Quality => (&config.quality.corpus, CorpusRole::Positive, config.quality.pages_per_class),
        StyleMode::CrossDomain => (
            &config.cross_domain.corpus,
            CorpusRole::Target,
            config.cross_domain.pages_per_class,
        ),
    };
    if let Some(path) = file {
        return Ok((corpus_thumbs(path, pos_role)?, corpus_thumbs(path, CorpusRole::Negative)?));
    }
    let counts = ElementCounts::from_corpus(corpus)?;
    let negatives = negative_layouts(per_class, &counts, config.min_box(), stage_seed(master, "negative-layouts"))?;
    let neg = render_thumbs(&negatives, assets, size, stage_seed(master, "negative-render"))?;
    let pos = match mode {
        StyleMode::Quality => {
            let n = per_class.min(corpus.len());
            render_thumbs(&corpus[..n], assets, size, stage_seed(master, "quality-render"))?
        }
        StyleMode::CrossDomain => {
            let target = generate_corpus(
                config.cross_domain.target_style,
                per_class,
                stage_seed(master, "target-layouts"),
            );
            render_thumbs(&target, assets, size, stage_seed(master, "target-render"))?
        }
    };
    Ok((pos, neg))
}

/// Runs the full flow into `out_dir` and returns the manifest written to
/// `out_dir/run_manifest.json`. Stage timings go to `out_dir/timing.json`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = Instant::now();
    let mut timing = Timing::default();
    let mut lap = {
        let mut last = Instant::now();
        move |timing: &mut Timing, stage: &str| {
            timing.stages.insert(stage.to_string(), last.elapsed().as_secs_f64());
            last = Instant::now();
        }
    };
    let master = config.seed;
    let seeds: BTreeMap<String, u64> = STAGES.iter().map(|s| (s.to_string(), stage_seed(master, s))).collect();
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        checksums: BTreeMap::new(),
    };
    out.write("config.json", config.to_json()?.as_bytes())?;
    let size = config.size();
    let assets = config.assets()?;

    // Corpus and generator.
    let corpus = generate_corpus(config.corpus.style, config.corpus.size, seeds["corpus"]);
    out.write("corpus/layouts.json", crate::layout::write_layouts_string(&corpus)?.as_bytes())?;
    let (gen, counts): (GeneratorModel, ElementCounts) = match &config.dlg_checkpoint {
        Some(path) => {
            let (mut gen, counts) = load_generator(path)?;
            config.raise_box_floor(&mut gen.config);
            (gen, counts)
        }
        None => {
            let (gen, critic, report) = train_adversarial(&corpus, &config.dlg_config(seeds["dlg"]))?;
            let counts = ElementCounts::from_corpus(&corpus)?;
            save_generator(&gen, &counts, out.path("models/generator.json")?)?;
            out.record("models/generator.json")?;
            save_critic(&critic, out.path("models/critic.json")?)?;
            out.record("models/critic.json")?;
            out.write("reports/dlg_train.jsonl", report.to_json_lines()?.as_bytes())?;
            (gen, counts)
        }
    };
    lap(&mut timing, "dlg");

    // Style discriminators.
    let quality = {
        let (pos, neg) = style_sets(config, StyleMode::Quality, &corpus, &assets)?;
        let train = StyleTrainConfig {
            seed: seeds["quality-train"],
            ..config.quality.train.clone()
        };
        style_stage(&pos, &neg, &train, config.quality.encoder.as_deref(), None)?
    };
    save_encoder(&quality.encoder, out.path("models/quality_encoder.json")?)?;
    out.record("models/quality_encoder.json")?;
    out.write("reports/quality_loss.json", json_bytes(&quality.losses)?.as_slice())?;
    lap(&mut timing, "quality-dsd");

    let cross = {
        let cd = &config.cross_domain;
        let (pos, neg) = style_sets(config, StyleMode::CrossDomain, &corpus, &assets)?;
        if pos.is_empty() {
            return Err(Error::Usage("cross-domain selection needs target pages".into()));
        }
        let train = StyleTrainConfig {
            seed: seeds["cross-train"],
            ..cd.train.clone()
        };
        let reuse = cd.reuse_quality_encoder.then_some(&quality.encoder);
        style_stage(&pos, &neg, &train, cd.encoder.as_deref(), reuse)?
    };
    save_encoder(&cross.encoder, out.path("models/cross_encoder.json")?)?;
    out.record("models/cross_encoder.json")?;
    out.write("reports/cross_loss.json", json_bytes(&cross.losses)?.as_slice())?;
    lap(&mut timing, "cross-dsd");

    // Quota loop.
    let mut writer = DatasetWriter::create(out_dir.join("dataset"))?;
    let mut rounds = Vec::new();
    let mut totals = Counts::default();
    let mut quality_tsv = (Vec::new(), Vec::new());
    let mut cross_tsv = (Vec::new(), Vec::new());
    for round in 0..config.max_rounds {
        let sample_seed = derive_seed(master, "sample", round as u64);
        let decorate_seed = derive_seed(master, "decorate", round as u64);
        let layouts = sample_layouts(&gen, config.batch, &counts, sample_seed)?;
        let pages = decorate_batch(&layouts, &assets, size, decorate_seed)?;
        let refs: Vec<&RgbImage> = pages.iter().map(|p| &p.page).collect();
        let thumbs = preprocess_all(&refs)?;
        let q = select_embeddings(&quality.encoder.embed_thumbnails(&thumbs)?, &quality.corpus, config.quality.tau)?;
        for (i, r) in q.reports.iter().enumerate() {
            quality_tsv.0.push(format!("r{round:02}_p{i:04}"));
            quality_tsv.1.push(*r);
        }
        let kept: Vec<Tensor> = q.accepted.iter().map(|&i| thumbs[i].clone()).collect();
        let c = select_embeddings(&cross.encoder.embed_thumbnails(&kept)?, &cross.corpus, config.cross_domain.tau)?;
        for (k, r) in c.reports.iter().enumerate() {
            cross_tsv.0.push(format!("r{round:02}_p{:04}", q.accepted[k]));
            cross_tsv.1.push(*r);
        }
        for &k in &c.accepted {
            if writer.len() < config.quota {
                writer.push(&pages[q.accepted[k]])?;
            }
        }
        let counts_r = Counts {
            generated: layouts.len(),
            decorated: pages.len(),
            accepted_quality: q.accepted.len(),
            accepted_cross_domain: c.accepted.len(),
        };
        totals.add(&counts_r);
        rounds.push(RoundRecord {
            round,
            sample_seed,
            decorate_seed,
            counts: counts_r,
            cumulative: totals,
            exported: writer.len(),
        });
        if writer.len() >= config.quota {
            break;
        }
    }
    lap(&mut timing, "rounds");
    let exported = writer.len();
    writer.finish()?;
    out.record("dataset/manifest.json")?;
    out.write("reports/quality_scores.tsv", reports_to_tsv(&quality_tsv.0, &quality_tsv.1)?.as_bytes())?;
    out.write("reports/cross_scores.tsv", reports_to_tsv(&cross_tsv.0, &cross_tsv.1)?.as_bytes())?;

    let manifest = RunManifest {
        format: "docforge-run".into(),
        version: 1,
        config_sha256: sha256_hex(config.to_json()?.as_bytes()),
        master_seed: master,
        seeds,
        quota: config.quota,
        quality_rate: if totals.decorated == 0 {
            0.0
        } else {
            totals.accepted_quality as f64 / totals.decorated as f64
        },
        rounds,
        totals,
        exported,
        complete: exported >= config.quota,
        checksums: out.checksums,
    };
    let path = out_dir.join(RUN_MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    timing.total = started.elapsed().as_secs_f64();
    let path = out_dir.join(TIMING_FILE);
    let text = serde_json::to_string_pretty(&timing).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if !manifest.complete {
        return Err(Error::QuotaShortfall {
            quota: config.quota,
            selected: exported,
            rounds: manifest.rounds.len(),
            manifest: Box::new(manifest),
        });
    }
    Ok(manifest)
}
