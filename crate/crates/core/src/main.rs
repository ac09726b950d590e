//! `docforge` command line. Every subcommand accepts `--config` (versioned
//! JSON, defaults when omitted) and `--seed`, and on failure prints one JSON
//! error record to stderr and exits 2 (usage), 3 (data), 4 (quota shortfall)
//! or 5 (numeric failure).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::RgbImage;
use serde::Serialize;

use docforge::generator::{
    load_generator, sample_layouts, save_critic, save_generator, train_adversarial, ElementCounts,
};
use docforge::layout::{read_layouts, write_layouts_string};
use docforge::pipeline::{
    compute_metrics, generate_corpus, run_pipeline, stage_seed, style_sets, CorpusStyle, PipelineConfig,
    StyleMode,
};
use docforge::render::{decorate_batch, export_dataset, load_mask, read_manifest, sha256_hex, verify_dataset};
use docforge::style::{
    load_encoder, load_page, read_corpus_file, reports_to_tsv, save_encoder, select_embeddings,
    train_dsd_thumbnails, CorpusRole, StyleCorpus, StyleTrainConfig,
};
use docforge::{Error, Result};

#[derive(Parser)]
#[command(name = "docforge", version, about = "Synthetic document layout dataset generator")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a grammar layout corpus.
    CorpusGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        style: Option<CorpusStyle>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the layout generator on a corpus.
    TrainDlg {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample layouts from a trained generator.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render layouts into a dataset directory.
    Decorate {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a style encoder.
    TrainDsd {
        #[arg(long, default_value = "quality")]
        mode: StyleMode,
        /// Corpus file; rendered pages are used when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Grammar corpus for the rendered sets; generated from the config when omitted.
        #[arg(long)]
        layouts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality-filter pages against positive/negative reference pages.
    Filter {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Dataset directory or directory of PNG pages.
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Select pages resembling target pages over negative pages.
    Select {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run the full generation pipeline.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation metrics between two class-index masks.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Recompute the checksums of a dataset directory.
    Verify {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Serialize)]
struct StepManifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    outputs: BTreeMap<String, String>,
}

struct Ctx {
    config: PipelineConfig,
    seed: u64,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(Self {
            seed: config.seed,
            config,
        })
    }

    /// Writes `<out>.manifest.json` (or `<dir>/step_manifest.json`) listing
    /// the checksums of `files`.
    fn manifest(&self, command: &str, at: &Path, files: &[PathBuf]) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            outputs.insert(f.display().to_string(), sha256_hex(&bytes));
        }
        let m = StepManifest {
            command,
            seed: self.seed,
            config_sha256: sha256_hex(self.config.to_json()?.as_bytes()),
            outputs,
        };
        let path = if at.is_dir() {
            at.join("step_manifest.json")
        } else {
            let mut name = at.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        };
        write(&path, serde_json::to_string_pretty(&m).map_err(|e| Error::Data(e.to_string()))?.as_bytes())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Pages of a dataset directory (manifest order) or the PNG files of any
/// other directory (name order).
fn read_pages(dir: &Path) -> Result<(Vec<String>, Vec<RgbImage>)> {
    let names: Vec<PathBuf> = if dir.join(docforge::render::MANIFEST_FILE).exists() {
        read_manifest(dir)?.pages.iter().map(|p| dir.join(&p.page)).collect()
    } else {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    };
    let pages = names.iter().map(load_page).collect::<Result<Vec<_>>>()?;
    Ok((names.iter().map(|p| p.display().to_string()).collect(), pages))
}

fn select_command(
    ctx: &Ctx,
    command: &str,
    roles: (CorpusRole, CorpusRole),
    encoder: &Path,
    corpus: &Path,
    pages: &Path,
    out: &Path,
    tau: f64,
) -> Result<()> {
    let encoder = load_encoder(encoder)?;
    let entries = read_corpus_file(corpus)?;
    let load = |role: CorpusRole| -> Result<Vec<RgbImage>> {
        entries.iter().filter(|e| e.role == role).map(|e| load_page(&e.path)).collect()
    };
    let (pos, neg) = (load(roles.0)?, load(roles.1)?);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Usage(format!(
            "{} needs {:?} and {:?} pages in {}",
            command,
            roles.0,
            roles.1,
            corpus.display()
        )));
    }
    let pos_refs: Vec<&RgbImage> = pos.iter().collect();
    let neg_refs: Vec<&RgbImage> = neg.iter().collect();
    let style = StyleCorpus::embed(&encoder, &pos_refs, &neg_refs)?;
    let (names, images) = read_pages(pages)?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let sel = select_embeddings(&encoder.embed_pages(&refs)?, &style, tau)?;
    write(out, reports_to_tsv(&names, &sel.reports)?.as_bytes())?;
    ctx.manifest(command, out, &[out.to_path_buf()])?;
    println!(
        "{command}: accepted {} of {} (rate {:.4}{})",
        sel.accepted.len(),
        names.len(),
        sel.rate,
        if sel.empty { ", empty input" } else { "" }
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let ctx = Ctx::load(&cli)?;
    let cfg = &ctx.config;
    match &cli.command {
        Command::CorpusGen { out, style, size } => {
            let style = style.unwrap_or(cfg.corpus.style);
            let size = size.unwrap_or(cfg.corpus.size);
            let corpus = generate_corpus(style, size, stage_seed(ctx.seed, "corpus"));
            write(out, write_layouts_string(&corpus)?.as_bytes())?;
            ctx.manifest("corpus-gen", out, &[out.clone()])?;
            println!("wrote {} layouts to {}", corpus.len(), out.display());
        }
        Command::TrainDlg { corpus, out, epochs } => {
            let layouts = read_layouts(corpus)?;
            let mut train = cfg.dlg_config(stage_seed(ctx.seed, "dlg"));
            if let Some(e) = epochs {
                train.epochs = *e;
            }
            mkdir(out)?;
            let (gen, critic, report) = train_adversarial(&layouts, &train)?;
            let counts = ElementCounts::from_corpus(&layouts)?;
            let files = [out.join("generator.json"), out.join("critic.json"), out.join("train.jsonl")];
            save_generator(&gen, &counts, &files[0])?;
            save_critic(&critic, &files[1])?;
            write(&files[2], report.to_json_lines()?.as_bytes())?;
            ctx.manifest("train-dlg", out, &files)?;
            let kept = report.selected_epoch.and_then(|e| report.epochs.get(e)).or(report.epochs.last());
            if let Some(r) = kept {
                println!(
                    "trained {} epochs, kept epoch {} with validity {:.3}",
                    report.epochs.len(),
                    r.epoch,
                    r.validity_rate
                );
            }
        }
        Command::Sample { model, count, out } => {
            let (gen, counts) = load_generator(model)?;
            let layouts = sample_layouts(&gen, *count, &counts, ctx.seed)?;
            write(out, write_layouts_string(&layouts)?.as_bytes())?;
            ctx.manifest("sample", out, &[out.clone()])?;
            println!("wrote {} layouts to {}", layouts.len(), out.display());
        }
        Command::Decorate { layouts, out } => {
            let layouts = read_layouts(layouts)?;
            let pages = decorate_batch(&layouts, &cfg.assets()?, cfg.size(), ctx.seed)?;
            let m = export_dataset(&pages, out)?;
            ctx.manifest("decorate", out, &[out.join(docforge::render::MANIFEST_FILE)])?;
            println!("wrote {} pages to {}", m.pages.len(), out.display());
        }
        Command::TrainDsd {
            mode,
            corpus,
            layouts,
            out,
        } => {
            let mut cfg = cfg.clone();
            match mode {
                StyleMode::Quality => cfg.quality.corpus = corpus.clone().or(cfg.quality.corpus),
                StyleMode::CrossDomain => cfg.cross_domain.corpus = corpus.clone().or(cfg.cross_domain.corpus),
            }
            let grammar = match layouts {
                Some(p) => read_layouts(p)?,
                None => generate_corpus(cfg.corpus.style, cfg.corpus.size, stage_seed(ctx.seed, "corpus")),
            };
            let (pos, neg) = style_sets(&cfg, *mode, &grammar, &cfg.assets()?)?;
            let (train, stage): (&StyleTrainConfig, &str) = match mode {
                StyleMode::Quality => (&cfg.quality.train, "quality-train"),
                StyleMode::CrossDomain => (&cfg.cross_domain.train, "cross-train"),
            };
            let train = StyleTrainConfig {
                seed: stage_seed(ctx.seed, stage),
                ..train.clone()
            };
            mkdir(out)?;
            let (encoder, report) = train_dsd_thumbnails(&pos, &neg, &train)?;
            let files = [out.join("encoder.json"), out.join("loss.json")];
            save_encoder(&encoder, &files[0])?;
            write(&files[1], serde_json::to_string(&report).map_err(|e| Error::Data(e.to_string()))?.as_bytes())?;
            ctx.manifest("train-dsd", out, &files)?;
            println!("trained on {}+{} pages, losses {:?}", pos.len(), neg.len(), report.losses);
        }
        Command::Filter {
            encoder,
            corpus,
            pages,
            out,
            tau,
        } => select_command(
            &ctx,
            "filter",
            (CorpusRole::Positive, CorpusRole::Negative),
            encoder,
            corpus,
            pages,
            out,
            tau.unwrap_or(cfg.quality.tau),
        )?,
        Command::Select {
            encoder,
            corpus,
            pages,
            out,
            tau,
        } => select_command(
            &ctx,
            "select",
            (CorpusRole::Target, CorpusRole::Negative),
            encoder,
            corpus,
            pages,
            out,
            tau.unwrap_or(cfg.cross_domain.tau),
        )?,
        Command::Run { out } => {
            let m = run_pipeline(cfg, out)?;
            println!(
                "{} rounds, {} generated, {} quality-accepted, {} selected, {} exported",
                m.rounds.len(),
                m.totals.generated,
                m.totals.accepted_quality,
                m.totals.accepted_cross_domain,
                m.exported
            );
        }
        Command::Metrics { pred, truth, classes } => {
            let m = compute_metrics(&load_mask(pred)?, &load_mask(truth)?, *classes)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(|e| Error::Data(e.to_string()))?);
        }
        Command::Verify { dir } => {
            let r = verify_dataset(dir)?;
            println!("{}", serde_json::to_string(&r).map_err(|e| Error::Data(e.to_string()))?);
            if !r.ok() {
                return Err(Error::Data(format!("{} files failed verification", r.mismatches.len())));
            }
        }
    }
    Ok(())
}

fn error_record(kind: &str, message: &str, exit_code: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit_code": exit_code }).to_string()
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim(), 2));
            std::process::exit(2);
        }
    };
    if let Err(e) = execute(cli) {
        let code = e.exit_code();
        eprintln!("{}", error_record(e.kind(), &e.to_string(), code));
        std::process::exit(code);
    }
}
