//! Trains a quality discriminator on clean grammar pages against
//! overlap-heavy random pages, then filters fresh pages of both kinds.
//!
//! cargo run --release --example quality_filter -- [epochs] [tau]

use docforge::generator::ElementCounts;
use docforge::layout::{grammar_generate_corpus, GrammarStyle};
use docforge::pipeline::negative_layouts;
use docforge::render::{decorate_batch, AssetLibrary};
use docforge::style::{quality_filter, train_dsd, StyleCorpus, StyleTrainConfig};
use image::RgbImage;

fn main() -> docforge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|a| a.parse().ok()).unwrap_or(6);
    let tau: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.0);
    let size = (480, 640);
    let assets = AssetLibrary::builtin(size.0, size.1);

    let clean = grammar_generate_corpus(GrammarStyle::Academic, 200, 1);
    let counts = ElementCounts::from_corpus(&clean)?;
    let heavy = negative_layouts(200, &counts, (17.0 / 640.0, 17.0 / 640.0), 2)?;
    let render = |l, seed| -> docforge::Result<Vec<RgbImage>> {
        Ok(decorate_batch(l, &assets, size, seed)?.into_iter().map(|p| p.page).collect())
    };
    let (clean, heavy) = (render(&clean, 10)?, render(&heavy, 20)?);
    let (clean_ref, heavy_ref): (Vec<&RgbImage>, Vec<&RgbImage>) = (clean.iter().collect(), heavy.iter().collect());

    let config = StyleTrainConfig {
        epochs,
        ..StyleTrainConfig::default()
    };
    let (encoder, report) = train_dsd(&clean_ref[..150], &heavy_ref[..150], &config)?;
    println!("contrastive loss per epoch {:?}", report.losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>());
    let corpus = StyleCorpus::embed(&encoder, &clean_ref[..150], &heavy_ref[..150])?;
    for (name, pages) in [("clean", &clean_ref[150..]), ("overlap-heavy", &heavy_ref[150..])] {
        let sel = quality_filter(pages, &encoder, &corpus, tau)?;
        let margin: f64 = sel.reports.iter().map(|r| r.margin).sum::<f64>() / sel.reports.len() as f64;
        println!("{name:<14} accepted {:>2}/{} (mean margin {margin:+.3})", sel.accepted.len(), pages.len());
    }
    Ok(())
}
