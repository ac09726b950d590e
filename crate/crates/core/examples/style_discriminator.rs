//! Trains the page-style encoder on rendered academic and magazine pages and
//! reports held-out nearest-centroid accuracy.
//!
//! cargo run --release --example style_discriminator -- [epochs] [seed]

use std::time::Instant;

use docforge::layout::{grammar_generate_corpus, GrammarStyle};
use docforge::render::{decorate_batch, AssetLibrary};
use docforge::style::{
    cosine, nearest_centroid_accuracy, preprocess_all, train_dsd_thumbnails, StyleTrainConfig,
};

const TRAIN: usize = 200;
const HELD_OUT: usize = 50;

fn main() -> docforge::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(10) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let size = (480, 640);
    let assets = AssetLibrary::builtin(size.0, size.1);

    let start = Instant::now();
    let mut thumbs = Vec::new();
    for (k, style) in [GrammarStyle::Academic, GrammarStyle::Magazine].into_iter().enumerate() {
        let layouts = grammar_generate_corpus(style, TRAIN + HELD_OUT, seed * 10 + k as u64);
        let pages = decorate_batch(&layouts, &assets, size, seed * 1000 + k as u64 * 500)?;
        let refs: Vec<_> = pages.iter().map(|p| &p.page).collect();
        thumbs.push(preprocess_all(&refs)?);
    }
    println!("rendered {} pages in {:.1}s", 2 * (TRAIN + HELD_OUT), start.elapsed().as_secs_f64());

    let (academic, magazine) = (&thumbs[0], &thumbs[1]);
    let config = StyleTrainConfig {
        epochs,
        seed,
        ..StyleTrainConfig::default()
    };
    let start = Instant::now();
    let (encoder, report) = train_dsd_thumbnails(&academic[..TRAIN], &magazine[..TRAIN], &config)?;
    for (i, l) in report.losses.iter().enumerate() {
        println!("epoch {i:3}  loss {l:.4}");
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    let embed = |t: &[docforge::autodiff::Tensor]| encoder.embed_thumbnails(t);
    let (tp, tn) = (embed(&academic[..TRAIN])?, embed(&magazine[..TRAIN])?);
    let (hp, hn) = (embed(&academic[TRAIN..])?, embed(&magazine[TRAIN..])?);
    let acc = nearest_centroid_accuracy(&tp, &tn, &hp, &hn)?;
    println!("held-out nearest-centroid accuracy: {acc:.3}");

    let mean_pairs = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += cosine(x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    println!(
        "mean cosine: academic/academic {:.3}, magazine/magazine {:.3}, across {:.3}",
        mean_pairs(&hp, &hp),
        mean_pairs(&hn, &hn),
        mean_pairs(&hp, &hn)
    );
    Ok(())
}
