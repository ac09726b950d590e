//! Selects, from a pool of mixed academic and magazine pages, those closer
//! to an academic target set than to a magazine reference set.
//!
//! cargo run --release --example cross_domain -- [epochs]

use docforge::layout::{grammar_generate_corpus, GrammarStyle};
use docforge::pipeline::mann_whitney_greater;
use docforge::render::{decorate_batch, AssetLibrary};
use docforge::style::{cross_domain_select, train_dsd, StyleTrainConfig};
use image::RgbImage;

fn main() -> docforge::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let size = (480, 640);
    let assets = AssetLibrary::builtin(size.0, size.1);
    let render = |style, n, seed: u64| -> docforge::Result<Vec<RgbImage>> {
        let layouts = grammar_generate_corpus(style, n, seed);
        Ok(decorate_batch(&layouts, &assets, size, seed * 1000)?.into_iter().map(|p| p.page).collect())
    };
    let target = render(GrammarStyle::Academic, 120, 1)?;
    let negatives = render(GrammarStyle::Magazine, 120, 2)?;
    let mut pool = render(GrammarStyle::Academic, 100, 3)?;
    pool.extend(render(GrammarStyle::Magazine, 100, 4)?);
    let (target, negatives, pool): (Vec<&RgbImage>, Vec<&RgbImage>, Vec<&RgbImage>) =
        (target.iter().collect(), negatives.iter().collect(), pool.iter().collect());

    let config = StyleTrainConfig {
        epochs,
        ..StyleTrainConfig::default()
    };
    let (encoder, _) = train_dsd(&target, &negatives, &config)?;
    let sel = cross_domain_select(&pool, &encoder, &target, &negatives, 0.0)?;
    let academic = sel.accepted.iter().filter(|&&i| i < 100).count();
    println!(
        "selected {} of {} pages ({academic} academic, {} magazine)",
        sel.accepted.len(),
        pool.len(),
        sel.accepted.len() - academic
    );
    let s_plus = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| sel.reports[i].s_plus).collect() };
    let (a, r) = (s_plus(&sel.accepted), s_plus(&sel.rejected));
    if !a.is_empty() && !r.is_empty() {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let test = mann_whitney_greater(&a, &r)?;
        println!(
            "target similarity: selected {:.3}, rejected {:.3}, one-sided Mann-Whitney p = {:.2e}",
            mean(&a),
            mean(&r),
            test.p_value
        );
    }
    Ok(())
}
