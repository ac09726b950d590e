//! Trains the layout generator on an academic grammar corpus and compares
//! sampled box areas with the corpus and with uniform random boxes.
//!
//! cargo run --release --example train_generator -- [epochs] [corpus-size] [seed] [config.json]
//!
//! The optional JSON file overrides training settings; the first three
//! arguments win over its `epochs` and `seed`.

use std::time::Instant;

use docforge::generator::{
    box_areas, sample_layouts, train_adversarial, wasserstein_1d, ElementCounts, TrainConfig,
};
use docforge::layout::{
    grammar_generate_corpus, is_valid, uniform_random_layout, validate_layout, GrammarStyle, ViolationKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> docforge::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let args: Vec<u64> = raw.iter().filter_map(|a| a.parse().ok()).collect();
    let base: TrainConfig = match raw.iter().find(|a| a.ends_with(".json")) {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| docforge::Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| docforge::Error::Parse {
                context: path.clone(),
                message: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    let epochs = args.first().copied().unwrap_or(40) as usize;
    let size = args.get(1).copied().unwrap_or(2000) as usize;
    let seed = args.get(2).copied().unwrap_or(7);

    let corpus = grammar_generate_corpus(GrammarStyle::Academic, size, seed);
    let config = TrainConfig {
        epochs,
        seed,
        ..base
    };
    let start = Instant::now();
    let (gen, _critic, report) = train_adversarial(&corpus, &config)?;
    for r in &report.epochs {
        println!(
            "epoch {:3}  g {:.4}  d {:.4}  valid {:.3}  W1 {:.4}",
            r.epoch, r.generator_loss, r.critic_loss, r.validity_rate, r.area_w1
        );
    }
    if let Some(e) = report.selected_epoch {
        println!("kept epoch {e}");
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    let counts = ElementCounts::from_corpus(&corpus)?;
    let samples = sample_layouts(&gen, 1000, &counts, seed + 1)?;
    for e in &samples[0].elements {
        println!("  {:<6} x {:.3} y {:.3} w {:.3} h {:.3}", e.class.name(), e.x, e.y, e.w, e.h);
    }
    for thr in [0.05, 0.1, 0.3, 0.5] {
        let valid = samples.iter().filter(|l| is_valid(l, thr)).count();
        println!("validity at IoU {thr}: {:.3}", valid as f64 / samples.len() as f64);
    }
    let mut pairs = std::collections::BTreeMap::new();
    for l in &samples {
        for r in validate_layout(l, 0.5)? {
            let name = match r.kind {
                ViolationKind::ExcessiveOverlap { with } => {
                    let mut k = [l.elements[with].class.name(), l.elements[r.index].class.name()];
                    k.sort();
                    k.join("/")
                }
                other => format!("{other:?}"),
            };
            *pairs.entry(name).or_insert(0usize) += 1;
        }
    }
    println!("violations at IoU 0.5: {pairs:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let uniform = samples
        .iter()
        .map(|l| uniform_random_layout(l.len(), &mut rng))
        .collect::<docforge::Result<Vec<_>>>()?;
    let reference = box_areas(&corpus);
    println!("W1(generated, corpus) = {:.4}", wasserstein_1d(&box_areas(&samples), &reference)?);
    println!("W1(uniform, corpus)   = {:.4}", wasserstein_1d(&box_areas(&uniform), &reference)?);
    Ok(())
}
