//! Scores a degraded copy of a rendered class mask against the original.
//!
//! cargo run --release --example metrics

use docforge::layout::{grammar_generate_corpus, GrammarStyle};
use docforge::pipeline::compute_metrics;
use docforge::render::{decorate_seeded, AssetLibrary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> docforge::Result<()> {
    let size = (480, 640);
    let assets = AssetLibrary::builtin(size.0, size.1);
    let layout = &grammar_generate_corpus(GrammarStyle::Magazine, 1, 9)[0];
    let truth = decorate_seeded(layout, &assets, size, 1)?.mask;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for noise in [0.0, 0.05, 0.2] {
        let mut pred = truth.clone();
        for p in pred.pixels_mut() {
            if rng.gen_bool(noise) {
                p.0[0] = rng.gen_range(0..4);
            }
        }
        let m = compute_metrics(&pred, &truth, 4)?;
        println!("noise {noise:.2}: accuracy {:.4}, macro F1 {:.4}", m.accuracy, m.macro_f1);
        for c in m.per_class.iter().filter(|c| c.present) {
            println!("  class {}: P {:.3} R {:.3} F1 {:.3}", c.class, c.precision, c.recall, c.f1);
        }
    }
    Ok(())
}
