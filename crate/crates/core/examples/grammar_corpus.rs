//! Generates academic and magazine grammar corpora, checks them and prints
//! element statistics.
//!
//! cargo run --release --example grammar_corpus -- [count] [out.json]

use docforge::layout::{grammar_generate_corpus, validate_layout, write_layouts, ElementClass, GrammarStyle};

fn main() -> docforge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let count = args.first().and_then(|a| a.parse().ok()).unwrap_or(500);
    for style in [GrammarStyle::Academic, GrammarStyle::Magazine] {
        let corpus = grammar_generate_corpus(style, count, 1);
        let mut per_class = [0usize; 3];
        let mut area = 0.0;
        let mut violations = 0;
        for l in &corpus {
            violations += validate_layout(l, 0.0)?.len();
            for e in &l.elements {
                per_class[e.class.code() as usize] += 1;
                area += e.area();
            }
        }
        let n: usize = per_class.iter().sum();
        println!("{style:?}: {} layouts, {:.2} elements each, mean box area {:.4}", corpus.len(), n as f64 / corpus.len() as f64, area / n as f64);
        for c in ElementClass::ALL {
            println!("  {:<6} {:5.1}%", c.name(), 100.0 * per_class[c.code() as usize] as f64 / n as f64);
        }
        println!("  overlapping pairs or bound violations: {violations}");
        if let Some(path) = args.get(1) {
            let path = format!("{}_{}", format!("{style:?}").to_lowercase(), path);
            write_layouts(&corpus, &path)?;
            println!("  wrote {path}");
        }
    }
    Ok(())
}
