//! Renders one academic and one magazine grammar page and writes the page,
//! class mask and colored mask as PNG files.
//!
//! cargo run --release --example decorate_page -- [out-dir]

use docforge::layout::{grammar_generate_corpus, GrammarStyle};
use docforge::render::{decorate_batch, export_dataset, mask_boxes, AssetLibrary, Fill};

fn main() -> docforge::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "decorated".into());
    let size = (600, 800);
    let assets = AssetLibrary::builtin(size.0, size.1);
    let mut layouts = grammar_generate_corpus(GrammarStyle::Academic, 1, 3);
    layouts.extend(grammar_generate_corpus(GrammarStyle::Magazine, 1, 3));
    let pages = decorate_batch(&layouts, &assets, size, 42)?;
    for (i, p) in pages.iter().enumerate() {
        println!("page {i}: {} elements", p.log.len());
        for r in &p.log {
            match &r.fill {
                Fill::Image(c) => println!(
                    "  {:<6} {:>3}x{:<3} image {} crop at ({}, {}){}",
                    r.class.name(),
                    r.rect.w,
                    r.rect.h,
                    c.image,
                    c.source.x,
                    c.source.y,
                    if c.fallback { " (fallback)" } else { "" }
                ),
                Fill::Text(t) => println!(
                    "  {:<6} {:>3}x{:<3} {} {}px, {} lines",
                    r.class.name(),
                    r.rect.w,
                    r.rect.h,
                    t.font_name,
                    t.size,
                    t.lines
                ),
            }
        }
        println!("  mask regions: {}", mask_boxes(&p.mask).len());
    }
    let manifest = export_dataset(&pages, &out)?;
    println!("wrote {} pages to {out}", manifest.pages.len());
    Ok(())
}
