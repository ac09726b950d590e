//! Procedural layout grammars standing in for annotated training corpora.
//!
//! `Academic` pages are one or two text columns with a few column-aligned
//! figures and tables. `Magazine` pages carry large figures with text blocks
//! scattered into the remaining space. Every generated layout is overlap free.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ElementClass, LayoutElement, PageLayout, MAX_ELEMENTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrammarStyle {
    Academic,
    Magazine,
}

impl std::str::FromStr for GrammarStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "academic" => Ok(GrammarStyle::Academic),
            "magazine" => Ok(GrammarStyle::Magazine),
            other => Err(format!("unknown grammar style `{other}`")),
        }
    }
}

/// Generates `count` layouts; deterministic per `(style, seed)`.
pub fn grammar_generate_corpus(style: GrammarStyle, count: usize, seed: u64) -> Vec<PageLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match style {
            GrammarStyle::Academic => academic_page(&mut rng),
            GrammarStyle::Magazine => magazine_page(&mut rng),
        })
        .collect()
}

const BLOCK_GAP: f64 = 0.015;

fn academic_page<R: Rng>(rng: &mut R) -> PageLayout {
    let mx = rng.gen_range(0.07..0.10);
    let my = rng.gen_range(0.06..0.09);
    let columns = if rng.gen_bool(0.7) { 2 } else { 1 };
    let gap = 0.04;
    let col_w = (1.0 - 2.0 * mx - (columns - 1) as f64 * gap) / columns as f64;
    let bottom = 1.0 - my;

    let mut elements = Vec::new();
    let mut top = my;
    let mut floats = rng.gen_range(0..=2usize);

    // A float spanning both columns, placed above the column flow.
    if columns == 2 && floats > 0 && rng.gen_bool(0.3) {
        let class = float_class(rng);
        let h = float_height(class, rng);
        elements.push(LayoutElement::new(class, mx, top, 1.0 - 2.0 * mx, h));
        top += h + BLOCK_GAP;
        floats -= 1;
    }

    for col in 0..columns {
        let left = mx + col as f64 * (col_w + gap);
        let mut y = top;
        loop {
            if elements.len() >= MAX_ELEMENTS {
                break;
            }
            let remaining = bottom - y;
            if remaining < 0.04 {
                break;
            }
            if floats > 0 && rng.gen_bool(0.35) {
                let class = float_class(rng);
                let h = float_height(class, rng);
                if h <= remaining {
                    elements.push(LayoutElement::new(class, left, y, col_w, h));
                    y += h + BLOCK_GAP;
                    floats -= 1;
                    continue;
                }
            }
            let mut h = rng.gen_range(0.06..0.25f64);
            // Absorb a tail too short for another block.
            if remaining - h < 0.04 + BLOCK_GAP {
                h = remaining;
            }
            let h = h.min(remaining);
            elements.push(LayoutElement::new(ElementClass::Text, left, y, col_w, h));
            y += h + BLOCK_GAP;
        }
    }
    PageLayout::decoded(elements).expect("grammar respects the element cap")
}

fn float_class<R: Rng>(rng: &mut R) -> ElementClass {
    if rng.gen_bool(0.55) {
        ElementClass::Figure
    } else {
        ElementClass::Table
    }
}

fn float_height<R: Rng>(class: ElementClass, rng: &mut R) -> f64 {
    match class {
        ElementClass::Figure => rng.gen_range(0.12..0.30),
        _ => rng.gen_range(0.08..0.20),
    }
}

fn separated(a: &LayoutElement, b: &LayoutElement, gap: f64) -> bool {
    a.right() + gap <= b.x || b.right() + gap <= a.x || a.bottom() + gap <= b.y || b.bottom() + gap <= a.y
}

fn magazine_page<R: Rng>(rng: &mut R) -> PageLayout {
    let m = rng.gen_range(0.05..0.08);
    let span = 1.0 - 2.0 * m;
    let mut elements: Vec<LayoutElement> = Vec::new();

    // Hero figure.
    let w = rng.gen_range(0.55..1.0) * span;
    let h = rng.gen_range(0.30..0.55);
    let x = m + rng.gen_range(0.0..=(span - w));
    let y = m + rng.gen_range(0.0..=(span - h));
    elements.push(LayoutElement::new(ElementClass::Figure, x, y, w, h));

    let extra = rng.gen_range(0..=2usize);
    let mut tries = 0;
    let mut placed = 0;
    while placed < extra && tries < 200 {
        tries += 1;
        let class = if rng.gen_bool(0.2) {
            ElementClass::Table
        } else {
            ElementClass::Figure
        };
        let w = rng.gen_range(0.25..0.6) * span;
        let h = rng.gen_range(0.15..0.35);
        let cand = LayoutElement::new(
            class,
            m + rng.gen_range(0.0..=(span - w)),
            m + rng.gen_range(0.0..=(span - h)),
            w,
            h,
        );
        if elements.iter().all(|e| separated(e, &cand, BLOCK_GAP)) {
            elements.push(cand);
            placed += 1;
        }
    }

    let target_text = rng.gen_range(2..=6usize);
    let mut text = 0;
    tries = 0;
    while (text < target_text || text == 0) && tries < 2000 && elements.len() < MAX_ELEMENTS {
        tries += 1;
        let w = rng.gen_range(0.15..0.6) * span;
        let h = rng.gen_range(0.05..0.25);
        let cand = LayoutElement::new(
            ElementClass::Text,
            m + rng.gen_range(0.0..=(span - w)),
            m + rng.gen_range(0.0..=(span - h)),
            w,
            h,
        );
        if elements.iter().all(|e| separated(e, &cand, BLOCK_GAP)) {
            elements.push(cand);
            text += 1;
        }
    }
    PageLayout::decoded(elements).expect("grammar respects the element cap")
}
