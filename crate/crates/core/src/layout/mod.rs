//! Layout data model: boxes, pages, latent sampling, validation and geometry.
//!
//! Decoded coordinates are page fractions with the origin at the top-left
//! corner, so a box `(x, y, w, h)` covers `[x, x + w) × [y, y + h)`.

mod grammar;
mod io;

pub use grammar::{grammar_generate_corpus, GrammarStyle};
pub use io::{read_layouts, read_layouts_str, write_layouts, write_layouts_string};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of elements a page may hold.
pub const MAX_ELEMENTS: usize = 16;

/// Default minimum decoded width and height.
pub const MIN_SIZE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementClass {
    Figure,
    Table,
    Text,
}

impl ElementClass {
    pub const ALL: [ElementClass; 3] = [ElementClass::Figure, ElementClass::Table, ElementClass::Text];

    /// Stable serialization code: figure 0, table 1, text 2.
    pub fn code(self) -> u8 {
        match self {
            ElementClass::Figure => 0,
            ElementClass::Table => 1,
            ElementClass::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Value written into class-indexed masks (0 is background).
    pub fn mask_code(self) -> u8 {
        self.code() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::Figure => "figure",
            ElementClass::Table => "table",
            ElementClass::Text => "text",
        }
    }
}

impl std::fmt::Display for ElementClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutElement {
    pub class: ElementClass,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl LayoutElement {
    pub fn new(class: ElementClass, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { class, x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Area measured from the edges, so it agrees bit-for-bit with [`iou`].
    pub fn area(&self) -> f64 {
        (self.right() - self.x) * (self.bottom() - self.y)
    }

    /// Geometry as `[x, y, w, h]`.
    pub fn geometry(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PageLayout {
    pub elements: Vec<LayoutElement>,
    latent: bool,
}

impl PageLayout {
    /// A decoded (page-space) layout.
    pub fn decoded(elements: Vec<LayoutElement>) -> Result<Self> {
        if elements.len() > MAX_ELEMENTS {
            return Err(Error::Bounds(format!(
                "layout has {} elements, at most {MAX_ELEMENTS} allowed",
                elements.len()
            )));
        }
        Ok(Self {
            elements,
            latent: false,
        })
    }

    /// A latent layout whose geometry is unconstrained.
    pub fn latent(elements: Vec<LayoutElement>) -> Result<Self> {
        if elements.is_empty() || elements.len() > MAX_ELEMENTS {
            return Err(Error::Bounds(format!(
                "latent layout needs 1..={MAX_ELEMENTS} elements, got {}",
                elements.len()
            )));
        }
        Ok(Self {
            elements,
            latent: true,
        })
    }

    pub fn is_latent(&self) -> bool {
        self.latent
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ViolationKind {
    OutOfBounds,
    DegenerateSize,
    /// The reported element overlaps an earlier element `with`.
    ExcessiveOverlap { with: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub index: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Intersection over union of two boxes; 0 when both are empty.
pub fn iou(a: &LayoutElement, b: &LayoutElement) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Checks a decoded layout against bounds, minimum size and pairwise overlap.
pub fn validate_layout(layout: &PageLayout, overlap_threshold: f64) -> Result<Vec<ViolationReport>> {
    validate_layout_with(layout, overlap_threshold, MIN_SIZE, MIN_SIZE)
}

pub fn validate_layout_with(
    layout: &PageLayout,
    overlap_threshold: f64,
    min_w: f64,
    min_h: f64,
) -> Result<Vec<ViolationReport>> {
    if layout.is_latent() {
        return Err(Error::Usage("cannot validate a latent layout".into()));
    }
    if !(0.0..=1.0).contains(&overlap_threshold) {
        return Err(Error::Usage(format!(
            "overlap threshold {overlap_threshold} outside [0, 1]"
        )));
    }
    let mut reports = Vec::new();
    for (index, e) in layout.elements.iter().enumerate() {
        let excess = [-e.x, -e.y, e.right() - 1.0, e.bottom() - 1.0]
            .into_iter()
            .fold(0.0f64, f64::max);
        if excess > 0.0 {
            reports.push(ViolationReport {
                index,
                kind: ViolationKind::OutOfBounds,
                magnitude: excess,
            });
        }
        let shortfall = (min_w - e.w).max(min_h - e.h);
        if shortfall > 0.0 {
            reports.push(ViolationReport {
                index,
                kind: ViolationKind::DegenerateSize,
                magnitude: shortfall,
            });
        }
        for (other, prev) in layout.elements[..index].iter().enumerate() {
            let overlap = iou(prev, e);
            if overlap > overlap_threshold {
                reports.push(ViolationReport {
                    index,
                    kind: ViolationKind::ExcessiveOverlap { with: other },
                    magnitude: overlap,
                });
            }
        }
    }
    Ok(reports)
}

pub fn is_valid(layout: &PageLayout, overlap_threshold: f64) -> bool {
    matches!(validate_layout(layout, overlap_threshold), Ok(r) if r.is_empty())
}

/// Draws `n` latent elements: uniform class, standard-normal geometry.
pub fn sample_latent_layout(n: usize, seed: u64) -> Result<PageLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_layout_with(n, &mut rng)
}

pub fn sample_latent_layout_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PageLayout> {
    if n == 0 || n > MAX_ELEMENTS {
        return Err(Error::Bounds(format!(
            "latent element count {n} outside 1..={MAX_ELEMENTS}"
        )));
    }
    let elements = (0..n)
        .map(|_| {
            let class = ElementClass::ALL[rng.gen_range(0..3)];
            let mut g = || rng.sample::<f64, _>(StandardNormal);
            LayoutElement::new(class, g(), g(), g(), g())
        })
        .collect();
    PageLayout::latent(elements)
}

/// Boxes with uniformly random size and position, overlaps allowed.
///
/// Baseline for distribution comparisons and the source of low-quality
/// pages for the quality discriminator.
pub fn uniform_random_layout<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PageLayout> {
    uniform_random_layout_with(n, MIN_SIZE, MIN_SIZE, rng)
}

/// As [`uniform_random_layout`] with sizes drawn from `[min_w, 1)` and `[min_h, 1)`.
pub fn uniform_random_layout_with<R: Rng + ?Sized>(
    n: usize,
    min_w: f64,
    min_h: f64,
    rng: &mut R,
) -> Result<PageLayout> {
    if n > MAX_ELEMENTS {
        return Err(Error::Bounds(format!("{n} elements exceeds {MAX_ELEMENTS}")));
    }
    for (name, v) in [("min_w", min_w), ("min_h", min_h)] {
        if !(MIN_SIZE..1.0).contains(&v) {
            return Err(Error::Config(format!("{name} = {v} outside [{MIN_SIZE}, 1)")));
        }
    }
    let elements = (0..n)
        .map(|_| {
            let class = ElementClass::ALL[rng.gen_range(0..3)];
            let w = rng.gen_range(min_w..1.0);
            let h = rng.gen_range(min_h..1.0);
            let x = rng.gen_range(0.0..=(1.0 - w));
            let y = rng.gen_range(0.0..=(1.0 - h));
            LayoutElement::new(class, x, y, w, h)
        })
        .collect();
    PageLayout::decoded(elements)
}
