//! Candidate images, font faces, text corpus and text colors.

use std::path::Path;
use std::sync::Arc;

use ab_glyph::{Font, FontArc, PxScale, ScaleFont};
use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_IMAGES: usize = 20;
pub const MIN_FONTS: usize = 2;
pub const MIN_CORPUS_CHARS: usize = 10_000;
pub const MIN_CONTRAST: f64 = 3.0;

/// A text face: the built-in 8×8 bitmap (regular or bold) or a TrueType outline.
#[derive(Clone)]
pub enum FontFace {
    Bitmap { name: String, bold: bool },
    Outline { name: String, font: Arc<FontArc> },
}

impl std::fmt::Debug for FontFace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FontFace {
    pub fn name(&self) -> &str {
        match self {
            FontFace::Bitmap { name, .. } | FontFace::Outline { name, .. } => name,
        }
    }

    /// Horizontal advance of `ch` at pixel size `size`.
    pub fn advance(&self, ch: char, size: u32) -> f64 {
        match self {
            FontFace::Bitmap { .. } => bitmap_advance(size) as f64,
            FontFace::Outline { font, .. } => {
                let scaled = font.as_scaled(PxScale::from(size as f32));
                scaled.h_advance(font.glyph_id(ch)) as f64
            }
        }
    }

    pub fn text_width(&self, text: &str, size: u32) -> f64 {
        text.chars().map(|c| self.advance(c, size)).sum()
    }

    /// Draws `ch` with its cell's top-left corner at `(x, top)`.
    pub fn draw(&self, canvas: &mut RgbImage, ch: char, x: f64, top: i64, size: u32, color: [u8; 3]) {
        match self {
            FontFace::Bitmap { bold, .. } => draw_bitmap(canvas, ch, x.round() as i64, top, size, *bold, color),
            FontFace::Outline { font, .. } => {
                let scale = PxScale::from(size as f32);
                let ascent = font.as_scaled(scale).ascent();
                let glyph = font
                    .glyph_id(ch)
                    .with_scale_and_position(scale, ab_glyph::point(x as f32, top as f32 + ascent));
                if let Some(outlined) = font.outline_glyph(glyph) {
                    let b = outlined.px_bounds();
                    outlined.draw(|gx, gy, cov| {
                        let px = b.min.x as i64 + gx as i64;
                        let py = b.min.y as i64 + gy as i64;
                        blend(canvas, px, py, color, cov as f64);
                    });
                }
            }
        }
    }
}

pub fn bitmap_advance(size: u32) -> u32 {
    (size * 3).div_ceil(4).max(1)
}

fn blend(canvas: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= canvas.width() as i64 || y >= canvas.height() as i64 {
        return;
    }
    let a = alpha.clamp(0.0, 1.0);
    let p = canvas.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        p.0[c] = (p.0[c] as f64 * (1.0 - a) + color[c] as f64 * a).round() as u8;
    }
}

/// Nearest-neighbour scaling of the 8×8 glyph into an `advance × size` cell.
/// Glyph ink occupies the upper 80% of the cell, leaving a descender gap.
fn draw_bitmap(canvas: &mut RgbImage, ch: char, x: i64, top: i64, size: u32, bold: bool, color: [u8; 3]) {
    let Some(rows) = font8x8::BASIC_FONTS.get(ch) else { return };
    let cell_w = bitmap_advance(size) as i64;
    let ink_h = ((size as i64) * 4 / 5).max(1);
    for py in 0..ink_h {
        let row = rows[(py * 8 / ink_h) as usize];
        for px in 0..cell_w {
            let col = (px * 8 / cell_w) as u32;
            let mut on = row >> col & 1 == 1;
            if bold && col > 0 {
                on |= row >> (col - 1) & 1 == 1;
            }
            if on {
                blend(canvas, x + px, top + py, color, 1.0);
            }
        }
    }
}

/// WCAG relative luminance of an sRGB color.
pub fn relative_luminance(c: [u8; 3]) -> f64 {
    let lin = |v: u8| {
        let s = v as f64 / 255.0;
        if s <= 0.03928 {
            s / 12.92
        } else {
            ((s + 0.055) / 1.055).powf(2.4)
        }
    };
    0.2126 * lin(c[0]) + 0.7152 * lin(c[1]) + 0.0722 * lin(c[2])
}

pub fn contrast_against_white(c: [u8; 3]) -> f64 {
    1.05 / (relative_luminance(c) + 0.05)
}

#[derive(Clone, Debug)]
pub struct AssetLibrary {
    pub images: Vec<RgbImage>,
    pub fonts: Vec<FontFace>,
    pub sentences: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

const BUILTIN_SEED: u64 = 0x00D0_CF0E;

const WORDS: &[&str] = &[
    "the", "model", "page", "layout", "region", "document", "analysis", "figure", "table", "method",
    "results", "shows", "data", "training", "network", "images", "text", "approach", "proposed", "based",
    "on", "of", "in", "and", "with", "for", "we", "our", "this", "that", "is", "are", "by", "from",
    "each", "which", "can", "between", "performance", "accuracy", "segmentation", "features", "set",
    "values", "section", "experiment", "baseline", "dataset", "annotation", "labels", "detection",
    "structure", "blocks", "columns", "scanned", "printed", "articles", "magazine", "journal", "report",
    "evaluation", "metric", "precision", "recall", "score", "higher", "lower", "compared", "against",
    "previous", "work", "methods", "significant", "improvement", "domain", "target", "source", "style",
    "visual", "appearance", "samples", "generated", "synthetic", "real", "large", "small", "number",
    "several", "different", "similar", "while", "however", "therefore", "thus", "also", "both", "all",
    "these", "those", "when", "where", "after", "before", "during", "under", "over", "within", "using",
    "trained", "learned", "observed", "reported", "described", "illustrated", "presented", "computed",
    "average", "mean", "variance", "distribution", "random", "boxes", "pixels", "color", "font", "size",
    "line", "paragraph", "caption", "title", "heading", "body", "margin", "width", "height", "area",
    "position", "order", "rule", "constraint", "quality", "selection", "filter", "corpus", "pipeline",
    "stage", "input", "output", "encoder", "decoder", "attention", "embedding", "loss", "gradient",
];

fn builtin_sentences() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(BUILTIN_SEED);
    let mut out = Vec::new();
    let mut chars = 0;
    while chars < 2 * MIN_CORPUS_CHARS {
        let n = rng.gen_range(6..=16);
        let mut words: Vec<String> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect();
        let mut first = words[0].chars();
        let head: String = first.next().into_iter().flat_map(char::to_uppercase).chain(first).collect();
        words[0] = head;
        if n > 9 && rng.gen_bool(0.4) {
            let k = rng.gen_range(3..n - 3);
            words[k].push(',');
        }
        let s = words.join(" ") + ".";
        chars += s.len() + 1;
        out.push(s);
    }
    out
}

fn builtin_palette() -> Vec<[u8; 3]> {
    vec![
        [0, 0, 0],
        [51, 51, 51],
        [31, 58, 147],
        [139, 0, 0],
        [27, 94, 32],
        [74, 20, 140],
        [93, 64, 55],
    ]
}

fn builtin_fonts() -> Vec<FontFace> {
    vec![
        FontFace::Bitmap {
            name: "bitmap-regular".into(),
            bold: false,
        },
        FontFace::Bitmap {
            name: "bitmap-bold".into(),
            bold: true,
        },
    ]
}

/// Image sizes such that every extent in `[8, limit]` has a size within
/// `[extent, factor·extent]`: each step is the largest integer that still
/// covers every extent above the previous one.
pub fn covering_sizes(limit: u32, factor: f64) -> Vec<u32> {
    let mut sizes = vec![8u32];
    while *sizes.last().expect("nonempty") < limit {
        let prev = *sizes.last().expect("nonempty");
        let next = (factor * (prev + 1) as f64).floor() as u32;
        sizes.push(next.max(prev + 1));
    }
    sizes
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|i| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8)
}

fn random_color<R: Rng>(rng: &mut R) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Smooth two-color gradient with a few soft blobs.
fn photo_texture<R: Rng>(w: u32, h: u32, rng: &mut R) -> RgbImage {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, [u8; 3])> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.08..0.35),
                random_color(rng),
            )
        })
        .collect();
    let freq: f64 = rng.gen_range(3.0..12.0);
    RgbImage::from_fn(w, h, |x, y| {
        let u = x as f64 / w as f64;
        let v = y as f64 / h as f64;
        let t = 0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) * 1.4;
        let mut c = lerp(c0, c1, t + 0.05 * (freq * u).sin() * (freq * v).cos());
        for &(bx, by, r, bc) in &blobs {
            let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (r * r);
            if d2 < 1.0 {
                c = lerp(c, bc, 0.8 * (1.0 - d2));
            }
        }
        Rgb(c)
    })
}

/// Ruled grid with a shaded header row and short dark cell marks.
fn table_texture<R: Rng>(w: u32, h: u32, rng: &mut R) -> RgbImage {
    let rows = (h / rng.gen_range(12..24)).max(1);
    let cols = (w / rng.gen_range(30..80)).max(1);
    let header = lerp([255, 255, 255], random_color(rng), 0.3);
    let ink = [rng.gen_range(0..60), rng.gen_range(0..60), rng.gen_range(0..60)];
    let fill: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.3..0.9)).collect();
    RgbImage::from_fn(w, h, |x, y| {
        let r = (y * rows / h).min(rows - 1);
        let c = (x * cols / w).min(cols - 1);
        let (y0, x0) = (r * h / rows, c * w / cols);
        let (ch, cw) = (((r + 1) * h / rows) - y0, ((c + 1) * w / cols) - x0);
        if y == y0 || x == x0 || y + 1 == h || x + 1 == w {
            return Rgb([90, 90, 90]);
        }
        let (ly, lx) = (y - y0, x - x0);
        let mark = ly > ch / 3 && ly < ch * 2 / 3 && lx > 2 && (lx as f64) < cw as f64 * fill[(r * cols + c) as usize];
        if mark {
            Rgb(ink)
        } else if r == 0 {
            Rgb(header)
        } else {
            Rgb([255, 255, 255])
        }
    })
}

impl AssetLibrary {
    /// Procedural library for pages of `width × height` pixels. Image sizes
    /// cover every legal paste area on such a page, so fallback rescaling is
    /// only needed for boxes narrower or shorter than 8 px.
    pub fn builtin(width: u32, height: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BUILTIN_SEED);
        let mut images = Vec::new();
        for &h in &covering_sizes(height, 2.0) {
            for &w in &covering_sizes(width, 1.5) {
                images.push(photo_texture(w, h, &mut rng));
                images.push(table_texture(w, h, &mut rng));
            }
        }
        Self {
            images,
            fonts: builtin_fonts(),
            sentences: builtin_sentences(),
            palette: builtin_palette(),
        }
    }

    /// Loads `dir/images/*.png`, `dir/fonts/*.ttf` and `dir/corpus.txt`.
    /// Missing fonts, corpus or images fall back to the built-in set.
    pub fn from_dir(dir: impl AsRef<Path>, width: u32, height: u32) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "asset directory not found"),
            ));
        }
        let mut lib = Self::builtin(width, height);
        let images_dir = dir.join("images");
        if images_dir.is_dir() {
            let mut images = Vec::new();
            for path in sorted_entries(&images_dir, "png")? {
                let img = image::open(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                images.push(img.to_rgb8());
            }
            lib.images = images;
        }
        let fonts_dir = dir.join("fonts");
        if fonts_dir.is_dir() {
            for path in sorted_entries(&fonts_dir, "ttf")? {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let font = FontArc::try_from_vec(bytes).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                lib.fonts.push(FontFace::Outline {
                    name,
                    font: Arc::new(font),
                });
            }
        }
        let corpus = dir.join("corpus.txt");
        if corpus.is_file() {
            let text = std::fs::read_to_string(&corpus).map_err(|e| Error::io(&corpus, e))?;
            lib.sentences = split_sentences(&text);
        }
        lib.validate()?;
        Ok(lib)
    }

    pub fn corpus_chars(&self) -> usize {
        self.sentences.iter().map(|s| s.chars().count() + 1).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() < MIN_IMAGES {
            return Err(Error::Config(format!(
                "asset library has {} images, at least {MIN_IMAGES} required",
                self.images.len()
            )));
        }
        if self.fonts.len() < MIN_FONTS {
            return Err(Error::Config(format!("asset library needs at least {MIN_FONTS} fonts")));
        }
        if self.corpus_chars() < MIN_CORPUS_CHARS {
            return Err(Error::Config(format!(
                "text corpus has {} characters, at least {MIN_CORPUS_CHARS} required",
                self.corpus_chars()
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("empty text palette".into()));
        }
        if let Some(c) = self.palette.iter().find(|&&c| contrast_against_white(c) < MIN_CONTRAST) {
            return Err(Error::Config(format!("palette color {c:?} has contrast below 3:1 against white")));
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

/// Splits on sentence-final punctuation followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(if c.is_whitespace() { ' ' } else { c });
        let end = matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace());
        if end {
            let s = cur.split_whitespace().collect::<Vec<_>>().join(" ");
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.split_whitespace().collect::<Vec<_>>().join(" ");
    if !s.is_empty() {
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_library_meets_minimums() {
        let lib = AssetLibrary::builtin(600, 800);
        lib.validate().unwrap();
        assert!(lib.images.len() >= MIN_IMAGES);
        assert!(lib.corpus_chars() >= MIN_CORPUS_CHARS);
        let widths: std::collections::BTreeSet<u32> = lib.images.iter().map(|i| i.width()).collect();
        assert!(widths.len() > 5);
    }

    #[test]
    fn palette_contrast_matches_wcag_examples() {
        assert!((contrast_against_white([0, 0, 0]) - 21.0).abs() < 1e-9);
        assert!((contrast_against_white([255, 255, 255]) - 1.0).abs() < 1e-9);
        // #767676 is the lightest gray passing 4.5:1.
        assert!((contrast_against_white([0x76, 0x76, 0x76]) - 4.54).abs() < 0.01);
        for c in builtin_palette() {
            assert!(contrast_against_white(c) >= MIN_CONTRAST);
        }
    }

    #[test]
    fn covering_sizes_cover_every_extent() {
        for (limit, factor) in [(600, 1.5), (800, 2.0), (257, 1.5)] {
            let sizes = covering_sizes(limit, factor);
            assert!(*sizes.last().unwrap() >= limit);
            for e in 8..=limit {
                assert!(
                    sizes.iter().any(|&s| s >= e && (s as f64) <= factor * e as f64),
                    "extent {e} uncovered by {sizes:?}"
                );
            }
        }
    }

    #[test]
    fn light_palette_is_rejected() {
        let mut lib = AssetLibrary::builtin(256, 256);
        lib.palette.push([250, 250, 200]);
        assert!(matches!(lib.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let s = split_sentences("One two. Three?  Four 3.5 five!\nSix");
        assert_eq!(s, vec!["One two.", "Three?", "Four 3.5 five!", "Six"]);
    }

    #[test]
    fn loads_asset_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        for i in 0..MIN_IMAGES as u32 {
            let img = RgbImage::from_pixel(20 + i, 30 + i, Rgb([i as u8, 0, 0]));
            img.save(dir.path().join(format!("images/{i:02}.png"))).unwrap();
        }
        let ttf = Path::new("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf");
        if ttf.exists() {
            std::fs::create_dir(dir.path().join("fonts")).unwrap();
            std::fs::copy(ttf, dir.path().join("fonts/DejaVuSans.ttf")).unwrap();
        }
        let lib = AssetLibrary::from_dir(dir.path(), 256, 256).unwrap();
        assert_eq!(lib.images.len(), MIN_IMAGES);
        assert_eq!(lib.images[3].dimensions(), (23, 33));
        assert_eq!(lib.fonts.len(), if ttf.exists() { 3 } else { 2 });
        assert!(AssetLibrary::from_dir(dir.path().join("missing"), 256, 256).is_err());
    }
}
