//! Text blocks: wrapped sentences rendered past the box, then cropped to it.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::assets::{AssetLibrary, FontFace};
use crate::error::{Error, Result};

pub const MIN_TEXT_HEIGHT: u32 = 16;
pub const MIN_FONT_SIZE: u32 = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextStyle {
    pub font: usize,
    pub font_name: String,
    pub size: u32,
    pub color: [u8; 3],
    pub line_height: u32,
    pub lines: usize,
    pub first_sentence: usize,
    /// Rendered extent before cropping to the box.
    pub extent: (u32, u32),
}

pub fn line_height(size: u32) -> u32 {
    (size * 6).div_ceil(5)
}

/// Largest font size for a box `h_px` tall.
pub fn max_font_size(h_px: u32) -> u32 {
    h_px / 2
}

/// Greedy word wrap at `width` px; a word wider than a line is split across
/// lines, at least one character per line.
fn wrap(
    font: &FontFace,
    size: u32,
    width: u32,
    words: &mut impl Iterator<Item = String>,
    lines_needed: usize,
) -> Vec<(String, f64)> {
    let width = width as f64;
    let space = font.advance(' ', size);
    let mut lines: Vec<(String, f64)> = Vec::new();
    let mut line = String::new();
    let mut line_w = 0.0;
    while lines.len() < lines_needed {
        let word = words.next().expect("word stream is endless");
        let ww = font.text_width(&word, size);
        let extra = if line.is_empty() { ww } else { space + ww };
        if line_w + extra <= width {
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&word);
            line_w += extra;
            continue;
        }
        if !line.is_empty() {
            lines.push((std::mem::take(&mut line), line_w));
            line_w = 0.0;
            if lines.len() >= lines_needed {
                break;
            }
        }
        if ww <= width {
            line = word;
            line_w = ww;
            continue;
        }
        // Hard-break an overlong word.
        let mut chunk = String::new();
        let mut chunk_w = 0.0;
        for c in word.chars() {
            let a = font.advance(c, size);
            if !chunk.is_empty() && chunk_w + a > width {
                lines.push((std::mem::take(&mut chunk), chunk_w));
                chunk_w = 0.0;
            }
            chunk.push(c);
            chunk_w += a;
        }
        line = chunk;
        line_w = chunk_w;
    }
    if lines.len() < lines_needed && !line.is_empty() {
        lines.push((line, line_w));
    }
    lines
}

/// Renders a `w_px × h_px` text raster: font size uniform on
/// `[8, floor(h_px/2)]`, font and color uniform, sentences read in order from
/// a random corpus position. Lines are added until the text covers the box,
/// then the raster is cropped at its top-left corner.
pub fn render_text_block<R: Rng + ?Sized>(
    assets: &AssetLibrary,
    w_px: u32,
    h_px: u32,
    rng: &mut R,
) -> Result<(RgbImage, TextStyle)> {
    if h_px < MIN_TEXT_HEIGHT || w_px == 0 {
        return Err(Error::BoxTooSmall {
            w_px,
            h_px,
            min_w: 1,
            min_h: MIN_TEXT_HEIGHT,
            what: "text",
        });
    }
    if assets.fonts.is_empty() || assets.palette.is_empty() || assets.sentences.is_empty() {
        return Err(Error::Config("asset library lacks fonts, colors or text".into()));
    }
    let size = rng.gen_range(MIN_FONT_SIZE..=max_font_size(h_px));
    let font_index = rng.gen_range(0..assets.fonts.len());
    let color = assets.palette[rng.gen_range(0..assets.palette.len())];
    let first_sentence = rng.gen_range(0..assets.sentences.len());
    let font = &assets.fonts[font_index];
    let lh = line_height(size);
    let lines_needed = h_px.div_ceil(lh) as usize;

    let mut words = assets
        .sentences
        .iter()
        .cycle()
        .skip(first_sentence)
        .flat_map(|s| s.split_whitespace().map(str::to_string).collect::<Vec<_>>());
    let lines = wrap(font, size, w_px, &mut words, lines_needed);

    let text_w = lines.iter().map(|(_, w)| w.ceil() as u32).max().unwrap_or(0);
    let extent = (w_px.max(text_w), lh * lines.len() as u32);
    let mut canvas = RgbImage::from_pixel(extent.0, extent.1, Rgb([255, 255, 255]));
    for (i, (line, _)) in lines.iter().enumerate() {
        let top = (i as u32 * lh) as i64;
        let mut x = 0.0;
        for c in line.chars() {
            font.draw(&mut canvas, c, x, top, size, color);
            x += font.advance(c, size);
        }
    }
    let cropped = imageops::crop_imm(&canvas, 0, 0, w_px, h_px).to_image();
    let style = TextStyle {
        font: font_index,
        font_name: font.name().to_string(),
        size,
        color,
        line_height: lh,
        lines: lines.len(),
        first_sentence,
        extent,
    };
    Ok((cropped, style))
}
