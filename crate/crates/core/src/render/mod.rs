//! Page decoration: fills layout boxes with cropped images and text, and
//! writes a class-indexed mask from the same pixel rectangles.
//!
//! A box `(x, y, w, h)` on a `W × H` page covers pixel columns
//! `[⌊x·W⌋, ⌊(x+w)·W⌋)` and rows `[⌊y·H⌋, ⌊(y+h)·H⌋)`.

mod assets;
mod export;
mod text;

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{validate_layout, ElementClass, LayoutElement, PageLayout, ViolationKind};

pub use assets::{
    bitmap_advance, contrast_against_white, covering_sizes, relative_luminance, split_sentences, AssetLibrary,
    FontFace, MIN_CONTRAST, MIN_CORPUS_CHARS, MIN_FONTS, MIN_IMAGES,
};
pub use export::{
    export_dataset, load_mask, read_manifest, sha256_hex, verify_dataset, DatasetManifest, DatasetWriter, PageEntry,
    VerifyReport,
    MANIFEST_FILE,
};
pub use text::{line_height, max_font_size, render_text_block, TextStyle, MIN_FONT_SIZE, MIN_TEXT_HEIGHT};

pub const MIN_PAGE: u32 = 256;
pub const MIN_IMAGE_BOX: u32 = 8;
pub const BACKGROUND: u8 = 0;

/// Palette: figure red, table blue, text green, background black.
pub const MASK_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [255, 0, 0], [0, 0, 255], [0, 255, 0]];

const EDGE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }
}

fn edge(coord: f64, dim: u32) -> u32 {
    ((coord * dim as f64 + EDGE_EPS).floor().max(0.0) as u32).min(dim)
}

/// Pixel rectangle of a page-fraction box.
pub fn pixel_rect(e: &LayoutElement, width: u32, height: u32) -> PixelRect {
    let (x0, x1) = (edge(e.x, width), edge(e.right(), width));
    let (y0, y1) = (edge(e.y, height), edge(e.bottom(), height));
    PixelRect {
        x: x0,
        y: y0,
        w: x1.saturating_sub(x0),
        h: y1.saturating_sub(y0),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub image: usize,
    /// Region of the (possibly rescaled) source image.
    pub source: PixelRect,
    /// Region of the page.
    pub dest: PixelRect,
    pub fallback: bool,
    /// Size the source was rescaled to before cropping, for fallbacks.
    pub rescaled: Option<(u32, u32)>,
}

/// `w ≤ W ≤ 1.5·w` and `h ≤ H ≤ 2·h`.
pub fn is_eligible(image_w: u32, image_h: u32, w_px: u32, h_px: u32) -> bool {
    image_w >= w_px && 2 * image_w <= 3 * w_px && image_h >= h_px && image_h <= 2 * h_px
}

/// Chooses an image for a `w_px × h_px` paste area uniformly among eligible
/// candidates, and a uniform crop origin. With no eligible candidate, a
/// uniformly chosen image is rescaled to `⌈1.25·w⌉ × ⌈1.5·h⌉` first.
pub fn select_image<R: Rng + ?Sized>(assets: &AssetLibrary, w_px: u32, h_px: u32, rng: &mut R) -> Result<CropSpec> {
    if assets.images.is_empty() {
        return Err(Error::Config("asset library has no images".into()));
    }
    if w_px < MIN_IMAGE_BOX || h_px < MIN_IMAGE_BOX {
        return Err(Error::BoxTooSmall {
            w_px,
            h_px,
            min_w: MIN_IMAGE_BOX,
            min_h: MIN_IMAGE_BOX,
            what: "image",
        });
    }
    let eligible: Vec<usize> = assets
        .images
        .iter()
        .enumerate()
        .filter(|(_, im)| is_eligible(im.width(), im.height(), w_px, h_px))
        .map(|(i, _)| i)
        .collect();
    let (image, size, fallback) = if eligible.is_empty() {
        let i = rng.gen_range(0..assets.images.len());
        let size = ((w_px * 5).div_ceil(4), (h_px * 3).div_ceil(2));
        (i, size, true)
    } else {
        let i = eligible[rng.gen_range(0..eligible.len())];
        (i, assets.images[i].dimensions(), false)
    };
    let sx = rng.gen_range(0..=size.0 - w_px);
    let sy = rng.gen_range(0..=size.1 - h_px);
    Ok(CropSpec {
        image,
        source: PixelRect {
            x: sx,
            y: sy,
            w: w_px,
            h: h_px,
        },
        dest: PixelRect {
            x: 0,
            y: 0,
            w: w_px,
            h: h_px,
        },
        fallback,
        rescaled: fallback.then_some(size),
    })
}

/// The cropped pixels a [`CropSpec`] describes.
pub fn crop_pixels(assets: &AssetLibrary, crop: &CropSpec) -> RgbImage {
    let src = &assets.images[crop.image];
    let s = crop.source;
    match crop.rescaled {
        Some((w, h)) => {
            let scaled = imageops::resize(src, w, h, imageops::FilterType::Triangle);
            imageops::crop_imm(&scaled, s.x, s.y, s.w, s.h).to_image()
        }
        None => imageops::crop_imm(src, s.x, s.y, s.w, s.h).to_image(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fill", rename_all = "lowercase")]
pub enum Fill {
    Image(CropSpec),
    Text(TextStyle),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub index: usize,
    pub class: ElementClass,
    pub rect: PixelRect,
    #[serde(flatten)]
    pub fill: Fill,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPage {
    pub page: RgbImage,
    pub mask: GrayImage,
    pub layout: PageLayout,
    pub log: Vec<RenderRecord>,
    pub seed: Option<u64>,
}

fn check_page_size(width: u32, height: u32) -> Result<()> {
    if width < MIN_PAGE || height < MIN_PAGE {
        return Err(Error::Config(format!(
            "page size {width}x{height} below {MIN_PAGE}x{MIN_PAGE}"
        )));
    }
    Ok(())
}

/// Renders `layout` onto a white `width × height` page. Elements are painted
/// in list order, later ones over earlier ones, in both page and mask.
pub fn decorate<R: Rng + ?Sized>(
    layout: &PageLayout,
    assets: &AssetLibrary,
    (width, height): (u32, u32),
    rng: &mut R,
) -> Result<RenderedPage> {
    check_page_size(width, height)?;
    let reports = validate_layout(layout, 1.0)?;
    if let Some(r) = reports.iter().find(|r| !matches!(r.kind, ViolationKind::ExcessiveOverlap { .. })) {
        return Err(Error::Element {
            index: r.index,
            source: Box::new(Error::Input(format!("invalid box: {:?} by {}", r.kind, r.magnitude))),
        });
    }
    let mut page = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut mask = GrayImage::from_pixel(width, height, Luma([BACKGROUND]));
    let mut log = Vec::with_capacity(layout.len());
    for (index, e) in layout.elements.iter().enumerate() {
        let rect = pixel_rect(e, width, height);
        let wrap = |err: Error| Error::Element {
            index,
            source: Box::new(err),
        };
        let (pixels, fill) = match e.class {
            ElementClass::Figure | ElementClass::Table => {
                let mut crop = select_image(assets, rect.w, rect.h, rng).map_err(wrap)?;
                let pixels = crop_pixels(assets, &crop);
                crop.dest = rect;
                (pixels, Fill::Image(crop))
            }
            ElementClass::Text => {
                let (pixels, style) = render_text_block(assets, rect.w, rect.h, rng).map_err(wrap)?;
                (pixels, Fill::Text(style))
            }
        };
        imageops::replace(&mut page, &pixels, rect.x as i64, rect.y as i64);
        let code = e.class.mask_code();
        for y in rect.y..rect.bottom() {
            for x in rect.x..rect.right() {
                mask.put_pixel(x, y, Luma([code]));
            }
        }
        log.push(RenderRecord {
            index,
            class: e.class,
            rect,
            fill,
        });
    }
    Ok(RenderedPage {
        page,
        mask,
        layout: layout.clone(),
        log,
        seed: None,
    })
}

pub fn decorate_seeded(
    layout: &PageLayout,
    assets: &AssetLibrary,
    size: (u32, u32),
    seed: u64,
) -> Result<RenderedPage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut page = decorate(layout, assets, size, &mut rng)?;
    page.seed = Some(seed);
    Ok(page)
}

/// Decorates pages in parallel; page `i` uses seed `seed_base + i`. Output
/// order matches input order.
pub fn decorate_batch(
    layouts: &[PageLayout],
    assets: &AssetLibrary,
    size: (u32, u32),
    seed_base: u64,
) -> Result<Vec<RenderedPage>> {
    layouts
        .par_iter()
        .enumerate()
        .map(|(i, l)| decorate_seeded(l, assets, size, seed_base.wrapping_add(i as u64)))
        .collect()
}

/// Human-viewable mask in the palette colors.
pub fn palette_mask(mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let code = mask.get_pixel(x, y).0[0] as usize;
        Rgb(MASK_COLORS.get(code).copied().unwrap_or([255, 255, 255]))
    })
}

/// Bounding boxes of the 4-connected regions of each nonzero mask code,
/// ordered by top-left corner.
pub fn mask_boxes(mask: &GrayImage) -> Vec<(ElementClass, PixelRect)> {
    let (w, h) = mask.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let code = mask.get_pixel(x0, y0).0[0];
            if code == BACKGROUND || seen[(y0 * w + x0) as usize] {
                continue;
            }
            let (mut minx, mut miny, mut maxx, mut maxy) = (x0, y0, x0, y0);
            seen[(y0 * w + x0) as usize] = true;
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                minx = minx.min(x);
                maxx = maxx.max(x);
                miny = miny.min(y);
                maxy = maxy.max(y);
                let mut visit = |nx: u32, ny: u32| {
                    let k = (ny * w + nx) as usize;
                    if !seen[k] && mask.get_pixel(nx, ny).0[0] == code {
                        seen[k] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            if let Some(class) = ElementClass::from_code(code - 1) {
                out.push((
                    class,
                    PixelRect {
                        x: minx,
                        y: miny,
                        w: maxx - minx + 1,
                        h: maxy - miny + 1,
                    },
                ));
            }
        }
    }
    out.sort_by_key(|(c, r)| (r.y, r.x, c.code()));
    out
}
