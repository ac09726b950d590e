//! Dataset directories: PNG pages and masks, the layout file and a manifest
//! with SHA-256 checksums of every file.
//!
//! ```text
//! dir/
//!   manifest.json
//!   layouts.json
//!   pages/page_0000.png        8-bit RGB
//!   masks/mask_0000.png        8-bit gray, class index per pixel
//!   masks/mask_0000_color.png  palette view
//! ```

use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{palette_mask, Fill, RenderRecord, RenderedPage};
use crate::error::{Error, Result};
use crate::layout::{write_layouts_string, PageLayout};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "docforge-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageEntry {
    pub index: usize,
    pub seed: Option<u64>,
    pub page: String,
    pub page_sha256: String,
    pub mask: String,
    pub mask_sha256: String,
    pub mask_color: String,
    pub mask_color_sha256: String,
    pub elements: usize,
    pub fallbacks: usize,
    pub log: Vec<RenderRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub layouts: String,
    pub layouts_sha256: String,
    pub pages: Vec<PageEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub files_checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn png_bytes(raw: &[u8], width: u32, height: u32, color: ExtendedColorType, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(raw, width, height, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(buf)
}

fn rgb_png(img: &image::RgbImage, path: &Path) -> Result<Vec<u8>> {
    png_bytes(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8, path)
}

fn gray_png(img: &GrayImage, path: &Path) -> Result<Vec<u8>> {
    png_bytes(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8, path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Streams pages into a dataset directory; [`DatasetWriter::finish`] writes
/// the layout file and the manifest.
pub struct DatasetWriter {
    dir: PathBuf,
    layouts: Vec<PageLayout>,
    entries: Vec<PageEntry>,
}

impl DatasetWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        mkdir(&dir.join("pages"))?;
        mkdir(&dir.join("masks"))?;
        Ok(Self {
            dir,
            layouts: Vec::new(),
            entries: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, p: &RenderedPage) -> Result<()> {
        let index = self.entries.len();
        let page = format!("pages/page_{index:04}.png");
        let mask = format!("masks/mask_{index:04}.png");
        let mask_color = format!("masks/mask_{index:04}_color.png");
        let page_path = self.dir.join(&page);
        let mask_path = self.dir.join(&mask);
        let color_path = self.dir.join(&mask_color);
        let page_sha256 = write_file(&page_path, &rgb_png(&p.page, &page_path)?)?;
        let mask_sha256 = write_file(&mask_path, &gray_png(&p.mask, &mask_path)?)?;
        let mask_color_sha256 = write_file(&color_path, &rgb_png(&palette_mask(&p.mask), &color_path)?)?;
        self.entries.push(PageEntry {
            index,
            seed: p.seed,
            page,
            page_sha256,
            mask,
            mask_sha256,
            mask_color,
            mask_color_sha256,
            elements: p.layout.len(),
            fallbacks: p
                .log
                .iter()
                .filter(|r| matches!(&r.fill, Fill::Image(c) if c.fallback))
                .count(),
            log: p.log.clone(),
        });
        self.layouts.push(p.layout.clone());
        Ok(())
    }

    pub fn finish(self) -> Result<DatasetManifest> {
        let layouts_sha256 = write_file(
            &self.dir.join("layouts.json"),
            write_layouts_string(&self.layouts)?.as_bytes(),
        )?;
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            version: VERSION,
            layouts: "layouts.json".into(),
            layouts_sha256,
            pages: self.entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Writes `pages` under `dir` and returns the manifest, which is also saved
/// as `dir/manifest.json`.
pub fn export_dataset(pages: &[RenderedPage], dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let mut w = DatasetWriter::create(dir)?;
    for p in pages {
        w.push(p)?;
    }
    w.finish()
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: format!("unsupported dataset format {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

/// Recomputes every checksum listed in `dir/manifest.json`.
pub fn verify_dataset(dir: impl AsRef<Path>) -> Result<VerifyReport> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut files = vec![(manifest.layouts.clone(), manifest.layouts_sha256.clone())];
    for p in &manifest.pages {
        files.push((p.page.clone(), p.page_sha256.clone()));
        files.push((p.mask.clone(), p.mask_sha256.clone()));
        files.push((p.mask_color.clone(), p.mask_color_sha256.clone()));
    }
    let mut report = VerifyReport::default();
    for (rel, expected) in files {
        report.files_checked += 1;
        match std::fs::read(dir.join(&rel)) {
            Ok(bytes) if sha256_hex(&bytes) == expected => {}
            _ => report.mismatches.push(rel),
        }
    }
    Ok(report)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(m) => Ok(m),
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected an 8-bit single-channel mask, found {:?}", other.color()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{grammar_generate_corpus, read_layouts, GrammarStyle};
    use crate::render::{decorate_batch, AssetLibrary};

    #[test]
    fn empty_export_has_no_pages() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_dataset(&[], dir.path()).unwrap();
        assert!(m.pages.is_empty());
        assert!(verify_dataset(dir.path()).unwrap().ok());
    }

    #[test]
    fn round_trip_and_corruption_detection() {
        let lib = AssetLibrary::builtin(300, 400);
        let layouts = grammar_generate_corpus(GrammarStyle::Academic, 3, 1);
        let pages = decorate_batch(&layouts, &lib, (300, 400), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_dataset(&pages, dir.path()).unwrap();
        assert_eq!(m.pages.len(), 3);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        for (p, e) in pages.iter().zip(&m.pages) {
            assert_eq!(load_mask(dir.path().join(&e.mask)).unwrap(), p.mask);
            assert_eq!(e.seed, p.seed);
        }
        assert_eq!(read_layouts(dir.path().join("layouts.json")).unwrap(), layouts);
        let report = verify_dataset(dir.path()).unwrap();
        assert!(report.ok());
        assert_eq!(report.files_checked, 10);

        let target = dir.path().join(&m.pages[1].page);
        let mut bytes = std::fs::read(&target).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 0x01;
        std::fs::write(&target, bytes).unwrap();
        let report = verify_dataset(dir.path()).unwrap();
        assert_eq!(report.mismatches, vec![m.pages[1].page.clone()]);
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = verify_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(MANIFEST_FILE), "{err}");
    }
}
