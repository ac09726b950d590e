//! JSON layout files:
//!
//! ```json
//! { "pages": [ { "elements": [ { "class": "figure", "x": 0.1, "y": 0.2, "w": 0.3, "h": 0.4 } ] } ] }
//! ```
//!
//! Reals are written in shortest round-trip form, which is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ElementClass, LayoutElement, PageLayout};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    pages: Vec<PageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageRecord {
    elements: Vec<ElementRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementRecord {
    class: ElementClass,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

pub fn write_layouts_string(layouts: &[PageLayout]) -> Result<String> {
    if let Some(i) = layouts.iter().position(PageLayout::is_latent) {
        return Err(Error::Usage(format!("page {i} is latent; only decoded layouts can be written")));
    }
    let file = LayoutFile {
        pages: layouts
            .iter()
            .map(|p| PageRecord {
                elements: p
                    .elements
                    .iter()
                    .map(|e| ElementRecord {
                        class: e.class,
                        x: e.x,
                        y: e.y,
                        w: e.w,
                        h: e.h,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_layouts(layouts: &[PageLayout], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = write_layouts_string(layouts)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a layout document; `context` names the source in error messages.
pub fn read_layouts_str(text: &str, context: &str) -> Result<Vec<PageLayout>> {
    let file: LayoutFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    file.pages
        .into_iter()
        .enumerate()
        .map(|(i, page)| {
            let elements = page
                .elements
                .into_iter()
                .map(|r| LayoutElement::new(r.class, r.x, r.y, r.w, r.h))
                .collect();
            PageLayout::decoded(elements).map_err(|e| Error::Parse {
                context: format!("{context}, page {i}"),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_layouts(path: impl AsRef<Path>) -> Result<Vec<PageLayout>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_layouts_str(&text, &path.display().to_string())
}
