//! Style corpus files and score report export.
//!
//! A corpus file is a JSON array of `{"path": ..., "role": ...}` records with
//! role `positive`, `negative` or `target`; relative paths resolve against
//! the file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::ScoreReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Positive,
    Negative,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub role: CorpusRole,
}

pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<CorpusEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

pub fn load_page(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Tab-separated `name, s_plus, s_minus, e_min, margin, accepted` rows under
/// a header line.
pub fn reports_to_tsv(names: &[String], reports: &[ScoreReport]) -> Result<String> {
    if names.len() != reports.len() {
        return Err(Error::Usage(format!(
            "{} names for {} score reports",
            names.len(),
            reports.len()
        )));
    }
    let mut out = String::from("name\ts_plus\ts_minus\te_min\tmargin\taccepted\n");
    for (n, r) in names.iter().zip(reports) {
        let _ = writeln!(
            out,
            "{n}\t{}\t{}\t{}\t{}\t{}",
            r.s_plus, r.s_minus, r.e_min, r.margin, r.accepted
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("corpus.json");
        std::fs::write(
            &file,
            r#"[{"path": "a.png", "role": "positive"}, {"path": "/x/b.png", "role": "target"}]"#,
        )
        .unwrap();
        let entries = read_corpus_file(&file).unwrap();
        assert_eq!(entries[0].path, dir.path().join("a.png"));
        assert_eq!(entries[0].role, CorpusRole::Positive);
        assert_eq!(entries[1].path, PathBuf::from("/x/b.png"));

        std::fs::write(&file, r#"[{"path": "a.png", "role": "other"}]"#).unwrap();
        assert!(matches!(read_corpus_file(&file), Err(Error::Parse { .. })));
    }

    #[test]
    fn tsv_rows_parse_back() {
        let r = ScoreReport {
            s_plus: 0.75,
            s_minus: 0.25,
            e_min: 0.25,
            margin: 0.5,
            accepted: true,
        };
        let text = reports_to_tsv(&["p0".into()], &[r]).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row, ["p0", "0.75", "0.25", "0.25", "0.5", "true"]);
        assert!(reports_to_tsv(&[], &[r]).is_err());
    }
}
