//! Text-image relation corpora.
//!
//! One pair per line: `text<TAB>feature_path<TAB>label[<TAB>type]`, where the
//! label is 1 when the image adds to the meaning of the text. The optional
//! type column carries the four-way annotation `R1`..`R4`; `R1` and `R2`
//! (image adds meaning) map to label 1, `R3` and `R4` to label 0. A label of
//! `-` takes its value from the type column.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationType {
    /// Image adds meaning, text is in the image.
    R1,
    /// Image adds meaning, text is not in the image.
    R2,
    /// Image does not add meaning, text is in the image.
    R3,
    /// Image does not add meaning, text is not in the image.
    R4,
}

impl RelationType {
    pub fn image_adds(self) -> bool {
        matches!(self, RelationType::R1 | RelationType::R2)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "R1" => Some(RelationType::R1),
            "R2" => Some(RelationType::R2),
            "R3" => Some(RelationType::R3),
            "R4" => Some(RelationType::R4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrcExample {
    pub text: String,
    pub image_ref: String,
    /// 1 = image adds to the text's meaning.
    pub label: usize,
    pub relation: Option<RelationType>,
}

impl TrcExample {
    pub fn words(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }
}

pub fn load_trc_corpus(path: &Path) -> Result<Vec<TrcExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(err(
                lineno,
                format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
            ));
        }
        if cols[0].split_whitespace().next().is_none() {
            return Err(err(lineno, "empty text".into()));
        }
        let relation = match cols.get(3) {
            Some(s) => {
                Some(RelationType::parse(s.trim()).ok_or_else(|| err(lineno, format!("unknown relation type `{s}`")))?)
            }
            None => None,
        };
        let label = match (cols[2].trim(), relation) {
            ("0", _) => 0,
            ("1", _) => 1,
            ("-", Some(r)) => r.image_adds() as usize,
            (other, _) => return Err(err(lineno, format!("bad label `{other}`"))),
        };
        if let Some(r) = relation {
            if r.image_adds() as usize != label {
                return Err(err(lineno, format!("label {label} contradicts relation type {r:?}")));
            }
        }
        out.push(TrcExample {
            text: cols[0].trim().to_string(),
            image_ref: cols[1].trim().to_string(),
            label,
            relation,
        });
    }
    Ok(out)
}

pub fn write_trc_corpus(path: &Path, examples: &[TrcExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        write!(out, "{}\t{}\t{}", ex.text, ex.image_ref, ex.label).unwrap();
        if let Some(r) = ex.relation {
            write!(out, "\t{r:?}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
