//! Plain-text formats: class maps, label files, split lists, transcripts and
//! frame probability tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::features::parse_number_rows;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dense class ids `0..C` with names, stored as `id<TAB>name` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad class name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class name {n:?}"
                )));
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty class map".into()));
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.names.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{n}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut parts = line.split_whitespace();
            let (id, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(name), None) => (id, name),
                _ => return Err(parse_err("expected `id<TAB>name`".into())),
            };
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != names.len() {
                return Err(parse_err(format!(
                    "ids must be dense from 0; got {id}, expected {}",
                    names.len()
                )));
            }
            names.push(name.to_string());
        }
        Self::new(names).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_text())
    }
}

/// One class name per line, one line per frame.
pub fn load_labels(path: &Path, classes: &ClassMap) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        match classes.id(token) {
            Some(id) => labels.push(id),
            None => {
                return Err(Error::UnknownClass {
                    path: path.to_path_buf(),
                    line: i + 1,
                    token: token.to_string(),
                })
            }
        }
    }
    Ok(labels)
}

pub fn labels_to_text(labels: &[usize], classes: &ClassMap) -> String {
    let mut s = String::with_capacity(labels.len() * 8);
    for &l in labels {
        s.push_str(classes.name(l));
        s.push('\n');
    }
    s
}

pub fn save_labels(path: &Path, labels: &[usize], classes: &ClassMap) -> Result<()> {
    write(path, &labels_to_text(labels, classes))
}

/// Checks that label and feature lengths agree. In tolerant mode the longer
/// side is cut (the returned length) with a warning.
pub fn reconcile_lengths(path: &Path, labels: usize, frames: usize, strict: bool) -> Result<usize> {
    if labels == frames {
        return Ok(frames);
    }
    if strict {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            labels,
            frames,
        });
    }
    log::warn!(
        "{}: {labels} labels vs {frames} frames, truncating to {}",
        path.display(),
        labels.min(frames)
    );
    Ok(labels.min(frames))
}

/// Sample ids, one per line.
pub fn load_split(path: &Path) -> Result<Vec<String>> {
    let text = read(path)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if ids.iter().any(|x: &String| x == id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("duplicate id {id:?}"),
            });
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn save_split(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    write(path, &s)
}

/// A transcript file: class names, one per line or whitespace separated.
pub fn load_transcript(path: &Path, classes: &ClassMap) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for token in line.split_whitespace() {
            match classes.id(token) {
                Some(id) => ids.push(id),
                None => {
                    return Err(Error::UnknownClass {
                        path: path.to_path_buf(),
                        line: i + 1,
                        token: token.to_string(),
                    })
                }
            }
        }
    }
    Ok(ids)
}

/// Frame probabilities, one row of C values per frame. Values are written
/// in shortest round-trip form so reading back is exact.
pub fn probabilities_to_text(probs: &Tensor<f32>) -> String {
    let mut s = String::with_capacity(probs.len() * 12);
    let cols = probs.cols();
    for r in 0..probs.rows() {
        for (c, v) in probs.row(r).iter().enumerate() {
            let _ = write!(s, "{v}");
            s.push(if c + 1 == cols { '\n' } else { ' ' });
        }
    }
    s
}

pub fn save_probabilities(path: &Path, probs: &Tensor<f32>) -> Result<()> {
    write(path, &probabilities_to_text(probs))
}

pub fn load_probabilities(path: &Path) -> Result<Tensor<f32>> {
    let text = read(path)?;
    let rows = parse_number_rows::<f32>(&text, path)?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    for (row, (i, _)) in rows.iter().zip(lines) {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "probabilities must be finite and nonnegative".into(),
            });
        }
    }
    Tensor::from_rows(&rows)
}
