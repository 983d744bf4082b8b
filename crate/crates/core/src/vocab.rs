//! String vocabularies and the pretrained word-vector text format
//! (`token v1 v2 ... vd` per line, whitespace separated).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// Token -> row mapping. Rows below `reserved` are special entries that no
/// token maps to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    reserved: Vec<String>,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(reserved: &[&str], tokens: impl IntoIterator<Item = String>) -> Self {
        let mut seen = HashSet::new();
        let tokens: Vec<String> = tokens.into_iter().filter(|t| seen.insert(t.clone())).collect();
        let mut v = Vocab { reserved: reserved.iter().map(|s| s.to_string()).collect(), tokens, index: HashMap::new() };
        v.reindex();
        v
    }

    /// Rebuilds the lookup table (needed after deserializing).
    pub fn reindex(&mut self) {
        let offset = self.reserved.len();
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + offset)).collect();
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Total rows, reserved ones included.
    pub fn len(&self) -> usize {
        self.reserved.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Row of a non-reserved token.
    pub fn row_of(&self, token_index: usize) -> usize {
        token_index + self.reserved.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VectorsError {
    #[error("word vectors line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads vectors for the requested words only; everything else in the file is
/// skipped without being parsed. Returns the dimension found and the vectors.
pub fn read_word_vectors<R: BufRead>(
    r: R,
    wanted: &HashSet<String>,
) -> Result<(usize, HashMap<String, Vec<f64>>), VectorsError> {
    let mut dim = None;
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(VectorsError::Malformed {
                    line: i + 1,
                    detail: format!("expected {d} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        if !wanted.contains(word) {
            continue;
        }
        let vec = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| VectorsError::Malformed { line: i + 1, detail: e.to_string() })?;
        out.insert(word.to_string(), vec);
    }
    Ok((dim.unwrap_or(0), out))
}

pub fn write_word_vectors<'a, W: Write>(
    mut w: W,
    vectors: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> std::io::Result<()> {
    for (word, vec) in vectors {
        write!(w, "{word}")?;
        for v in vec {
            write!(w, " {v:.6}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
