// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-tokenized corpora: one sequence per line, whitespace-separated
//! integer token ids, with an optional parallel file of segment ids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub segments: Option<Vec<u32>>,
}

impl Sequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens, segments: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segments(&self) -> Option<&[u32]> {
        self.segments.as_deref()
    }
}

impl From<Vec<u32>> for Sequence {
    fn from(tokens: Vec<u32>) -> Self {
        Sequence::new(tokens)
    }
}

fn parse_ids(path: &Path, text: &str) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("`{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ids);
    }
    Ok(out)
}

/// Reads a token-id corpus and, if given, its segment-id companion.
/// Blank lines are skipped in both files.
pub fn read_corpus(path: &Path, segments: Option<&Path>) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens = parse_ids(path, &text)?;
    let Some(seg_path) = segments else {
        return Ok(tokens.into_iter().map(Sequence::new).collect());
    };
    let seg_text = fs::read_to_string(seg_path).map_err(|e| Error::io(seg_path, e))?;
    let segs = parse_ids(seg_path, &seg_text)?;
    if segs.len() != tokens.len() {
        return Err(Error::Parse {
            path: seg_path.to_path_buf(),
            line: segs.len().min(tokens.len()) + 1,
            message: format!("{} segment lines for {} token lines", segs.len(), tokens.len()),
        });
    }
    tokens
        .into_iter()
        .zip(segs)
        .enumerate()
        .map(|(i, (t, s))| {
            if t.len() != s.len() {
                return Err(Error::Parse {
                    path: seg_path.to_path_buf(),
                    line: i + 1,
                    message: format!("{} segment ids for {} tokens", s.len(), t.len()),
                });
            }
            Ok(Sequence {
                tokens: t,
                segments: Some(s),
            })
        })
        .collect()
}

/// Writes sequences in the format accepted by [`read_corpus`].
pub fn write_corpus(path: &Path, corpus: &[Sequence]) -> Result<()> {
    let mut text = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.tokens.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
