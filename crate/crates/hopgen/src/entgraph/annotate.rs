use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::example::FlatContext;
use crate::error::{Error, Result};

/// Entity surface forms used for deterministic mention annotation.
/// Stored deduplicated and sorted longest-first so left-to-right longest
/// match is a simple first-hit scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    surfaces: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(surfaces: impl IntoIterator<Item = Vec<String>>) -> Self {
        let dedup: BTreeSet<Vec<String>> = surfaces.into_iter().filter(|s| !s.is_empty()).collect();
        let mut surfaces: Vec<Vec<String>> = dedup.into_iter().collect();
        surfaces.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Lexicon { surfaces }
    }

    /// One pre-tokenized surface form per line.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Ok(Lexicon::new(text.lines().map(|l| {
            l.split_whitespace().map(str::to_lowercase).collect()
        })))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut sorted: Vec<String> = self.surfaces.iter().map(|s| s.join(" ")).collect();
        sorted.sort();
        for s in sorted {
            writeln!(f, "{s}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<String>> {
        self.surfaces.iter()
    }

    /// Longest surface matching `tokens[pos..limit]` at `pos`.
    fn longest_match(&self, tokens: &[String], pos: usize, limit: usize) -> Option<&Vec<String>> {
        self.surfaces
            .iter()
            .find(|s| pos + s.len() <= limit && tokens[pos..pos + s.len()] == s[..])
    }
}

/// One annotated entity mention in the flattened context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    /// Entity this mention belongs to, in `0..g`.
    pub entity_idx: usize,
    pub surface: Vec<String>,
    pub paragraph_idx: usize,
    /// `None` marks a title mention.
    pub sentence_idx: Option<usize>,
    /// `[start, end)` in the flattened context.
    pub span: (usize, usize),
}

/// Result of annotation: mentions with assigned entity indices, the
/// entity count, and how many mentions were dropped by the entity cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub mentions: Vec<Mention>,
    pub g: usize,
    pub dropped: usize,
}

/// Scan every title and sentence left to right, taking the longest
/// lexicon match at each position (matches never cross unit borders).
/// Entity indices are per-mention by default; with `merge_same_surface`
/// identical surfaces share one entity across the whole context.
/// Mentions that would push the entity count past `max_entities` are
/// dropped in document order and counted.
pub fn annotate(
    flat: &FlatContext,
    lexicon: &Lexicon,
    max_entities: usize,
    merge_same_surface: bool,
) -> Result<Annotation> {
    if max_entities == 0 {
        return Err(Error::Config("max_entities must be at least 1".into()));
    }
    let mut mentions = Vec::new();
    let mut dropped = 0;
    let mut by_surface: IndexMap<Vec<String>, usize> = IndexMap::new();
    let mut g = 0;

    for unit in &flat.units {
        let (us, ue) = unit.span;
        let mut pos = us;
        while pos < ue {
            let Some(m) = lexicon.longest_match(&flat.tokens, pos, ue) else {
                pos += 1;
                continue;
            };
            let span = (pos, pos + m.len());
            pos += m.len();
            let entity_idx = if merge_same_surface {
                match by_surface.get(m) {
                    Some(&idx) => Some(idx),
                    None if g < max_entities => {
                        by_surface.insert(m.clone(), g);
                        g += 1;
                        Some(g - 1)
                    }
                    None => None,
                }
            } else if g < max_entities {
                g += 1;
                Some(g - 1)
            } else {
                None
            };
            match entity_idx {
                Some(entity_idx) => mentions.push(Mention {
                    entity_idx,
                    surface: m.clone(),
                    paragraph_idx: unit.paragraph_idx,
                    sentence_idx: unit.sentence_idx,
                    span,
                }),
                None => dropped += 1,
            }
        }
    }
    Ok(Annotation {
        mentions,
        g,
        dropped,
    })
}
