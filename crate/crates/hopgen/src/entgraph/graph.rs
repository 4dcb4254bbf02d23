use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::entgraph::annotate::Mention;
use crate::error::{Error, Result};
use crate::num::Tensor;

/// Which co-occurrences create edges. Sentence-level edges are a subset
/// of paragraph-level ones; title edges apply in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Sentence,
    Paragraph,
    #[default]
    Both,
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(EdgeMode::Sentence),
            "paragraph" => Ok(EdgeMode::Paragraph),
            "both" => Ok(EdgeMode::Both),
            other => Err(Error::Config(format!(
                "unknown edge mode {other:?} (expected sentence|paragraph|both)"
            ))),
        }
    }
}

/// Undirected entity graph over annotated mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityGraph {
    pub g: usize,
    /// Flat g*g booleans, symmetric, zero diagonal.
    adj: Vec<bool>,
    pub mentions: Vec<Mention>,
    pub answer_entities: BTreeSet<usize>,
}

impl EntityGraph {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.g + j]
    }

    /// Edge list with i < j.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.g {
            for j in (i + 1)..self.g {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.g).filter(|&j| self.has_edge(i, j)).count()
    }

    /// A representative surface for an entity (its first mention).
    pub fn entity_surface(&self, idx: usize) -> Option<&[String]> {
        self.mentions
            .iter()
            .find(|m| m.entity_idx == idx)
            .map(|m| m.surface.as_slice())
    }

    /// DOT rendering: answer entities drawn as boxes.
    pub fn to_dot(&self, name: &str) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "graph \"{name}\" {{");
        for i in 0..self.g {
            let label = self
                .entity_surface(i)
                .map(|t| t.join(" "))
                .unwrap_or_else(|| format!("e{i}"));
            let shape = if self.answer_entities.contains(&i) {
                " shape=box"
            } else {
                ""
            };
            let _ = writeln!(s, "  n{i} [label=\"{label}\"{shape}];");
        }
        for (i, j) in self.edges() {
            let _ = writeln!(s, "  n{i} -- n{j};");
        }
        s.push_str("}\n");
        s
    }

    /// JSON form `{g, edges, answer_entities, mentions}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "g": self.g,
            "edges": self.edges(),
            "answer_entities": self.answer_entities.iter().collect::<Vec<_>>(),
            "mentions": self.mentions,
        })
    }
}

/// Build the entity graph from mentions. Edge rules:
///   (a) mentions in the same sentence of the same paragraph,
///   (b) mentions anywhere in the same paragraph,
///   (c) a title mention and any mention of its paragraph.
/// `Sentence` applies (a)+(c), `Paragraph` and `Both` apply (b)+(c)
/// (paragraph co-occurrence subsumes sentence co-occurrence).
pub fn build_graph(mentions: &[Mention], g: usize, mode: EdgeMode) -> EntityGraph {
    let mut adj = vec![false; g * g];
    let mut connect = |a: usize, b: usize| {
        if a != b {
            adj[a * g + b] = true;
            adj[b * g + a] = true;
        }
    };
    for (x, ma) in mentions.iter().enumerate() {
        for mb in &mentions[x + 1..] {
            if ma.paragraph_idx != mb.paragraph_idx {
                continue;
            }
            let same_sentence = ma.sentence_idx.is_some() && ma.sentence_idx == mb.sentence_idx;
            let title_link = ma.sentence_idx.is_none() || mb.sentence_idx.is_none();
            let para_link = matches!(mode, EdgeMode::Paragraph | EdgeMode::Both);
            if title_link || para_link || same_sentence {
                connect(ma.entity_idx, mb.entity_idx);
            }
        }
    }
    EntityGraph {
        g,
        adj,
        mentions: mentions.to_vec(),
        answer_entities: BTreeSet::new(),
    }
}

fn contains_subseq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && needle.len() <= hay.len()
        && (0..=hay.len() - needle.len()).any(|i| hay[i..i + needle.len()] == *needle)
}

/// Mark BFS root entities: entities whose surface is contained in the
/// answer text; if none match, entities whose mention span overlaps the
/// answer span. The set may stay empty (BFS supervision is skipped for
/// such examples).
pub fn identify_answer_entities(
    graph: &mut EntityGraph,
    answer_text: &[String],
    answer_span: (usize, usize),
) {
    let mut roots: BTreeSet<usize> = graph
        .mentions
        .iter()
        .filter(|m| contains_subseq(answer_text, &m.surface))
        .map(|m| m.entity_idx)
        .collect();
    if roots.is_empty() {
        roots = graph
            .mentions
            .iter()
            .filter(|m| m.span.0 < answer_span.1 && answer_span.0 < m.span.1)
            .map(|m| m.entity_idx)
            .collect();
    }
    graph.answer_entities = roots;
}

/// Hop-limited reachability from the answer entities: entry i is 1 iff
/// entity i is within K edges of any root (roots themselves at K=0).
/// Returns the mask and whether any root existed.
pub fn bfs_mask(graph: &EntityGraph, k: usize) -> (Tensor, bool) {
    let g = graph.g;
    let mut reach = vec![false; g];
    let mut frontier: Vec<usize> = graph.answer_entities.iter().copied().collect();
    let has_roots = !frontier.is_empty();
    for &r in &frontier {
        reach[r] = true;
    }
    for _ in 0..k {
        let mut next = Vec::new();
        for &i in &frontier {
            for j in 0..g {
                if graph.has_edge(i, j) && !reach[j] {
                    reach[j] = true;
                    next.push(j);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let mask = Tensor::from_fn(1, g, |_, j| if reach[j] { 1.0 } else { 0.0 });
    (mask, has_roots)
}

/// Token-to-entity indicator: `n x g`, entry (i, j) = 1 iff token i lies
/// in a mention span of entity j. Every entity must have at least one
/// mention, and spans must fit inside the context.
pub fn span_map(mentions: &[Mention], g: usize, n: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(n, g);
    let mut seen = vec![false; g];
    for men in mentions {
        let (s, e) = men.span;
        if e > n || s >= e {
            return Err(Error::contract(
                "span_map",
                format!("mention span [{s},{e}) outside context of {n} tokens"),
            ));
        }
        if men.entity_idx >= g {
            return Err(Error::contract(
                "span_map",
                format!("entity index {} out of {g}", men.entity_idx),
            ));
        }
        seen[men.entity_idx] = true;
        for i in s..e {
            m.set(i, men.entity_idx, 1.0);
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::contract(
            "span_map",
            format!("entity {missing} has no mention"),
        ));
    }
    Ok(m)
}
