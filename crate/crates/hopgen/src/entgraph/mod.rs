//! Entity layer: lexicon-driven mention annotation over the flattened
//! context, entity-graph construction with sentence/paragraph/title
//! edges, token-to-entity span maps, and hop-limited reachability masks
//! used as weak supervision.

pub mod annotate;
pub mod graph;

pub use annotate::{annotate, Annotation, Lexicon, Mention};
pub use graph::{bfs_mask, build_graph, identify_answer_entities, span_map, EdgeMode, EntityGraph};
