//! Run configuration: one JSON object controls data, model and training.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderHp;
use crate::entgraph::EdgeMode;
use crate::error::{Error, Result};

/// Everything a training or generation run needs. Unknown keys in the
/// JSON file are rejected; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Training examples, JSONL (native or HotpotQA-shaped records).
    pub train_data: PathBuf,
    /// Held-out examples; training data doubles as dev when absent.
    pub dev_data: Option<PathBuf>,
    /// Entity surface list, one per line; defaults to the lexicon
    /// embedded in the training data.
    pub lexicon: Option<PathBuf>,
    /// Optional word2vec-text file preloading the word embedding table.
    pub embeddings: Option<PathBuf>,
    /// Logs, checkpoints and vocabulary land here.
    pub out_dir: PathBuf,

    /// Vocabulary cap, reserved ids included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub tag_dim: usize,
    /// Model width d; must be even (bidirectional halves).
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub max_entities: usize,
    pub max_context_len: usize,
    /// Entity edge rule: "sentence", "paragraph" or "both".
    pub edges: String,

    pub lstm_dropout: f64,
    pub gcn_dropout: f64,

    /// Peak learning rate of the cosine schedule.
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Weight on the hop-supervision loss.
    pub lambda_bfs: f64,
    /// First epoch (0-based) at which hop supervision is active.
    pub bfs_start_epoch: usize,
    /// SGD momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Stop once the epoch-mean cross entropy drops below this.
    pub target_train_ce: Option<f64>,

    pub beam: usize,
    pub max_decode_len: usize,

    /// Identical surfaces share one graph node.
    pub merge_same_surface: bool,
    /// Recompute the answer mask before every propagation layer instead
    /// of only before the first.
    pub mask_per_layer: bool,
    /// Skip graph propagation and the fusion gate (ablation).
    pub bypass_gcn: bool,
    pub freeze_embeddings: bool,
    /// Hop count for supervision targets; defaults to `gcn_layers`.
    pub bfs_hops: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train_data: PathBuf::new(),
            dev_data: None,
            lexicon: None,
            embeddings: None,
            out_dir: PathBuf::from("out"),
            vocab_size: 45000,
            embed_dim: 32,
            tag_dim: 16,
            hidden_dim: 64,
            gcn_layers: 2,
            max_entities: 80,
            max_context_len: 400,
            edges: "both".into(),
            lstm_dropout: 0.2,
            gcn_dropout: 0.3,
            lr0: 0.1,
            batch_size: 12,
            max_epochs: 20,
            lambda_bfs: 0.5,
            bfs_start_epoch: 10,
            momentum: 0.0,
            seed: 0,
            target_train_ce: None,
            beam: 10,
            max_decode_len: 30,
            merge_same_surface: true,
            mask_per_layer: false,
            bypass_gcn: false,
            freeze_embeddings: false,
            bfs_hops: None,
        }
    }
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Config::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, usize); 9] = [
            ("embed_dim", self.embed_dim),
            ("tag_dim", self.tag_dim),
            ("hidden_dim", self.hidden_dim),
            ("gcn_layers", self.gcn_layers),
            ("max_entities", self.max_entities),
            ("max_context_len", self.max_context_len),
            ("batch_size", self.batch_size),
            ("beam", self.beam),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 5, got {}",
                self.vocab_size
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden_dim must be even, got {}",
                self.hidden_dim
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("lstm_dropout", self.lstm_dropout),
            ("gcn_dropout", self.gcn_dropout),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!(
                "lr0 must be positive and finite, got {}",
                self.lr0
            )));
        }
        if !(self.lambda_bfs >= 0.0) || !self.lambda_bfs.is_finite() {
            return Err(Error::Config(format!(
                "lambda_bfs must be nonnegative, got {}",
                self.lambda_bfs
            )));
        }
        self.edge_mode()?;
        Ok(())
    }

    pub fn edge_mode(&self) -> Result<EdgeMode> {
        self.edges.parse()
    }

    /// Encoder hyperparameters for an actual vocabulary of `vocab_len`
    /// ids (the configured `vocab_size` is only a cap).
    pub fn encoder_hp(&self, vocab_len: usize) -> EncoderHp {
        EncoderHp {
            vocab_size: vocab_len,
            embed_dim: self.embed_dim,
            tag_dim: self.tag_dim,
            d: self.hidden_dim,
            gcn_layers: self.gcn_layers,
            lstm_dropout: self.lstm_dropout,
            gcn_dropout: self.gcn_dropout,
            mask_per_layer: self.mask_per_layer,
            bypass_gcn: self.bypass_gcn,
            freeze_embeddings: self.freeze_embeddings,
        }
    }
}
