//! End-to-end gradient diagnostics on a small fixed example: finite
//! differences against the analytic gradients of the full training
//! loss, optionally restricted to the encoder or decoder parameters.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::corpus::{AnswerLoc, Example, Paragraph, Vocab};
use crate::encoder::EncoderHp;
use crate::entgraph::Lexicon;
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::model::{forward_loss, init_model, prepare, PreparedExample};
use crate::num::{grad_check, GradCheckReport, ParamStore};

/// Which parameter family the finite-difference sweep covers. The rest
/// of the model still runs, frozen, so the loss is always the real one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    All,
    /// Embeddings and everything up to the fused context encoding.
    Encoder,
    /// The generation stack (`dec.*`).
    Decoder,
}

impl std::str::FromStr for CheckScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckScope::All),
            "encoder" => Ok(CheckScope::Encoder),
            "decoder" => Ok(CheckScope::Decoder),
            other => Err(Error::Config(format!(
                "unknown module {other} (expected all, encoder or decoder)"
            ))),
        }
    }
}

/// Two-paragraph bridge fixture: 12 context tokens, a 3-token answer,
/// 4 entities, and a question that must copy an out-of-vocabulary
/// surface, so every model path carries gradient.
pub fn fixture() -> (Example, Vocab, Lexicon, Config) {
    let ex = Example {
        id: "diag-0".into(),
        paragraphs: vec![
            Paragraph {
                title: vec!["rivertown".into()],
                sentences: vec!["the old market sits in rivertown"
                    .split(' ')
                    .map(str::to_string)
                    .collect()],
            },
            Paragraph {
                title: vec!["stonebridge".into()],
                sentences: vec!["rivertown lies near stonebridge"
                    .split(' ')
                    .map(str::to_string)
                    .collect()],
            },
        ],
        answer: AnswerLoc {
            text: vec!["the".into(), "old".into(), "market".into()],
            paragraph_idx: 0,
            sentence_idx: 0,
            token_span: (0, 3),
        },
        question: "what lies near stonebridge ?"
            .split(' ')
            .map(str::to_string)
            .collect(),
    };

    // "stonebridge" stays out of vocabulary so the pointer must copy it.
    let mut vocab = Vocab::default();
    for t in [
        "the",
        "old",
        "market",
        "sits",
        "in",
        "rivertown",
        "lies",
        "near",
        "what",
        "?",
    ] {
        vocab.push(t).unwrap();
    }

    let lexicon = Lexicon::new([
        vec!["rivertown".to_string()],
        vec!["stonebridge".to_string()],
        vec!["old".to_string(), "market".to_string()],
        vec!["near".to_string()],
    ]);

    let mut cfg = Config::default();
    cfg.embed_dim = 8;
    cfg.tag_dim = 4;
    cfg.hidden_dim = 8;
    cfg.gcn_layers = 2;
    cfg.max_entities = 8;
    cfg.max_context_len = 64;
    cfg.seed = 12;
    (ex, vocab, lexicon, cfg)
}

/// Clone parameters into a fresh store, keeping only names under the
/// given prefixes trainable; everything else is frozen in place.
fn restrict(store: &ParamStore, prefixes: &[&str]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name.clone(), t.clone())?;
        } else {
            out.insert_frozen(name.clone(), t.clone())?;
        }
    }
    Ok(out)
}

fn fixture_model() -> Result<(ParamStore, PreparedExample, EncoderHp)> {
    let (ex, vocab, lexicon, cfg) = fixture();
    let pe = prepare(&ex, &vocab, &lexicon, &cfg)?;
    if pe.graph.g != 4 {
        return Err(Error::contract(
            "diag",
            format!("fixture grew {} entities, expected 4", pe.graph.g),
        ));
    }
    let hp = cfg.encoder_hp(vocab.len());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_model(&mut store, &hp, &mut rng)?;
    Ok((store, pe, hp))
}

/// Finite-difference check of the combined loss on the fixture at the
/// given scope. Dropout is off, so the loss is deterministic.
pub fn check_gradients(scope: CheckScope, epsilon: f64) -> Result<GradCheckReport> {
    let (store, pe, hp) = fixture_model()?;
    let mut store = match scope {
        CheckScope::All => store,
        CheckScope::Encoder => restrict(&store, &["embed.", "enc."])?,
        CheckScope::Decoder => restrict(&store, &["dec."])?,
    };
    grad_check(
        &mut store,
        |s| {
            let parts = forward_loss(s, &pe, &hp, 0.5, None)?;
            Ok(parts.total)
        },
        epsilon,
    )
}
