//! Glue between raw examples and the model: one-time preparation of
//! graphs and targets, parameter init, the training forward pass, and
//! beam-search generation.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_example, EncodedExample, Example, Vocab};
use crate::decoder::{
    beam_search, extended_targets, forced_dists, init_decoder_params, ExtendedVocab, ModelStepper,
};
use crate::encoder::{encode, init_encoder_params, EncoderHp};
use crate::entgraph::{
    annotate, bfs_mask, build_graph, identify_answer_entities, span_map, EntityGraph, Lexicon,
};
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::loss::{compute_loss, LossParts};
use crate::num::{ParamStore, Session, Tensor};

/// Everything derived from one example before training: encoded ids,
/// entity graph, token-to-entity map, hop supervision targets (absent
/// when no entity matches the answer), the per-example vocabulary
/// extension, and teacher-forcing targets.
pub struct PreparedExample {
    pub id: String,
    pub enc: EncodedExample,
    pub graph: EntityGraph,
    pub span_map: Tensor,
    pub bfs: Option<Tensor>,
    pub ext: ExtendedVocab,
    pub targets: Vec<usize>,
    /// Reference question surfaces, for evaluation.
    pub question: Vec<String>,
}

pub fn prepare(
    ex: &Example,
    vocab: &Vocab,
    lexicon: &Lexicon,
    cfg: &Config,
) -> Result<PreparedExample> {
    let enc = encode_example(ex, vocab, cfg.max_context_len)?;
    let ann = annotate(&enc.flat, lexicon, cfg.max_entities, cfg.merge_same_surface)?;
    let mut graph = build_graph(&ann.mentions, ann.g, cfg.edge_mode()?);
    identify_answer_entities(&mut graph, &ex.answer.text, enc.flat.answer_span);
    let hops = cfg.bfs_hops.unwrap_or(cfg.gcn_layers);
    let (mask, has_roots) = bfs_mask(&graph, hops);
    let bfs = has_roots.then_some(mask);
    let spans = span_map(&ann.mentions, ann.g, enc.context_ids.len())?;
    let ext = ExtendedVocab::build(&enc, vocab.len());
    let targets = extended_targets(&ex.question, vocab, &ext);
    Ok(PreparedExample {
        id: ex.id.clone(),
        enc,
        graph,
        span_map: spans,
        bfs,
        ext,
        targets,
        question: ex.question.clone(),
    })
}

/// Register every parameter of the full model. The word embedding table
/// is shared between encoder and decoder.
pub fn init_model(store: &mut ParamStore, hp: &EncoderHp, rng: &mut ChaCha8Rng) -> Result<()> {
    init_encoder_params(store, hp, rng)?;
    init_decoder_params(store, hp.vocab_size, hp.embed_dim, hp.d, rng)
}

/// Full training forward pass: encode, teacher-forced decode, combined
/// loss. `rng: None` disables dropout (evaluation).
pub fn forward_loss(
    s: &mut Session,
    pe: &PreparedExample,
    hp: &EncoderHp,
    lambda: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts> {
    let out = encode(s, &pe.enc, &pe.graph, &pe.span_map, hp, rng.as_deref_mut())?;
    let dists = forced_dists(s, out.c_final, &pe.ext, &pe.targets, hp.lstm_dropout, rng)?;
    compute_loss(
        s,
        &dists,
        &pe.targets,
        out.soft_mask,
        pe.bfs.as_ref(),
        lambda,
    )
}

/// One generated question: surfaces (no end marker), cumulative
/// log-probability, and its length-normalized score.
pub struct Generated {
    pub tokens: Vec<String>,
    pub logp: f64,
    pub score: f64,
}

/// Encode once and beam-search a question in evaluation mode.
pub fn generate(
    store: &ParamStore,
    pe: &PreparedExample,
    hp: &EncoderHp,
    vocab: &Vocab,
    beam: usize,
    max_len: usize,
) -> Result<Generated> {
    let mut s = Session::new(store);
    let out = encode(&mut s, &pe.enc, &pe.graph, &pe.span_map, hp, None)?;
    let mut stepper = ModelStepper {
        session: &mut s,
        c_final: out.c_final,
        ext: &pe.ext,
    };
    let hyps = beam_search(&mut stepper, beam, max_len)?;
    let best = hyps
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("generate", "beam search returned no hypotheses"))?;
    let tokens = best
        .emitted()
        .iter()
        .map(|&id| pe.ext.render(id, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        tokens,
        logp: best.logp,
        score: best.score(),
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, Dataset};
    use rand_core::SeedableRng;

    /// Tiny synthetic setup shared by harness tests: dataset, vocab,
    /// lexicon and a toy-size config seeded deterministically.
    pub(crate) fn toy_setup(count: usize, seed: u64) -> (Dataset, Vocab, Lexicon, Config) {
        let ds = generate_synthetic(seed, count, 12).unwrap();
        let vocab = build_vocab(&ds, 200).unwrap();
        let lexicon = Lexicon::new(ds.lexicon_tokens());
        let mut cfg = Config::default();
        cfg.embed_dim = 8;
        cfg.tag_dim = 4;
        cfg.hidden_dim = 8;
        cfg.max_entities = 12;
        cfg.max_context_len = 120;
        cfg.seed = seed;
        (ds, vocab, lexicon, cfg)
    }

    pub(crate) fn toy_model(cfg: &Config, vocab: &Vocab) -> (ParamStore, EncoderHp) {
        let hp = cfg.encoder_hp(vocab.len());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_model(&mut store, &hp, &mut rng).unwrap();
        (store, hp)
    }
}
