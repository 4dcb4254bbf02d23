//! Question decoder: two-layer LSTM with bilinear attention over the
//! final context encoding, pointer copying with per-token max over
//! repeated positions, and beam search over the extended vocabulary.

pub mod beam;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::corpus::{EncodedExample, Vocab, EOS, SOS, UNK};
use crate::encoder::{dropout, init_lstm_dir, lstm_cell};
use crate::error::{Error, Result};
use crate::num::{Axis, ParamStore, Session, Tensor, Var};

pub use beam::{beam_search, greedy_decode, BeamStepper, Hypothesis, ModelStepper, TableStepper};

/// The decoder stacks two unidirectional layers.
pub const DECODER_LAYERS: usize = 2;

/// Per-example vocabulary extension: out-of-vocabulary context surfaces
/// get ids `base..base+k` in first-occurrence order, so copied tokens
/// survive decoding even when the base vocabulary dropped them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedVocab {
    base: usize,
    oov: Vec<String>,
    by_surface: IndexMap<String, usize>,
    /// Per context position: base-vocab id, or extended id for UNKs.
    pos_ids: Vec<usize>,
    /// Unique position ids in first-occurrence order, with the positions
    /// holding each one.
    groups: Vec<(usize, Vec<usize>)>,
}

impl ExtendedVocab {
    pub fn build(enc: &EncodedExample, base: usize) -> Self {
        let mut oov = Vec::new();
        let mut by_surface: IndexMap<String, usize> = IndexMap::new();
        let mut pos_ids = Vec::with_capacity(enc.context_ids.len());
        for (pos, &id) in enc.context_ids.iter().enumerate() {
            let joint = match &enc.oov_map[pos] {
                Some(surface) => *by_surface.entry(surface.clone()).or_insert_with(|| {
                    oov.push(surface.clone());
                    base + oov.len() - 1
                }),
                None => id,
            };
            pos_ids.push(joint);
        }
        let mut groups: IndexMap<usize, Vec<usize>> = IndexMap::new();
        for (pos, &joint) in pos_ids.iter().enumerate() {
            groups.entry(joint).or_default().push(pos);
        }
        ExtendedVocab {
            base,
            oov,
            by_surface,
            pos_ids,
            groups: groups.into_iter().collect(),
        }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    /// Number of extended entries.
    pub fn k(&self) -> usize {
        self.oov.len()
    }

    /// Full distribution support: base plus extended entries.
    pub fn size(&self) -> usize {
        self.base + self.oov.len()
    }

    /// Joint id of each context position.
    pub fn pos_ids(&self) -> &[usize] {
        &self.pos_ids
    }

    /// Unique context token ids in first-occurrence order with their
    /// positions.
    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    pub fn extended_id(&self, surface: &str) -> Option<usize> {
        self.by_surface.get(surface).copied()
    }

    pub fn surface_of(&self, id: usize) -> Option<&str> {
        id.checked_sub(self.base)
            .and_then(|i| self.oov.get(i))
            .map(String::as_str)
    }

    /// Render a joint id: base ids through the vocabulary, extended ids
    /// through the per-example surface list.
    pub fn render(&self, id: usize, vocab: &Vocab) -> Result<String> {
        if id < self.base {
            return vocab.token(id).map(str::to_string);
        }
        self.surface_of(id)
            .map(str::to_string)
            .ok_or_else(|| Error::contract("extended_vocab", format!("id {id} out of range")))
    }
}

/// Reference target ids for teacher forcing: in-vocab tokens keep their
/// id, out-of-vocabulary tokens copyable from the context get their
/// extended id, the rest collapse to UNK. EOS-terminated.
pub fn extended_targets(question: &[String], vocab: &Vocab, ext: &ExtendedVocab) -> Vec<usize> {
    let mut ids: Vec<usize> = question
        .iter()
        .map(|tok| {
            let id = vocab.id(tok);
            if id != UNK {
                id
            } else {
                ext.extended_id(tok).unwrap_or(UNK)
            }
        })
        .collect();
    ids.push(EOS);
    ids
}

/// Per-unique-token copy scores: for each distinct context token, the
/// maximum raw attention score over the positions where it occurs.
/// Tokens absent from the context have no entry (conceptually -inf).
pub fn maxout_copy_scores(raw: &[f64], pos_ids: &[usize]) -> IndexMap<usize, f64> {
    let mut out: IndexMap<usize, f64> = IndexMap::new();
    for (&score, &id) in raw.iter().zip(pos_ids) {
        let e = out.entry(id).or_insert(f64::NEG_INFINITY);
        *e = e.max(score);
    }
    out
}

/// Decoder recurrent state: per-layer (hidden, cell) plus the previous
/// attentional vector fed back into the next input.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    pub ctx: Var,
}

/// Register decoder parameters. The word embedding table is shared with
/// the encoder and registered there.
pub fn init_decoder_params(
    store: &mut ParamStore,
    vocab_size: usize,
    embed_dim: usize,
    d: usize,
    rng: &mut impl RngCore,
) -> Result<()> {
    store.insert("dec.init.w", Tensor::uniform(d, d, d, rng))?;
    store.insert("dec.init.b", Tensor::uniform(d, 1, d, rng))?;
    init_lstm_dir(store, "dec.lstm.l0", embed_dim + d, d, rng)?;
    init_lstm_dir(store, "dec.lstm.l1", d, d, rng)?;
    store.insert("dec.attn.w_a", Tensor::uniform(d, d, d, rng))?;
    store.insert("dec.out.w_c", Tensor::uniform(d, 2 * d, 2 * d, rng))?;
    store.insert("dec.out.w_v", Tensor::uniform(vocab_size, d, d, rng))?;
    Ok(())
}

/// Start state: every layer's hidden and cell vector is
/// tanh(W mean(C_final) + b); the attentional feedback starts at zero.
pub fn init_state(s: &mut Session, c_final: Var) -> Result<DecoderState> {
    let w = s.p("dec.init.w")?;
    let b = s.p("dec.init.b")?;
    let d = s.g.value(c_final).rows();
    let mean = s.g.mean_cols(c_final)?;
    let z = s.g.matmul(w, mean)?;
    let z = s.g.add(z, b)?;
    let h = s.g.tanh(z)?;
    let layers = vec![(h, h); DECODER_LAYERS];
    let ctx = s.g.constant(Tensor::zeros(d, 1));
    Ok(DecoderState { layers, ctx })
}

/// One decode step's outputs.
#[derive(Debug, Clone)]
pub struct StepOut {
    /// Distribution over the extended vocabulary, `(|V|+k) x 1`, sums
    /// to 1.
    pub dist: Var,
    pub state: DecoderState,
    /// Raw (pre-softmax) attention scores over context positions, `1 x n`.
    pub raw_attn: Var,
    /// Normalized attention over context positions, `1 x n`, sums to 1.
    pub attn: Var,
}

/// Advance one step: embed the previous token (extended ids embed as
/// UNK), run the stack on [embedding; previous attentional vector],
/// attend over C_final, then mix generation logits with per-unique-token
/// copy scores in one softmax. Copy mass lands on the token's base id
/// when it is in-vocab, on its extended id otherwise.
pub fn step(
    s: &mut Session,
    state: &DecoderState,
    prev_token: usize,
    c_final: Var,
    ext: &ExtendedVocab,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOut> {
    let word = s.p("embed.word")?;
    let vocab_size = s.g.value(word).rows();
    let prev = if prev_token < vocab_size {
        prev_token
    } else {
        UNK
    };
    let emb = s.g.embed(word, &[prev])?;

    let mut x = s.g.concat_rows(&[emb, state.ctx])?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, &(h, c)) in state.layers.iter().enumerate() {
        x = dropout(s, x, rate, rng.as_deref_mut())?;
        let (h_new, c_new) = lstm_cell(s, &format!("dec.lstm.l{l}"), x, h, c)?;
        layers.push((h_new, c_new));
        x = h_new;
    }
    let top = x;

    let w_a = s.p("dec.attn.w_a")?;
    let top_t = s.g.transpose(top)?;
    let proj = s.g.matmul(top_t, w_a)?;
    let raw_attn = s.g.matmul(proj, c_final)?;
    let attn = s.g.softmax(raw_attn, Axis::RowWise)?;
    let attn_t = s.g.transpose(attn)?;
    let ctx = s.g.matmul(c_final, attn_t)?;

    let w_c = s.p("dec.out.w_c")?;
    let w_v = s.p("dec.out.w_v")?;
    let cat = s.g.concat_rows(&[top, ctx])?;
    let pre = s.g.matmul(w_c, cat)?;
    let h_tilde = s.g.tanh(pre)?;
    let gen = s.g.matmul(w_v, h_tilde)?;

    let groups: Vec<Vec<usize>> = ext.groups().iter().map(|(_, p)| p.clone()).collect();
    let copy = s.g.group_max(raw_attn, &groups)?;
    let copy = s.g.transpose(copy)?;
    let joint = s.g.concat_rows(&[gen, copy])?;
    let joint_dist = s.g.softmax(joint, Axis::ColWise)?;

    let mut map: Vec<usize> = (0..vocab_size).collect();
    map.extend(ext.groups().iter().map(|(id, _)| *id));
    let dist = s.g.route(joint_dist, &map, ext.size())?;

    Ok(StepOut {
        dist,
        state: DecoderState {
            layers,
            ctx: h_tilde,
        },
        raw_attn,
        attn,
    })
}

/// Teacher-forced per-step distributions over the extended vocabulary.
/// The first step consumes SOS; step t consumes target t-1.
pub fn forced_dists(
    s: &mut Session,
    c_final: Var,
    ext: &ExtendedVocab,
    targets: &[usize],
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Var>> {
    if targets.is_empty() {
        return Err(Error::contract("forced_dists", "empty target sequence"));
    }
    let mut state = init_state(s, c_final)?;
    let mut prev = SOS;
    let mut dists = Vec::with_capacity(targets.len());
    for &target in targets {
        let out = step(s, &state, prev, c_final, ext, rate, rng.as_deref_mut())?;
        dists.push(out.dist);
        state = out.state;
        prev = target;
    }
    Ok(dists)
}

/// Teacher-forced mean negative log-likelihood over a target sequence.
pub fn forced_nll(
    s: &mut Session,
    c_final: Var,
    ext: &ExtendedVocab,
    targets: &[usize],
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let dists = forced_dists(s, c_final, ext, targets, rate, rng)?;
    let mut terms = Vec::with_capacity(targets.len());
    for (dist, &target) in dists.iter().zip(targets) {
        terms.push(s.g.nll(*dist, target)?);
    }
    s.g.mean_scalars(&terms)
}
