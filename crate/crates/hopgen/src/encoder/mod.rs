//! Multi-hop encoder: answer-aware co-attention over the context, entity
//! graph propagation conditioned on the answer, and a reasoning gate that
//! fuses the first- and second-hop context encodings.

pub mod embeddings;
pub mod lstm;

use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::corpus::EncodedExample;
use crate::entgraph::EntityGraph;
use crate::error::{Error, Result};
use crate::num::{Axis, ParamStore, Session, Tensor, Var};

pub use embeddings::load_pretrained_embeddings;
pub use lstm::{
    bilstm_run, bilstm_stack_run, dropout, init_bilstm, init_lstm_dir, lstm_cell, lstm_dir_run,
};

/// Context and answer encoders are two-layer stacks.
pub const LSTM_LAYERS: usize = 2;
/// Negative slope of the graph-attention score nonlinearity.
const GAT_LEAKY_SLOPE: f64 = 0.2;
/// Additive score for non-neighbor pairs; large enough to zero them out
/// under softmax without overflowing.
const ATTN_MASK: f64 = -1e30;

/// Encoder hyperparameters. `vocab_size..d` size the parameters at init
/// time; the remaining fields steer the forward pass.
#[derive(Debug, Clone)]
pub struct EncoderHp {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub tag_dim: usize,
    /// Model width; even (bidirectional halves concatenate to `d`).
    pub d: usize,
    /// Graph propagation layers (hop count).
    pub gcn_layers: usize,
    pub lstm_dropout: f64,
    pub gcn_dropout: f64,
    /// Recompute the entity soft mask from the current features before
    /// every propagation layer instead of once up front.
    pub mask_per_layer: bool,
    /// Skip the entity branch entirely (ablation): the answer encoding
    /// is passed through unchanged.
    pub bypass_gcn: bool,
    /// Keep the word embedding table fixed at its initial values.
    pub freeze_embeddings: bool,
}

impl Default for EncoderHp {
    fn default() -> Self {
        EncoderHp {
            vocab_size: 45000,
            embed_dim: 32,
            tag_dim: 16,
            d: 64,
            gcn_layers: 2,
            lstm_dropout: 0.2,
            gcn_dropout: 0.3,
            mask_per_layer: false,
            bypass_gcn: false,
            freeze_embeddings: false,
        }
    }
}

/// Every stage of the encoder pipeline, retained for inspection. Entity
/// fields are `None` when the example has no entities (or the entity
/// branch is bypassed), in which case `a1 == a0`.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    pub c0: Var,
    pub a0: Var,
    pub c1: Var,
    pub a1: Var,
    pub c2: Var,
    pub c_final: Var,
    /// Gate values, `1 x n` in (0,1).
    pub gate: Var,
    pub soft_mask: Option<Var>,
    pub e0: Option<Var>,
    pub e_m: Option<Var>,
    pub traces: EncoderTraces,
}

/// Attention intermediates of one full encode, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct EncoderTraces {
    pub coattn1: CoattnTrace,
    pub coattn2: CoattnTrace,
    /// Absent when the entity branch was skipped.
    pub gat: Option<GatTrace>,
    pub biattn: Option<BiAttnTrace>,
}

/// Intermediates of one co-attention pass.
#[derive(Debug, Clone, Copy)]
pub struct CoattnTrace {
    /// Raw alignment `n x m`.
    pub s: Var,
    /// Per answer token, distribution over context tokens (`n x m`,
    /// columns sum to 1).
    pub s_prime: Var,
    /// Per context token, distribution over answer tokens (`m x n`,
    /// columns sum to 1).
    pub s_dprime: Var,
    /// Context-aware answer summary `d x m`.
    pub a_prime: Var,
    /// Answer-aware context summary `2d x n`.
    pub c_tilde: Var,
}

/// Per-layer graph attention matrices (`g x g`, rows sum to 1).
#[derive(Debug, Clone, Default)]
pub struct GatTrace {
    pub alphas: Vec<Var>,
}

/// Intermediates of the answer/entity bi-attention.
#[derive(Debug, Clone, Copy)]
pub struct BiAttnTrace {
    /// Answer-to-entity attention `m x g`, rows sum to 1.
    pub p: Var,
    /// Entity-to-answer weights `m x 1`, sums to 1.
    pub beta: Var,
}

/// Register all encoder parameters under their canonical names.
pub fn init_encoder_params(
    store: &mut ParamStore,
    hp: &EncoderHp,
    rng: &mut impl RngCore,
) -> Result<()> {
    if hp.d < 2 || hp.d % 2 != 0 {
        return Err(Error::Config(format!(
            "model width must be even and >= 2, got {}",
            hp.d
        )));
    }
    if hp.gcn_layers == 0 {
        return Err(Error::Config("gcn_layers must be >= 1".into()));
    }
    let (e, tag, d) = (hp.embed_dim, hp.tag_dim, hp.d);
    let half = d / 2;

    let word = Tensor::uniform(hp.vocab_size, e, e, rng);
    if hp.freeze_embeddings {
        store.insert_frozen("embed.word", word)?;
    } else {
        store.insert("embed.word", word)?;
    }
    store.insert(
        "embed.tag",
        Tensor::uniform(crate::corpus::NUM_TAGS, tag, tag, rng),
    )?;

    init_bilstm(store, "enc.ctx.l0", e + tag, half, rng)?;
    init_bilstm(store, "enc.ctx.l1", d, half, rng)?;
    init_bilstm(store, "enc.ans.l0", e, half, rng)?;
    init_bilstm(store, "enc.ans.l1", d, half, rng)?;
    init_bilstm(store, "enc.fuse1", 3 * d, half, rng)?;
    init_bilstm(store, "enc.fuse2", 3 * d, half, rng)?;

    store.insert("enc.mask.v", Tensor::uniform(d, 2 * d, 2 * d, rng))?;
    for l in 0..hp.gcn_layers {
        store.insert(
            format!("enc.gat.l{l}.w"),
            Tensor::uniform(2 * d, 2 * d, 2 * d, rng),
        )?;
        store.insert(
            format!("enc.gat.l{l}.u"),
            Tensor::uniform(4 * d, 1, 4 * d, rng),
        )?;
    }
    store.insert("enc.biattn.w_e", Tensor::uniform(d, 2 * d, 2 * d, rng))?;
    store.insert("enc.biattn.w_o", Tensor::uniform(d, 4 * d, 4 * d, rng))?;
    for w in ["w0", "w1", "w2"] {
        store.insert(format!("enc.gate.{w}"), Tensor::uniform(d, 1, d, rng))?;
    }
    store.insert("enc.gate.b", Tensor::uniform(1, 1, d, rng))?;
    Ok(())
}

/// Initial contextual encodings: context tokens get word + answer-tag
/// embeddings, answer tokens word embeddings only; both run through their
/// own two-layer bidirectional stack. Returns `(C0: d x n, A0: d x m)`.
pub fn encode_initial(
    s: &mut Session,
    enc: &EncodedExample,
    hp: &EncoderHp,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    if enc.context_ids.is_empty() || enc.answer_ids.is_empty() {
        return Err(Error::contract(
            "encode_initial",
            "context and answer must be non-empty",
        ));
    }
    let word = s.p("embed.word")?;
    let tag = s.p("embed.tag")?;

    let ctx_word = s.g.embed(word, &enc.context_ids)?;
    let ctx_tag = s.g.embed(tag, &enc.tag_ids)?;
    let ctx_in = s.g.concat_rows(&[ctx_word, ctx_tag])?;
    let c0 = bilstm_stack_run(
        s,
        "enc.ctx",
        LSTM_LAYERS,
        ctx_in,
        hp.lstm_dropout,
        rng.as_deref_mut(),
    )?;

    let ans_in = s.g.embed(word, &enc.answer_ids)?;
    let a0 = bilstm_stack_run(s, "enc.ans", LSTM_LAYERS, ans_in, hp.lstm_dropout, rng)?;
    Ok((c0, a0))
}

/// One answer-aware co-attention pass. Alignment S = C_inT A_in; each
/// answer token gets a distribution over context tokens (S', columns sum
/// to 1) and each context token a distribution over answer tokens (S'',
/// columns of the transposed alignment). The attended summaries fuse with
/// the input context through a single bidirectional layer (3d -> d).
pub fn coattention_pass(
    s: &mut Session,
    c_in: Var,
    a_in: Var,
    fuse_prefix: &str,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, CoattnTrace)> {
    let c_t = s.g.transpose(c_in)?;
    let s_raw = s.g.matmul(c_t, a_in)?;
    let s_prime = s.g.softmax(s_raw, Axis::ColWise)?;
    let s_t = s.g.transpose(s_raw)?;
    let s_dprime = s.g.softmax(s_t, Axis::ColWise)?;
    let a_prime = s.g.matmul(c_in, s_prime)?;
    let ans_cat = s.g.concat_rows(&[a_in, a_prime])?;
    let c_tilde = s.g.matmul(ans_cat, s_dprime)?;
    let fuse_in = s.g.concat_rows(&[c_tilde, c_in])?;
    let fuse_in = dropout(s, fuse_in, rate, rng)?;
    let c_out = bilstm_run(s, fuse_prefix, fuse_in)?;
    Ok((
        c_out,
        CoattnTrace {
            s: s_raw,
            s_prime,
            s_dprime,
            a_prime,
            c_tilde,
        },
    ))
}

/// Pool each entity's context encoding into a mean-max column vector:
/// output column j is `[mean; max]` over the tokens of entity j (`2d x g`).
pub fn entity_encode(s: &mut Session, c1: Var, span_map: &Tensor) -> Result<Var> {
    let n = s.g.value(c1).cols();
    let (rows, g) = span_map.shape();
    if rows != n {
        return Err(Error::contract(
            "entity_encode",
            format!("span map has {rows} rows for {n} context tokens"),
        ));
    }
    if g == 0 {
        return Err(Error::contract(
            "entity_encode",
            "no entities; callers bypass the entity branch",
        ));
    }
    let mut cols = Vec::with_capacity(g);
    for j in 0..g {
        let idxs: Vec<usize> = (0..n).filter(|&i| span_map.get(i, j) != 0.0).collect();
        if idxs.is_empty() {
            return Err(Error::contract(
                "entity_encode",
                format!("entity {j} covers no context tokens"),
            ));
        }
        let sel = Tensor::from_fn(n, idxs.len(), |i, t| f64::from(idxs[t] == i));
        let sel = s.g.constant(sel);
        let picked = s.g.matmul(c1, sel)?;
        let mean = s.g.mean_cols(picked)?;
        let max = s.g.max_cols(picked)?;
        cols.push(s.g.concat_rows(&[mean, max])?);
    }
    s.g.concat_cols(&cols)
}

/// sigma(a0T V E) for an already-pooled answer vector `a0` (`d x 1`),
/// yielding a `1 x g` mask with entries strictly inside (0,1).
fn mask_from_pooled(s: &mut Session, a0_pooled: Var, e: Var) -> Result<Var> {
    let v = s.p("enc.mask.v")?;
    let at = s.g.transpose(a0_pooled)?;
    let av = s.g.matmul(at, v)?;
    let z = s.g.matmul(av, e)?;
    s.g.sigmoid(z)
}

/// Relatedness of each entity to the answer: mean-pool A0 over answer
/// tokens, then score every entity column of E0 through the bilinear map.
pub fn soft_mask(s: &mut Session, a0: Var, e0: Var) -> Result<Var> {
    let pooled = s.g.mean_cols(a0)?;
    mask_from_pooled(s, pooled, e0)
}

/// Scale entity columns by their mask value.
pub fn apply_mask(s: &mut Session, e: Var, m: Var) -> Result<Var> {
    let rows = s.g.value(e).rows();
    let tiled = s.g.broadcast_rows(m, rows)?;
    s.g.mul(e, tiled)
}

/// Additive attention mask for a graph: 0 for neighbors and self-loops,
/// a large negative constant everywhere else.
pub fn attention_mask(graph: &EntityGraph) -> Tensor {
    Tensor::from_fn(graph.g, graph.g, |i, j| {
        if i == j || graph.has_edge(i, j) {
            0.0
        } else {
            ATTN_MASK
        }
    })
}

/// Masked entity-graph propagation. The soft mask scales E0 once up
/// front; each layer scores node pairs with a shared attention vector
/// over transformed features, normalizes over the neighborhood
/// (self-loops included via `adj_mask`), and aggregates with ReLU.
/// `remask` carries the pooled answer vector when the mask is to be
/// recomputed before every layer after the first.
pub fn gat_propagate(
    s: &mut Session,
    e0: Var,
    m: Var,
    adj_mask: &Tensor,
    layers: usize,
    remask: Option<Var>,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, GatTrace)> {
    let g = s.g.value(e0).cols();
    let mut e = apply_mask(s, e0, m)?;
    let mut trace = GatTrace::default();
    for l in 0..layers {
        if l > 0 {
            if let Some(a0_pooled) = remask {
                let m_l = mask_from_pooled(s, a0_pooled, e)?;
                e = apply_mask(s, e, m_l)?;
            }
        }
        let e_in = dropout(s, e, rate, rng.as_deref_mut())?;
        let w = s.p(&format!("enc.gat.l{l}.w"))?;
        let u = s.p(&format!("enc.gat.l{l}.u"))?;
        let two_d = s.g.value(w).rows();
        let h = s.g.matmul(w, e_in)?;
        let ua = s.g.slice_rows(u, 0, two_d)?;
        let ub = s.g.slice_rows(u, two_d, 2 * two_d)?;
        let ua_t = s.g.transpose(ua)?;
        let ub_t = s.g.transpose(ub)?;
        let from = s.g.matmul(ua_t, h)?;
        let to = s.g.matmul(ub_t, h)?;
        let from_col = s.g.transpose(from)?;
        let from_tiled = s.g.broadcast_cols(from_col, g)?;
        let to_tiled = s.g.broadcast_rows(to, g)?;
        let scores = s.g.add(from_tiled, to_tiled)?;
        let scores = s.g.leaky_relu(scores, GAT_LEAKY_SLOPE)?;
        let mask_c = s.g.constant(adj_mask.clone());
        let scores = s.g.add(scores, mask_c)?;
        let alpha = s.g.softmax(scores, Axis::RowWise)?;
        let alpha_t = s.g.transpose(alpha)?;
        let agg = s.g.matmul(h, alpha_t)?;
        e = s.g.relu(agg)?;
        trace.alphas.push(alpha);
    }
    Ok((e, trace))
}

/// Update the answer encoding against the propagated entity memories:
/// answer-to-entity attention per token plus an entity-salience-weighted
/// answer summary, fused through an output projection back to `d x m`.
pub fn bi_attention(s: &mut Session, a0: Var, e_m: Var) -> Result<(Var, BiAttnTrace)> {
    let w_e = s.p("enc.biattn.w_e")?;
    let w_o = s.p("enc.biattn.w_o")?;
    let m = s.g.value(a0).cols();

    let e_hat = s.g.matmul(w_e, e_m)?;
    let a_t = s.g.transpose(a0)?;
    let sim = s.g.matmul(a_t, e_hat)?;
    let p = s.g.softmax(sim, Axis::RowWise)?;
    let p_t = s.g.transpose(p)?;
    let e_tilde = s.g.matmul(e_hat, p_t)?;

    let best = s.g.max_cols(sim)?;
    let beta = s.g.softmax(best, Axis::ColWise)?;
    let pooled = s.g.matmul(a0, beta)?;
    let a_bar = s.g.broadcast_cols(pooled, m)?;

    let prod_e = s.g.mul(a0, e_tilde)?;
    let prod_a = s.g.mul(a0, a_bar)?;
    let fused = s.g.concat_rows(&[a0, e_tilde, prod_e, prod_a])?;
    let a1 = s.g.matmul(w_o, fused)?;
    Ok((a1, BiAttnTrace { p, beta }))
}

/// Positionwise convex gate over the two context encodings:
/// g = sigma(w2T C2 + w1T C1 + w0T C0 + b), C_final = g*C1 + (1-g)*C2.
pub fn reason_gate(s: &mut Session, c0: Var, c1: Var, c2: Var) -> Result<(Var, Var)> {
    let (d, n) = s.g.value(c1).shape();
    let mut z = {
        let w2 = s.p("enc.gate.w2")?;
        let w2t = s.g.transpose(w2)?;
        s.g.matmul(w2t, c2)?
    };
    for (w_name, c) in [("enc.gate.w1", c1), ("enc.gate.w0", c0)] {
        let w = s.p(w_name)?;
        let wt = s.g.transpose(w)?;
        let term = s.g.matmul(wt, c)?;
        z = s.g.add(z, term)?;
    }
    let b = s.p("enc.gate.b")?;
    let b_row = s.g.broadcast_cols(b, n)?;
    z = s.g.add(z, b_row)?;
    let gate = s.g.sigmoid(z)?;

    let g_full = s.g.broadcast_rows(gate, d)?;
    let g_rest = s.g.one_minus(g_full)?;
    let keep = s.g.mul(g_full, c1)?;
    let swap = s.g.mul(g_rest, c2)?;
    let c_final = s.g.add(keep, swap)?;
    Ok((c_final, gate))
}

/// Full encoder pipeline. `span_map` is `n x g` (rows must match the
/// encoded context length); examples without entities, or runs with the
/// entity branch bypassed, skip straight to the second pass with A1 = A0.
pub fn encode(
    s: &mut Session,
    enc: &EncodedExample,
    graph: &EntityGraph,
    span_map: &Tensor,
    hp: &EncoderHp,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutputs> {
    if span_map.rows() != enc.context_ids.len() {
        return Err(Error::contract(
            "encode",
            format!(
                "span map rows {} do not match context length {}",
                span_map.rows(),
                enc.context_ids.len()
            ),
        ));
    }
    let (c0, a0) = encode_initial(s, enc, hp, rng.as_deref_mut())?;
    let (c1, coattn1) =
        coattention_pass(s, c0, a0, "enc.fuse1", hp.lstm_dropout, rng.as_deref_mut())?;

    let (a1, soft_mask_v, e0_v, e_m_v, gat, biattn) = if graph.g == 0 || hp.bypass_gcn {
        (a0, None, None, None, None, None)
    } else {
        let e0 = entity_encode(s, c1, span_map)?;
        let pooled = s.g.mean_cols(a0)?;
        let m = mask_from_pooled(s, pooled, e0)?;
        let adj_mask = attention_mask(graph);
        let remask = hp.mask_per_layer.then_some(pooled);
        let (e_m, gat) = gat_propagate(
            s,
            e0,
            m,
            &adj_mask,
            hp.gcn_layers,
            remask,
            hp.gcn_dropout,
            rng.as_deref_mut(),
        )?;
        let (a1, biattn) = bi_attention(s, a0, e_m)?;
        (a1, Some(m), Some(e0), Some(e_m), Some(gat), Some(biattn))
    };

    let (c2, coattn2) = coattention_pass(s, c1, a1, "enc.fuse2", hp.lstm_dropout, rng)?;
    let (c_final, gate) = reason_gate(s, c0, c1, c2)?;
    Ok(EncoderOutputs {
        c0,
        a0,
        c1,
        a1,
        c2,
        c_final,
        gate,
        soft_mask: soft_mask_v,
        e0: e0_v,
        e_m: e_m_v,
        traces: EncoderTraces {
            coattn1,
            coattn2,
            gat,
            biattn,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FlatContext, TAG_B, TAG_O};
    use crate::entgraph::{build_graph, span_map, EdgeMode, Mention};
    use crate::num::grad_check;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn tiny_hp(vocab: usize, e: usize, tag: usize, d: usize) -> EncoderHp {
        EncoderHp {
            vocab_size: vocab,
            embed_dim: e,
            tag_dim: tag,
            d,
            ..EncoderHp::default()
        }
    }

    fn init_store(hp: &EncoderHp, seed: u64) -> ParamStore {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_params(&mut ps, hp, &mut rng).unwrap();
        ps
    }

    fn fake_example(n: usize, m: usize, vocab: usize) -> EncodedExample {
        let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        EncodedExample {
            id: "t".into(),
            context_ids: (0..n).map(|i| 4 + i % (vocab - 4)).collect(),
            tag_ids: (0..n).map(|i| if i == 0 { TAG_B } else { TAG_O }).collect(),
            answer_ids: (0..m).map(|i| 4 + (i + 1) % (vocab - 4)).collect(),
            question_ids: vec![3],
            oov_map: vec![None; n],
            flat: FlatContext {
                tokens,
                answer_span: (0, 1),
                units: vec![],
            },
        }
    }

    fn mention(entity: usize, para: usize, sent: Option<usize>, span: (usize, usize)) -> Mention {
        Mention {
            entity_idx: entity,
            surface: vec![format!("e{entity}")],
            paragraph_idx: para,
            sentence_idx: sent,
            span,
        }
    }

    #[test]
    fn zero_parameters_collapse_initial_encodings_to_zero() {
        let hp = tiny_hp(12, 4, 3, 4);
        let mut ps = init_store(&hp, 7);
        let names: Vec<String> = ps.names().cloned().collect();
        for name in names {
            let (r, c) = ps.get(&name).unwrap().shape();
            *ps.get_mut(&name).unwrap() = Tensor::zeros(r, c).param();
        }
        let enc = fake_example(5, 2, 12);
        let mut s = Session::new(&ps);
        let (c0, a0) = encode_initial(&mut s, &enc, &hp, None).unwrap();
        assert_eq!(s.g.value(c0).shape(), (4, 5));
        assert_eq!(s.g.value(a0).shape(), (4, 2));
        assert!(s.g.value(c0).data().iter().all(|&v| v == 0.0));
        assert!(s.g.value(a0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_context_and_answer_shapes() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 3);
        let enc = fake_example(1, 1, 12);
        let mut s = Session::new(&ps);
        let (c0, a0) = encode_initial(&mut s, &enc, &hp, None).unwrap();
        assert_eq!(s.g.value(c0).shape(), (4, 1));
        assert_eq!(s.g.value(a0).shape(), (4, 1));
    }

    #[test]
    fn empty_context_or_answer_is_rejected() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 3);
        let mut enc = fake_example(3, 1, 12);
        enc.answer_ids.clear();
        let mut s = Session::new(&ps);
        assert!(encode_initial(&mut s, &enc, &hp, None).is_err());
    }

    #[test]
    fn coattention_alignment_hand_instance() {
        // C_in columns (1,0) and (2,1); answer token (1,2).
        // Alignments: 1 and 4, so the context distribution for the single
        // answer token is (1-sigma(3), sigma(3)).
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 5);
        let mut s = Session::new(&ps);
        let c_in =
            s.g.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap());
        let a_in =
            s.g.constant(Tensor::from_vec(2, 1, vec![1.0, 2.0]).unwrap());
        let c_t = s.g.transpose(c_in).unwrap();
        let s_raw = s.g.matmul(c_t, a_in).unwrap();
        assert_eq!(s.g.value(s_raw).data(), &[1.0, 4.0]);

        let s_prime = s.g.softmax(s_raw, Axis::ColWise).unwrap();
        let sig3 = 0.9525741268224334;
        assert!((s.g.value(s_prime).get(0, 0) - (1.0 - sig3)).abs() < 1e-9);
        assert!((s.g.value(s_prime).get(1, 0) - sig3).abs() < 1e-9);

        let s_t = s.g.transpose(s_raw).unwrap();
        let s_dprime = s.g.softmax(s_t, Axis::ColWise).unwrap();
        assert_eq!(s.g.value(s_dprime).data(), &[1.0, 1.0]);

        let a_prime = s.g.matmul(c_in, s_prime).unwrap();
        assert!((s.g.value(a_prime).get(0, 0) - (1.0 + sig3)).abs() < 1e-9);
        assert!((s.g.value(a_prime).get(1, 0) - sig3).abs() < 1e-9);

        let cat = s.g.concat_rows(&[a_in, a_prime]).unwrap();
        let c_tilde = s.g.matmul(cat, s_dprime).unwrap();
        for col in 0..2 {
            assert!((s.g.value(c_tilde).get(0, col) - 1.0).abs() < 1e-9);
            assert!((s.g.value(c_tilde).get(1, col) - 2.0).abs() < 1e-9);
            assert!((s.g.value(c_tilde).get(2, col) - (1.0 + sig3)).abs() < 1e-9);
            assert!((s.g.value(c_tilde).get(3, col) - sig3).abs() < 1e-9);
        }
    }

    #[test]
    fn coattention_single_token_pair_passes_inputs_through() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 5);
        let mut s = Session::new(&ps);
        let c_in =
            s.g.constant(Tensor::from_vec(4, 1, vec![0.3, -0.1, 0.8, 0.2]).unwrap());
        let a_in =
            s.g.constant(Tensor::from_vec(4, 1, vec![0.5, 0.4, -0.6, 0.1]).unwrap());
        let (c_out, tr) = coattention_pass(&mut s, c_in, a_in, "enc.fuse1", 0.0, None).unwrap();
        assert_eq!(s.g.value(tr.s_prime).data(), &[1.0]);
        assert_eq!(s.g.value(tr.s_dprime).data(), &[1.0]);
        assert_eq!(s.g.value(tr.a_prime).data(), s.g.value(c_in).data());
        let expect: Vec<f64> = [0.5, 0.4, -0.6, 0.1, 0.3, -0.1, 0.8, 0.2].to_vec();
        assert_eq!(s.g.value(tr.c_tilde).data(), &expect[..]);
        assert_eq!(s.g.value(c_out).shape(), (4, 1));
    }

    #[test]
    fn coattention_columns_normalize() {
        let hp = tiny_hp(12, 4, 3, 8);
        let ps = init_store(&hp, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut s = Session::new(&ps);
        let c_in = s.g.constant(Tensor::uniform(8, 7, 1, &mut rng));
        let a_in = s.g.constant(Tensor::uniform(8, 3, 1, &mut rng));
        let (_, tr) = coattention_pass(&mut s, c_in, a_in, "enc.fuse1", 0.0, None).unwrap();
        let sp = s.g.value(tr.s_prime);
        for j in 0..3 {
            let sum: f64 = (0..7).map(|i| sp.get(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let sd = s.g.value(tr.s_dprime);
        for j in 0..7 {
            let sum: f64 = (0..3).map(|i| sd.get(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn entity_pooling_mean_and_max() {
        let ps = ParamStore::new();
        let mut s = Session::new(&ps);
        // columns: (1,0), (3,2), (5,-1)
        let c1 =
            s.g.constant(Tensor::from_vec(2, 3, vec![1.0, 3.0, 5.0, 0.0, 2.0, -1.0]).unwrap());
        // entity 0 = token 0 alone; entity 1 = tokens {0,1}
        let sm = Tensor::from_vec(3, 2, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let e0 = entity_encode(&mut s, c1, &sm).unwrap();
        assert_eq!(s.g.value(e0).shape(), (4, 2));
        // single-token entity: mean = max = the token column
        assert_eq!(
            (0..4).map(|i| s.g.value(e0).get(i, 0)).collect::<Vec<_>>(),
            vec![1.0, 0.0, 1.0, 0.0]
        );
        // two-token entity: first coordinate has values 1 and 3
        assert_eq!(
            (0..4).map(|i| s.g.value(e0).get(i, 1)).collect::<Vec<_>>(),
            vec![2.0, 1.0, 3.0, 2.0]
        );
    }

    #[test]
    fn entity_with_no_tokens_is_rejected() {
        let ps = ParamStore::new();
        let mut s = Session::new(&ps);
        let c1 = s.g.constant(Tensor::from_fn(2, 3, |i, j| (i + j) as f64));
        let sm = Tensor::zeros(3, 1);
        assert!(entity_encode(&mut s, c1, &sm).is_err());
    }

    #[test]
    fn zero_projection_gives_half_mask() {
        let hp = tiny_hp(12, 4, 3, 4);
        let mut ps = init_store(&hp, 9);
        let (r, c) = ps.get("enc.mask.v").unwrap().shape();
        *ps.get_mut("enc.mask.v").unwrap() = Tensor::zeros(r, c).param();
        let mut s = Session::new(&ps);
        let a0 =
            s.g.constant(Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1));
        let e0 =
            s.g.constant(Tensor::from_fn(8, 5, |i, j| (i + j) as f64 * 0.1));
        let m = soft_mask(&mut s, a0, e0).unwrap();
        assert_eq!(s.g.value(m).shape(), (1, 5));
        assert!(s.g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn soft_mask_matches_direct_formula() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a0_t = Tensor::uniform(4, 3, 1, &mut rng);
        let e0_t = Tensor::uniform(8, 5, 1, &mut rng);
        let v = ps.get("enc.mask.v").unwrap().clone();

        let mut s = Session::new(&ps);
        let a0 = s.g.constant(a0_t.clone());
        let e0 = s.g.constant(e0_t.clone());
        let m = soft_mask(&mut s, a0, e0).unwrap();

        for j in 0..5 {
            let mut z = 0.0;
            for p in 0..4 {
                let pooled: f64 = (0..3).map(|q| a0_t.get(p, q)).sum::<f64>() / 3.0;
                for r in 0..8 {
                    z += pooled * v.get(p, r) * e0_t.get(r, j);
                }
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((s.g.value(m).get(0, j) - expect).abs() < 1e-12);
            assert!(expect > 0.0 && expect < 1.0);
        }
    }

    #[test]
    fn identity_mask_keeps_entity_features() {
        let ps = ParamStore::new();
        let mut s = Session::new(&ps);
        let e0 =
            s.g.constant(Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64));
        let ones = s.g.constant(Tensor::from_fn(1, 3, |_, _| 1.0));
        let masked = apply_mask(&mut s, e0, ones).unwrap();
        assert_eq!(s.g.value(masked).data(), s.g.value(e0).data());
    }

    #[test]
    fn isolated_node_attends_only_to_itself() {
        let hp = tiny_hp(12, 4, 3, 2);
        let ps = init_store(&hp, 21);
        let mut s = Session::new(&ps);
        let e0 =
            s.g.constant(Tensor::from_vec(4, 1, vec![0.4, -0.3, 0.7, 0.1]).unwrap());
        let ones = s.g.constant(Tensor::from_fn(1, 1, |_, _| 1.0));
        let adj = Tensor::zeros(1, 1);
        let (e_m, tr) = gat_propagate(&mut s, e0, ones, &adj, 1, None, 0.0, None).unwrap();
        assert_eq!(s.g.value(tr.alphas[0]).data(), &[1.0]);

        let w = ps.get("enc.gat.l0.w").unwrap();
        let e0_t = s.g.value(e0).clone();
        for i in 0..4 {
            let z: f64 = (0..4).map(|k| w.get(i, k) * e0_t.get(k, 0)).sum();
            assert!((s.g.value(e_m).get(i, 0) - z.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_normalize_on_random_graphs() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 31);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let g = 2 + (rng.next_u64() % 5) as usize;
            let mut adj = Tensor::from_fn(g, g, |_, _| 0.0);
            for i in 0..g {
                for j in 0..i {
                    if rng.next_u64() % 2 == 0 {
                        adj.set(i, j, super::ATTN_MASK);
                        adj.set(j, i, super::ATTN_MASK);
                    }
                }
            }
            let mut s = Session::new(&ps);
            let e0 = s.g.constant(Tensor::uniform(8, g, 1, &mut rng));
            let m =
                s.g.constant(Tensor::from_fn(1, g, |_, j| 0.2 + 0.1 * j as f64));
            let (_, tr) = gat_propagate(&mut s, e0, m, &adj, 2, None, 0.0, None).unwrap();
            for alpha in &tr.alphas {
                let a = s.g.value(*alpha);
                for i in 0..g {
                    let sum: f64 = (0..g).map(|j| a.get(i, j)).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn single_entity_bi_attention_attends_fully() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = Session::new(&ps);
        let a0 = s.g.constant(Tensor::uniform(4, 3, 1, &mut rng));
        let e_m = s.g.constant(Tensor::uniform(8, 1, 1, &mut rng));
        let (a1, tr) = bi_attention(&mut s, a0, e_m).unwrap();
        assert_eq!(s.g.value(a1).shape(), (4, 3));
        assert!(s.g.value(tr.p).data().iter().all(|&v| v == 1.0));
        let beta_sum: f64 = s.g.value(tr.beta).data().iter().sum();
        assert!((beta_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_gate_returns_first_pass_encoding() {
        let hp = tiny_hp(12, 4, 3, 4);
        let mut ps = init_store(&hp, 23);
        for w in ["enc.gate.w0", "enc.gate.w1", "enc.gate.w2"] {
            *ps.get_mut(w).unwrap() = Tensor::zeros(4, 1).param();
        }
        *ps.get_mut("enc.gate.b").unwrap() = Tensor::from_vec(1, 1, vec![20.0]).unwrap().param();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = Session::new(&ps);
        let c0 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let c1 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let c2 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let (c_final, gate) = reason_gate(&mut s, c0, c1, c2).unwrap();
        for (got, want) in s.g.value(c_final).data().iter().zip(s.g.value(c1).data()) {
            assert!((got - want).abs() < 1e-8);
        }
        assert!(s.g.value(gate).data().iter().all(|&v| v > 0.999));
    }

    #[test]
    fn neutral_gate_averages_both_passes() {
        let hp = tiny_hp(12, 4, 3, 4);
        let mut ps = init_store(&hp, 23);
        for w in ["enc.gate.w0", "enc.gate.w1", "enc.gate.w2"] {
            *ps.get_mut(w).unwrap() = Tensor::zeros(4, 1).param();
        }
        *ps.get_mut("enc.gate.b").unwrap() = Tensor::zeros(1, 1).param();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = Session::new(&ps);
        let c0 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let c1 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let c2 = s.g.constant(Tensor::uniform(4, 5, 1, &mut rng));
        let (c_final, _) = reason_gate(&mut s, c0, c1, c2).unwrap();
        let c1v = s.g.value(c1).clone();
        let c2v = s.g.value(c2).clone();
        for (i, got) in s.g.value(c_final).data().iter().enumerate() {
            let want = (c1v.data()[i] + c2v.data()[i]) / 2.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_encoding_stays_between_the_passes() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = Session::new(&ps);
        let c0 = s.g.constant(Tensor::uniform(4, 6, 1, &mut rng));
        let c1 = s.g.constant(Tensor::uniform(4, 6, 1, &mut rng));
        let c2 = s.g.constant(Tensor::uniform(4, 6, 1, &mut rng));
        let (c_final, _) = reason_gate(&mut s, c0, c1, c2).unwrap();
        let c1v = s.g.value(c1).clone();
        let c2v = s.g.value(c2).clone();
        for (i, &got) in s.g.value(c_final).data().iter().enumerate() {
            let lo = c1v.data()[i].min(c2v.data()[i]);
            let hi = c1v.data()[i].max(c2v.data()[i]);
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }

    /// Two entities in paragraph 0 (linked), one alone in paragraph 1.
    fn toy_graph(n: usize) -> (Vec<Mention>, EntityGraph) {
        let mentions = vec![
            mention(0, 0, Some(0), (0, 1)),
            mention(1, 0, Some(0), (2, 3)),
            mention(2, 1, Some(0), (4, 6)),
        ];
        let mut graph = build_graph(&mentions, 3, EdgeMode::Both);
        crate::entgraph::identify_answer_entities(&mut graph, &["e0".into()], (0, 1));
        let _ = n;
        (mentions, graph)
    }

    #[test]
    fn full_pipeline_without_entities_bypasses_answer_update() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 37);
        let enc = fake_example(6, 2, 12);
        let graph = build_graph(&[], 0, EdgeMode::Both);
        let sm = Tensor::zeros(6, 0);
        let mut s = Session::new(&ps);
        let out = encode(&mut s, &enc, &graph, &sm, &hp, None).unwrap();
        assert_eq!(out.a1, out.a0);
        assert!(out.soft_mask.is_none());
        assert!(out.e0.is_none());
        assert_eq!(s.g.value(out.c_final).shape(), (4, 6));
        assert_eq!(s.g.value(out.gate).shape(), (1, 6));
    }

    #[test]
    fn full_pipeline_retains_entity_intermediates() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 41);
        let enc = fake_example(6, 2, 12);
        let (mentions, graph) = toy_graph(6);
        let sm = span_map(&mentions, 3, 6).unwrap();
        let mut s = Session::new(&ps);
        let out = encode(&mut s, &enc, &graph, &sm, &hp, None).unwrap();
        let mask = s.g.value(out.soft_mask.unwrap());
        assert_eq!(mask.shape(), (1, 3));
        assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s.g.value(out.e0.unwrap()).shape(), (8, 3));
        assert_eq!(s.g.value(out.e_m.unwrap()).shape(), (8, 3));
        assert_eq!(s.g.value(out.a1).shape(), (4, 2));
        assert_ne!(out.a1, out.a0);
    }

    #[test]
    fn bypass_flag_skips_entity_branch_even_with_entities() {
        let mut hp = tiny_hp(12, 4, 3, 4);
        hp.bypass_gcn = true;
        let ps = init_store(&hp, 41);
        let enc = fake_example(6, 2, 12);
        let (mentions, graph) = toy_graph(6);
        let sm = span_map(&mentions, 3, 6).unwrap();
        let mut s = Session::new(&ps);
        let out = encode(&mut s, &enc, &graph, &sm, &hp, None).unwrap();
        assert_eq!(out.a1, out.a0);
        assert!(out.e_m.is_none());
    }

    #[test]
    fn entity_order_does_not_change_the_encoding() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 43);
        let enc = fake_example(6, 2, 12);

        let (mentions, graph) = toy_graph(6);
        let sm = span_map(&mentions, 3, 6).unwrap();
        let mut s1 = Session::new(&ps);
        let out1 = encode(&mut s1, &enc, &graph, &sm, &hp, None).unwrap();

        // permutation 0->2, 1->0, 2->1 applied consistently
        let perm = [2usize, 0, 1];
        let permuted: Vec<Mention> = mentions
            .iter()
            .map(|m| {
                let mut m2 = m.clone();
                m2.entity_idx = perm[m.entity_idx];
                m2
            })
            .collect();
        let graph2 = build_graph(&permuted, 3, EdgeMode::Both);
        let sm2 = span_map(&permuted, 3, 6).unwrap();
        let mut s2 = Session::new(&ps);
        let out2 = encode(&mut s2, &enc, &graph2, &sm2, &hp, None).unwrap();

        let c1 = s1.g.value(out1.c_final);
        let c2 = s2.g.value(out2.c_final);
        for (a, b) in c1.data().iter().zip(c2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let m1 = s1.g.value(out1.soft_mask.unwrap());
        let m2 = s2.g.value(out2.soft_mask.unwrap());
        for j in 0..3 {
            assert!((m1.get(0, j) - m2.get(0, perm[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn per_layer_remasking_changes_the_propagation() {
        let hp = tiny_hp(12, 4, 3, 4);
        let ps = init_store(&hp, 47);
        let enc = fake_example(6, 2, 12);
        let (mentions, graph) = toy_graph(6);
        let sm = span_map(&mentions, 3, 6).unwrap();

        let mut s1 = Session::new(&ps);
        let out1 = encode(&mut s1, &enc, &graph, &sm, &hp, None).unwrap();
        let mut hp2 = hp.clone();
        hp2.mask_per_layer = true;
        let mut s2 = Session::new(&ps);
        let out2 = encode(&mut s2, &enc, &graph, &sm, &hp2, None).unwrap();
        let a = s1.g.value(out1.e_m.unwrap());
        let b = s2.g.value(out2.e_m.unwrap());
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let hp = tiny_hp(20, 8, 4, 8);
        let mut ps = init_store(&hp, 53);
        let n = 12;
        let enc = fake_example(n, 3, 20);
        let mentions = vec![
            mention(0, 0, Some(0), (0, 1)),
            mention(1, 0, Some(0), (2, 3)),
            mention(2, 1, Some(0), (5, 7)),
            mention(3, 1, Some(1), (8, 9)),
        ];
        let graph = build_graph(&mentions, 4, EdgeMode::Both);
        let sm = span_map(&mentions, 4, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w_c = Tensor::uniform(8, n, 1, &mut rng);
        let w_a = Tensor::uniform(8, 3, 1, &mut rng);

        let report = grad_check(
            &mut ps,
            |s| {
                let out = encode(s, &enc, &graph, &sm, &hp, None)?;
                let wc = s.g.constant(w_c.clone());
                let wa = s.g.constant(w_a.clone());
                let rc = s.g.mul(out.c_final, wc)?;
                let rc = s.g.mean_cols(rc)?;
                let rc = s.g.mean_rows(rc)?;
                let ra = s.g.mul(out.a1, wa)?;
                let ra = s.g.mean_cols(ra)?;
                let ra = s.g.mean_rows(ra)?;
                let rm = s.g.mean_cols(out.soft_mask.expect("entities present"))?;
                let sum = s.g.add(rc, ra)?;
                s.g.add(sum, rm)
            },
            1e-4,
        )
        .unwrap();
        assert!(
            report.passes(1e-4),
            "worst entries: {:?}",
            report.failures(1e-4).first()
        );
    }
}
