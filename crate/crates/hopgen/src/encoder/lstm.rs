use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::error::Result;
use crate::num::{ParamStore, Session, Tensor, Var};

/// Gate order inside the stacked weight matrices: input, forget, cell
/// candidate, output.
const GATES: usize = 4;

/// Register one LSTM direction under `prefix`: `w_x` (4h x in),
/// `w_h` (4h x h), `b` (4h x 1), all uniform in +-1/sqrt(fan_in).
pub fn init_lstm_dir(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl RngCore,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w_x"),
        Tensor::uniform(GATES * hidden, in_dim, in_dim, rng),
    )?;
    store.insert(
        format!("{prefix}.w_h"),
        Tensor::uniform(GATES * hidden, hidden, hidden, rng),
    )?;
    store.insert(
        format!("{prefix}.b"),
        Tensor::uniform(GATES * hidden, 1, in_dim, rng),
    )?;
    Ok(())
}

/// Register a bidirectional layer (`prefix.fwd`, `prefix.bwd`).
pub fn init_bilstm(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl RngCore,
) -> Result<()> {
    init_lstm_dir(store, &format!("{prefix}.fwd"), in_dim, hidden, rng)?;
    init_lstm_dir(store, &format!("{prefix}.bwd"), in_dim, hidden, rng)
}

/// One LSTM cell step: returns (h_t, c_t), both `h x 1`.
pub fn lstm_cell(
    s: &mut Session,
    prefix: &str,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let w_x = s.p(&format!("{prefix}.w_x"))?;
    let w_h = s.p(&format!("{prefix}.w_h"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    let hidden = s.g.value(w_h).cols();

    let zx = s.g.matmul(w_x, x)?;
    let zh = s.g.matmul(w_h, h_prev)?;
    let z = s.g.add(zx, zh)?;
    let z = s.g.add(z, b)?;

    let i_gate = s.g.slice_rows(z, 0, hidden)?;
    let f_gate = s.g.slice_rows(z, hidden, 2 * hidden)?;
    let g_cand = s.g.slice_rows(z, 2 * hidden, 3 * hidden)?;
    let o_gate = s.g.slice_rows(z, 3 * hidden, 4 * hidden)?;

    let i_gate = s.g.sigmoid(i_gate)?;
    let f_gate = s.g.sigmoid(f_gate)?;
    let g_cand = s.g.tanh(g_cand)?;
    let o_gate = s.g.sigmoid(o_gate)?;

    let keep = s.g.mul(f_gate, c_prev)?;
    let write = s.g.mul(i_gate, g_cand)?;
    let c_t = s.g.add(keep, write)?;
    let c_act = s.g.tanh(c_t)?;
    let h_t = s.g.mul(o_gate, c_act)?;
    Ok((h_t, c_t))
}

/// Run one direction over a whole sequence `x` (`in x T`), producing
/// hidden states aligned with input positions (`h x T`). `reverse`
/// processes right-to-left but still emits position-aligned columns.
pub fn lstm_dir_run(s: &mut Session, prefix: &str, x: Var, reverse: bool) -> Result<Var> {
    let t_len = s.g.value(x).cols();
    let hidden = s.store().get(&format!("{prefix}.w_h"))?.cols();
    let mut h = s.g.constant(Tensor::zeros(hidden, 1));
    let mut c = s.g.constant(Tensor::zeros(hidden, 1));
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    let mut cols = vec![None; t_len];
    for &t in &order {
        let x_t = s.g.slice_cols(x, t, t + 1)?;
        let (h_t, c_t) = lstm_cell(s, prefix, x_t, h, c)?;
        h = h_t;
        c = c_t;
        cols[t] = Some(h_t);
    }
    let cols: Vec<Var> = cols.into_iter().map(|c| c.expect("all filled")).collect();
    s.g.concat_cols(&cols)
}

/// Bidirectional layer: forward and backward hidden states concatenated
/// feature-wise (`2h x T`).
pub fn bilstm_run(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let fwd = lstm_dir_run(s, &format!("{prefix}.fwd"), x, false)?;
    let bwd = lstm_dir_run(s, &format!("{prefix}.bwd"), x, true)?;
    s.g.concat_rows(&[fwd, bwd])
}

/// Inverted dropout as a constant mask multiply; `None` rng means
/// evaluation mode (identity). Surviving entries scale by 1/(1-rate) so
/// expectations match between train and eval.
pub fn dropout(s: &mut Session, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = s.g.value(x).shape();
    let scale = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(r, c, |_, _| {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u < rate {
            0.0
        } else {
            scale
        }
    });
    let mask = s.g.constant(mask);
    s.g.mul(x, mask)
}

/// Stack of bidirectional layers `prefix.l0 .. prefix.l{layers-1}`, with
/// dropout on each layer's input when an rng is supplied.
pub fn bilstm_stack_run(
    s: &mut Session,
    prefix: &str,
    layers: usize,
    x: Var,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut cur = x;
    for l in 0..layers {
        cur = dropout(s, cur, rate, rng.as_deref_mut())?;
        cur = bilstm_run(s, &format!("{prefix}.l{l}"), cur)?;
    }
    Ok(cur)
}
