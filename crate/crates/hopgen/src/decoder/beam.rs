//! Beam search over a pluggable per-step distribution source, so the
//! same search drives the live model and table-driven test oracles.

use crate::corpus::{EOS, SOS};
use crate::decoder::{init_state, step, DecoderState, ExtendedVocab};
use crate::error::{Error, Result};
use crate::num::{Session, Var, LOG_CLAMP};

/// Anything that can consume one token and yield log-probabilities over
/// a fixed id space.
pub trait BeamStepper {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Consume `prev` in `state`; return log-probabilities for every
    /// candidate id plus the advanced state.
    fn advance(&mut self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;

    /// Size of the candidate id space.
    fn num_ids(&self) -> usize;
}

/// One in-progress or finished decode. `ids` are the emitted tokens,
/// including the final EOS when one was generated.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub ids: Vec<usize>,
    /// Cumulative log-probability; non-increasing as tokens append.
    pub logp: f64,
    pub state: S,
    pub done: bool,
}

impl<S> Hypothesis<S> {
    /// Length-normalized ranking score.
    pub fn score(&self) -> f64 {
        self.logp / self.ids.len().max(1) as f64
    }

    /// Emitted tokens without the terminating EOS.
    pub fn emitted(&self) -> &[usize] {
        match self.ids.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &self.ids,
        }
    }
}

/// Standard beam search: hypotheses start at SOS, finish at EOS or
/// `max_len` tokens, expand by cumulative log-probability, and rank at
/// the end by length-normalized log-probability with ties going to the
/// lexicographically smaller id sequence. Returns hypotheses best-first.
pub fn beam_search<T: BeamStepper>(
    stepper: &mut T,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis<T::State>>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::contract(
            "beam_search",
            "beam width and max length must be at least 1",
        ));
    }
    let mut beams = vec![Hypothesis {
        ids: Vec::new(),
        logp: 0.0,
        state: stepper.initial()?,
        done: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut candidates: Vec<Hypothesis<T::State>> = Vec::new();
        for h in &beams {
            if h.done {
                candidates.push(h.clone());
                continue;
            }
            let prev = h.ids.last().copied().unwrap_or(SOS);
            let (logps, state) = stepper.advance(&h.state, prev)?;
            if logps.len() != stepper.num_ids() {
                return Err(Error::contract(
                    "beam_search",
                    format!(
                        "stepper yielded {} log-probs for {} ids",
                        logps.len(),
                        stepper.num_ids()
                    ),
                ));
            }
            for (id, &lp) in logps.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(id);
                candidates.push(Hypothesis {
                    ids,
                    logp: h.logp + lp,
                    state: state.clone(),
                    done: id == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.ids.cmp(&b.ids)));
        candidates.truncate(beam);
        beams = candidates;
    }
    beams.sort_by(|a, b| {
        b.score()
            .total_cmp(&a.score())
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(beams)
}

/// Argmax decoding: ties go to the lowest id, like a width-1 beam.
pub fn greedy_decode<T: BeamStepper>(
    stepper: &mut T,
    max_len: usize,
) -> Result<Hypothesis<T::State>> {
    let mut h = Hypothesis {
        ids: Vec::new(),
        logp: 0.0,
        state: stepper.initial()?,
        done: false,
    };
    for _ in 0..max_len {
        let prev = h.ids.last().copied().unwrap_or(SOS);
        let (logps, state) = stepper.advance(&h.state, prev)?;
        let mut best = 0;
        for (id, &lp) in logps.iter().enumerate() {
            if lp > logps[best] {
                best = id;
            }
        }
        h.ids.push(best);
        h.logp += logps[best];
        h.state = state;
        if best == EOS {
            h.done = true;
            break;
        }
    }
    Ok(h)
}

/// Live-model stepper: each advance runs one decoder step in evaluation
/// mode inside the borrowed session.
pub struct ModelStepper<'a, 'b> {
    pub session: &'a mut Session<'b>,
    pub c_final: Var,
    pub ext: &'a ExtendedVocab,
}

impl BeamStepper for ModelStepper<'_, '_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        init_state(self.session, self.c_final)
    }

    fn advance(&mut self, state: &DecoderState, prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let out = step(self.session, state, prev, self.c_final, self.ext, 0.0, None)?;
        let logps = self
            .session
            .g
            .value(out.dist)
            .data()
            .iter()
            .map(|&p| p.max(LOG_CLAMP).ln())
            .collect();
        Ok((logps, out.state))
    }

    fn num_ids(&self) -> usize {
        self.ext.size()
    }
}

/// Fixed-table stepper for oracles: `table[step][prev]` is the
/// probability distribution after consuming `prev` at `step`.
pub struct TableStepper {
    pub table: Vec<Vec<Vec<f64>>>,
}

impl BeamStepper for TableStepper {
    type State = usize;

    fn initial(&mut self) -> Result<usize> {
        Ok(0)
    }

    fn advance(&mut self, state: &usize, prev: usize) -> Result<(Vec<f64>, usize)> {
        let row = self
            .table
            .get(*state)
            .and_then(|by_prev| by_prev.get(prev))
            .ok_or_else(|| {
                Error::contract(
                    "table_stepper",
                    format!("no row for step {state} prev {prev}"),
                )
            })?;
        let logps = row.iter().map(|&p| p.max(LOG_CLAMP).ln()).collect();
        Ok((logps, state + 1))
    }

    fn num_ids(&self) -> usize {
        self.table[0][0].len()
    }
}
