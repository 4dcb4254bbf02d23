//! Corpus BLEU-1..4 with clipped n-gram precision, geometric mean and
//! brevity penalty, plus mean sentence-level ROUGE-L F-measure.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};

/// Stand-in precision when an order has zero matches; its use is
/// reported in [`EvalMetrics::smoothed_orders`].
pub const BLEU_SMOOTH_EPS: f64 = 1e-9;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub examples: usize,
    /// N-gram orders whose corpus precision fell back to the epsilon.
    pub smoothed_orders: Vec<usize>,
}

fn ngram_counts(tokens: &[String], n: usize) -> IndexMap<&[String], usize> {
    let mut counts: IndexMap<&[String], usize> = IndexMap::new();
    if tokens.len() >= n && n > 0 {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped corpus precisions for orders `1..=max_n` and the corpus
/// hypothesis/reference lengths.
fn corpus_precisions(
    pairs: &[(&[String], &[String])],
    max_n: usize,
) -> (Vec<(usize, usize)>, usize, usize) {
    let mut match_total = vec![(0usize, 0usize); max_n];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, refr) in pairs {
        hyp_len += hyp.len();
        ref_len += refr.len();
        for (k, slot) in match_total.iter_mut().enumerate() {
            let n = k + 1;
            let ref_counts = ngram_counts(refr, n);
            for (gram, count) in ngram_counts(hyp, n) {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                slot.0 += count.min(allowed);
            }
            slot.1 += hyp.len().saturating_sub(n - 1);
        }
    }
    (match_total, hyp_len, ref_len)
}

/// BLEU-n for every n in `1..=max_n` over aligned (hypothesis,
/// reference) pairs, and the orders that needed smoothing.
pub fn corpus_bleu(
    pairs: &[(&[String], &[String])],
    max_n: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if pairs.is_empty() {
        return Err(Error::contract("corpus_bleu", "no pairs to score"));
    }
    let (match_total, hyp_len, ref_len) = corpus_precisions(pairs, max_n);
    let mut smoothed = Vec::new();
    let log_p: Vec<f64> = match_total
        .iter()
        .enumerate()
        .map(|(k, &(matches, total))| {
            if matches == 0 || total == 0 {
                smoothed.push(k + 1);
                BLEU_SMOOTH_EPS.ln()
            } else {
                (matches as f64 / total as f64).ln()
            }
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let scores = (1..=max_n)
        .map(|n| {
            let mean = log_p[..n].iter().sum::<f64>() / n as f64;
            bp * mean.exp()
        })
        .collect();
    Ok((scores, smoothed))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F-measure with recall weighted by
/// [`ROUGE_BETA`] squared. Zero when either side is empty or nothing
/// matches.
pub fn rouge_l_f(hyp: &[String], refr: &[String]) -> f64 {
    let lcs = lcs_len(hyp, refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / refr.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Score predictions against references, aligning by example id.
/// Duplicate ids and any id present on one side only are errors;
/// the result is independent of input ordering.
pub fn evaluate(
    preds: &[(String, Vec<String>)],
    refs: &[(String, Vec<String>)],
) -> Result<EvalMetrics> {
    if refs.is_empty() {
        return Err(Error::data("no references to evaluate against"));
    }
    let mut by_id: IndexMap<&str, &Vec<String>> = IndexMap::new();
    for (id, tokens) in preds {
        if by_id.insert(id.as_str(), tokens).is_some() {
            return Err(Error::data(format!("duplicate prediction id {id}")));
        }
    }
    let mut pairs: Vec<(&[String], &[String])> = Vec::with_capacity(refs.len());
    let mut seen: IndexMap<&str, ()> = IndexMap::new();
    let mut rouge_sum = 0.0;
    for (id, refr) in refs {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::data(format!("duplicate reference id {id}")));
        }
        let hyp = by_id
            .swap_remove(id.as_str())
            .ok_or_else(|| Error::data(format!("no prediction for id {id}")))?;
        rouge_sum += rouge_l_f(hyp, refr);
        pairs.push((hyp.as_slice(), refr.as_slice()));
    }
    if let Some((extra, _)) = by_id.first() {
        return Err(Error::data(format!(
            "prediction id {extra} has no reference"
        )));
    }
    let (bleu, smoothed_orders) = corpus_bleu(&pairs, 4)?;
    Ok(EvalMetrics {
        bleu1: bleu[0],
        bleu2: bleu[1],
        bleu3: bleu[2],
        bleu4: bleu[3],
        rouge_l: rouge_sum / refs.len() as f64,
        examples: refs.len(),
        smoothed_orders,
    })
}
