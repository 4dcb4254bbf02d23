use crate::corpus::example::{flatten, Example, FlatContext};
use crate::corpus::vocab::{Vocab, EOS, UNK};
use crate::error::Result;

/// Answer-tagging symbols: outside, begin, inside.
pub const TAG_O: usize = 0;
pub const TAG_B: usize = 1;
pub const TAG_I: usize = 2;
pub const NUM_TAGS: usize = 3;

/// Integer view of one example, ready for the encoder. Keeps the
/// flattened surface context around: copy decoding needs original
/// surfaces for positions whose id collapsed to UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub context_ids: Vec<usize>,
    /// One of [`TAG_O`]/[`TAG_B`]/[`TAG_I`] per context position.
    pub tag_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    /// Reference question ids, EOS-terminated.
    pub question_ids: Vec<usize>,
    /// Original surface for every UNK context position.
    pub oov_map: Vec<Option<String>>,
    pub flat: FlatContext,
}

impl EncodedExample {
    pub fn n(&self) -> usize {
        self.context_ids.len()
    }

    /// Surface token at a context position (resolving UNK through the
    /// kept flat context).
    pub fn surface(&self, pos: usize) -> &str {
        &self.flat.tokens[pos]
    }
}

/// Flatten, truncate and integer-encode an example. BIO tags mark the
/// answer span; every other position is O. Truncation never removes the
/// answer span (that case is an error from [`flatten`]).
pub fn encode_example(
    ex: &Example,
    vocab: &Vocab,
    max_context_len: usize,
) -> Result<EncodedExample> {
    let flat = flatten(ex, max_context_len)?;
    let context_ids: Vec<usize> = flat.tokens.iter().map(|t| vocab.id(t)).collect();
    let oov_map: Vec<Option<String>> = flat
        .tokens
        .iter()
        .zip(&context_ids)
        .map(|(t, &id)| (id == UNK).then(|| t.clone()))
        .collect();
    let mut tag_ids = vec![TAG_O; flat.tokens.len()];
    let (s, e) = flat.answer_span;
    tag_ids[s] = TAG_B;
    for t in tag_ids.iter_mut().take(e).skip(s + 1) {
        *t = TAG_I;
    }
    let answer_ids = ex.answer.text.iter().map(|t| vocab.id(t)).collect();
    let mut question_ids: Vec<usize> = ex.question.iter().map(|t| vocab.id(t)).collect();
    question_ids.push(EOS);
    Ok(EncodedExample {
        id: ex.id.clone(),
        context_ids,
        tag_ids,
        answer_ids,
        question_ids,
        oov_map,
        flat,
    })
}

/// Map ids back to tokens (inverse of encoding when nothing was OOV).
pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .map(|&i| vocab.token(i).map(str::to_string))
        .collect()
}
