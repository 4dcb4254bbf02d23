use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One context paragraph: a title and its sentences, all pre-tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: Vec<String>,
    pub sentences: Vec<Vec<String>>,
}

/// Answer text plus its location inside the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerLoc {
    pub text: Vec<String>,
    pub paragraph_idx: usize,
    pub sentence_idx: usize,
    /// `[start, end)` token positions within the sentence.
    pub token_span: (usize, usize),
}

/// One question-generation example: multi-paragraph context, a located
/// answer span, and the reference question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub paragraphs: Vec<Paragraph>,
    pub answer: AnswerLoc,
    pub question: Vec<String>,
}

impl Example {
    /// Enforce structural invariants: non-empty paragraphs and sentences,
    /// answer span inside its named sentence, span text matching.
    pub fn validate(&self) -> Result<()> {
        if self.paragraphs.is_empty() {
            return Err(Error::data(format!("example {}: no paragraphs", self.id)));
        }
        for (pi, p) in self.paragraphs.iter().enumerate() {
            for (si, s) in p.sentences.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::data(format!(
                        "example {}: empty sentence {si} in paragraph {pi}",
                        self.id
                    )));
                }
            }
        }
        let a = &self.answer;
        let sent = self
            .paragraphs
            .get(a.paragraph_idx)
            .and_then(|p| p.sentences.get(a.sentence_idx))
            .ok_or_else(|| {
                Error::data(format!(
                    "example {}: answer points at paragraph {} sentence {} which does not exist",
                    self.id, a.paragraph_idx, a.sentence_idx
                ))
            })?;
        let (s, e) = a.token_span;
        if s >= e || e > sent.len() {
            return Err(Error::data(format!(
                "example {}: answer span [{s},{e}) outside sentence of {} tokens",
                self.id,
                sent.len()
            )));
        }
        if sent[s..e] != a.text[..] {
            return Err(Error::data(format!(
                "example {}: answer text {:?} does not match span tokens {:?}",
                self.id,
                a.text,
                &sent[s..e]
            )));
        }
        if self.question.is_empty() {
            return Err(Error::data(format!("example {}: empty question", self.id)));
        }
        Ok(())
    }
}

/// A collection of examples plus ingestion bookkeeping. `lexicon` holds
/// entity surface forms when the source provides them (the synthetic
/// generator does; file loaders leave it empty).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    #[serde(default)]
    pub lexicon: Vec<String>,
    #[serde(default)]
    pub skipped_yes_no: usize,
    #[serde(default)]
    pub skipped_unlocatable: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Write one example per line in the internal JSON schema.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ex in &self.examples {
            serde_json::to_writer(&mut f, ex)?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Lexicon surfaces as token lists.
    pub fn lexicon_tokens(&self) -> Vec<Vec<String>> {
        self.lexicon
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    }
}

/// Where each title/sentence landed in the flattened token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatUnit {
    pub paragraph_idx: usize,
    /// `None` marks the paragraph title.
    pub sentence_idx: Option<usize>,
    /// `[start, end)` in the flattened context; never empty.
    pub span: (usize, usize),
}

/// Flattened, possibly truncated context: paragraph order preserved,
/// title tokens before sentence tokens within each paragraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatContext {
    pub tokens: Vec<String>,
    /// `[start, end)` of the answer in `tokens`.
    pub answer_span: (usize, usize),
    pub units: Vec<FlatUnit>,
}

impl FlatContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Flatten a validated example and truncate to `max_len` tokens.
///
/// Truncation removes trailing tokens of non-answer paragraphs first
/// (working backwards from the last paragraph), then tokens after the
/// answer span in the answer paragraph. If even the answer paragraph's
/// prefix through the span exceeds `max_len`, the example is rejected.
pub fn flatten(ex: &Example, max_len: usize) -> Result<FlatContext> {
    ex.validate()?;

    // Paragraph lengths and the answer position inside its paragraph.
    let para_len: Vec<usize> = ex
        .paragraphs
        .iter()
        .map(|p| p.title.len() + p.sentences.iter().map(Vec::len).sum::<usize>())
        .collect();
    let ap = ex.answer.paragraph_idx;
    let within: usize = ex.paragraphs[ap].title.len()
        + ex.paragraphs[ap].sentences[..ex.answer.sentence_idx]
            .iter()
            .map(Vec::len)
            .sum::<usize>();
    let span_in_para = (
        within + ex.answer.token_span.0,
        within + ex.answer.token_span.1,
    );

    let total: usize = para_len.iter().sum();
    let mut keep = para_len.clone();
    if total > max_len {
        let mut overflow = total - max_len;
        for pi in (0..ex.paragraphs.len()).rev() {
            if pi == ap || overflow == 0 {
                continue;
            }
            let cut = overflow.min(keep[pi]);
            keep[pi] -= cut;
            overflow -= cut;
        }
        if overflow > 0 {
            let tail = keep[ap] - span_in_para.1;
            let cut = overflow.min(tail);
            keep[ap] -= cut;
            overflow -= cut;
        }
        if overflow > 0 {
            return Err(Error::data(format!(
                "example {}: answer span cannot fit in a context of {max_len} tokens",
                ex.id
            )));
        }
    }

    let mut tokens = Vec::new();
    let mut units = Vec::new();
    let mut answer_span = (0, 0);
    for (pi, p) in ex.paragraphs.iter().enumerate() {
        let budget = keep[pi];
        let mut used = 0;
        let push_unit = |unit_tokens: &[String],
                         sentence_idx: Option<usize>,
                         tokens: &mut Vec<String>,
                         units: &mut Vec<FlatUnit>,
                         used: &mut usize| {
            let room = budget - *used;
            let take = unit_tokens.len().min(room);
            if take > 0 {
                let start = tokens.len();
                tokens.extend_from_slice(&unit_tokens[..take]);
                units.push(FlatUnit {
                    paragraph_idx: pi,
                    sentence_idx,
                    span: (start, start + take),
                });
            }
            *used += take;
        };
        let para_start = tokens.len();
        push_unit(&p.title, None, &mut tokens, &mut units, &mut used);
        for (si, s) in p.sentences.iter().enumerate() {
            push_unit(s, Some(si), &mut tokens, &mut units, &mut used);
        }
        if pi == ap {
            answer_span = (para_start + span_in_para.0, para_start + span_in_para.1);
        }
    }

    debug_assert_eq!(
        &tokens[answer_span.0..answer_span.1],
        &ex.answer.text[..],
        "answer span must survive truncation"
    );
    Ok(FlatContext {
        tokens,
        answer_span,
        units,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub(crate) fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    pub(crate) fn two_para_example() -> Example {
        Example {
            id: "ex0".into(),
            paragraphs: vec![
                Paragraph {
                    title: toks("alpha tower"),
                    sentences: vec![toks("alpha tower is located in brigde city .")],
                },
                Paragraph {
                    title: toks("brigde city"),
                    sentences: vec![toks("brigde city is located in harbor land .")],
                },
            ],
            answer: AnswerLoc {
                text: toks("harbor land"),
                paragraph_idx: 1,
                sentence_idx: 0,
                token_span: (5, 7),
            },
            question: toks("what city is alpha tower located in ?"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{toks, two_para_example};
    use super::*;

    #[test]
    fn flatten_places_answer_span_on_matching_tokens() {
        let ex = two_para_example();
        let flat = flatten(&ex, 400).unwrap();
        let (s, e) = flat.answer_span;
        assert_eq!(&flat.tokens[s..e], &["harbor", "land"]);
        assert_eq!(flat.units.len(), 4);
        assert_eq!(flat.units[0].sentence_idx, None);
    }

    #[test]
    fn truncation_trims_non_answer_paragraph_first() {
        let ex = two_para_example();
        let full = flatten(&ex, 400).unwrap().len();
        let flat = flatten(&ex, full - 2).unwrap();
        // answer sits in the last paragraph, so the earlier paragraph
        // loses its trailing tokens
        assert_eq!(flat.len(), full - 2);
        let (s, e) = flat.answer_span;
        assert_eq!(&flat.tokens[s..e], &["harbor", "land"]);
        let p0_tokens: usize = flat
            .units
            .iter()
            .filter(|u| u.paragraph_idx == 0)
            .map(|u| u.span.1 - u.span.0)
            .sum();
        assert_eq!(p0_tokens, 10 - 2);
    }

    #[test]
    fn truncation_that_would_cut_answer_errors() {
        let ex = two_para_example();
        // the answer paragraph's prefix through the span needs 9 tokens
        assert!(flatten(&ex, 8).is_err());
        let flat = flatten(&ex, 9).unwrap();
        assert_eq!(flat.len(), 9);
        let (s, e) = flat.answer_span;
        assert_eq!(&flat.tokens[s..e], &["harbor", "land"]);
        assert!(flat.units.iter().all(|u| u.paragraph_idx == 1));
    }

    #[test]
    fn validate_rejects_span_text_mismatch() {
        let mut ex = two_para_example();
        ex.answer.text = toks("wrong thing");
        assert!(ex.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_examples() {
        let ex = two_para_example();
        let js = serde_json::to_string(&ex).unwrap();
        let back: Example = serde_json::from_str(&js).unwrap();
        assert_eq!(ex, back);
    }
}
