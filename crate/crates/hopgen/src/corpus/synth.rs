use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::corpus::example::{AnswerLoc, Dataset, Example, Paragraph};
use crate::error::{Error, Result};

/// Knobs for the synthetic corpus. The three-argument
/// [`generate_synthetic`] covers the common case; the extra fields make
/// the generalization experiments controllable:
///
/// * `pool_offset` shifts which slice of the global entity pool is used,
///   so two datasets can be forced onto disjoint surface forms.
/// * `distractors` adds unrelated location paragraphs, making paragraph
///   identification non-trivial.
/// * `shuffle_paragraphs` randomizes paragraph order so the answer
///   paragraph is not always last.
#[derive(Debug, Clone)]
pub struct SynthOpts {
    pub seed: u64,
    pub count: usize,
    pub entity_pool_size: usize,
    pub pool_offset: usize,
    pub distractors: usize,
    pub shuffle_paragraphs: bool,
    pub multi_token_p: f64,
    pub filler_p: f64,
}

impl SynthOpts {
    pub fn new(seed: u64, count: usize, entity_pool_size: usize) -> Self {
        SynthOpts {
            seed,
            count,
            entity_pool_size,
            pool_offset: 0,
            distractors: 0,
            shuffle_paragraphs: false,
            multi_token_p: 0.3,
            filler_p: 0.5,
        }
    }
}

const SYLLABLES: [&str; 12] = [
    "ba", "den", "ki", "lor", "mu", "nar", "po", "ram", "su", "tel", "vi", "zo",
];
const MODIFIERS: [&str; 6] = ["new", "east", "west", "old", "port", "fort"];
const SUFFIXES: [&str; 6] = ["falls", "hills", "creek", "valley", "springs", "harbor"];

/// Statement variants: "<X> ... <Y> ." in four paraphrases.
const STATEMENT_MIDS: [&[&str]; 4] = [
    &["is", "located", "in"],
    &["lies", "in", "the", "region", "of"],
    &["can", "be", "found", "within"],
    &["sits", "in", "the", "area", "of"],
];

/// Question variants, one per statement variant. The wording of the
/// question tracks the wording used in the topic paragraph, so getting
/// the phrasing right requires reading that paragraph, while the answer
/// itself lives two hops away.
const QUESTIONS: [&[&str]; 4] = [
    &["what", "place", "is", "", "located", "in", "?"],
    &["what", "region", "does", "", "lie", "in", "?"],
    &["what", "area", "can", "", "be", "found", "within", "?"],
    &["what", "territory", "does", "", "sit", "in", "?"],
];

const FILLERS: [&[&str]; 4] = [
    &["it", "is", "a", "quiet", "town", "."],
    &["many", "travelers", "pass", "through", "it", "."],
    &["its", "markets", "are", "busy", "in", "spring", "."],
    &["local", "records", "mention", "it", "often", "."],
];

fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn pick(rng: &mut impl RngCore, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn coin(rng: &mut impl RngCore, p: f64) -> bool {
    unit(rng) < p
}

/// Unique base word for a global entity index: two or more base-12
/// syllables, so distinct indices never collide.
fn base_name(idx: usize) -> String {
    let mut digits = Vec::new();
    let mut v = idx;
    loop {
        digits.push(v % SYLLABLES.len());
        v /= SYLLABLES.len();
        if v == 0 {
            break;
        }
    }
    while digits.len() < 2 {
        digits.push(0);
    }
    digits.iter().rev().map(|&d| SYLLABLES[d]).collect()
}

/// Surface form for an entity: its base word, optionally extended to two
/// tokens. Modifier and suffix words never appear as standalone
/// entities, so distinct indices yield non-overlapping surfaces.
fn surface(rng: &mut impl RngCore, idx: usize, multi_token_p: f64) -> Vec<String> {
    let base = base_name(idx);
    if coin(rng, multi_token_p) {
        if coin(rng, 0.5) {
            vec![MODIFIERS[pick(rng, MODIFIERS.len())].to_string(), base]
        } else {
            vec![base, SUFFIXES[pick(rng, SUFFIXES.len())].to_string()]
        }
    } else {
        vec![base]
    }
}

fn statement(k: usize, x: &[String], y: &[String]) -> (Vec<String>, (usize, usize)) {
    let mut t: Vec<String> = x.to_vec();
    t.extend(STATEMENT_MIDS[k].iter().map(|s| s.to_string()));
    let ys = t.len();
    t.extend_from_slice(y);
    let ye = t.len();
    t.push(".".to_string());
    (t, (ys, ye))
}

fn question(k: usize, topic: &[String]) -> Vec<String> {
    let mut q = Vec::new();
    for w in QUESTIONS[k] {
        if w.is_empty() {
            q.extend_from_slice(topic);
        } else {
            q.push(w.to_string());
        }
    }
    q
}

/// Distinct draws from `[offset, offset + pool)` via partial shuffle.
fn draw_distinct(rng: &mut impl RngCore, offset: usize, pool: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (offset..offset + pool).collect();
    for i in 0..k {
        let j = i + pick(rng, ids.len() - i);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids
}

/// Deterministic bridge-question corpus: paragraph A states that topic T
/// is in bridge C, paragraph B states that C is in H; the answer is H
/// and the question asks about T. Examples are a function of
/// `(seed, index)` alone, so a prefix of a larger corpus equals a
/// smaller corpus with the same seed.
pub fn generate_synthetic(seed: u64, count: usize, entity_pool_size: usize) -> Result<Dataset> {
    generate_with(&SynthOpts::new(seed, count, entity_pool_size))
}

pub fn generate_with(opts: &SynthOpts) -> Result<Dataset> {
    if opts.count == 0 {
        return Err(Error::Config("synthetic count must be at least 1".into()));
    }
    let needed = 3 + 2 * opts.distractors;
    if opts.entity_pool_size < needed {
        return Err(Error::Config(format!(
            "entity pool of {} cannot supply {needed} distinct entities",
            opts.entity_pool_size
        )));
    }

    let mut lexicon = BTreeSet::new();
    let mut examples = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let ids = draw_distinct(&mut rng, opts.pool_offset, opts.entity_pool_size, needed);
        let (t_id, c_id, h_id) = (ids[0], ids[1], ids[2]);
        let t = surface(&mut rng, t_id, opts.multi_token_p);
        let c = surface(&mut rng, c_id, opts.multi_token_p);
        let h = surface(&mut rng, h_id, opts.multi_token_p);

        let k_a = pick(&mut rng, STATEMENT_MIDS.len());
        let k_b = pick(&mut rng, STATEMENT_MIDS.len());

        let (a_stmt, _) = statement(k_a, &t, &c);
        let mut a_sents = vec![a_stmt];
        if coin(&mut rng, opts.filler_p) {
            a_sents.push(
                FILLERS[pick(&mut rng, FILLERS.len())]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            );
        }

        let (b_stmt, h_span) = statement(k_b, &c, &h);
        let mut b_sents = vec![b_stmt];
        if coin(&mut rng, opts.filler_p) {
            b_sents.push(
                FILLERS[pick(&mut rng, FILLERS.len())]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            );
        }

        let mut paragraphs = vec![
            Paragraph {
                title: t.clone(),
                sentences: a_sents,
            },
            Paragraph {
                title: c.clone(),
                sentences: b_sents,
            },
        ];
        let mut answer_paragraph = 1;

        let mut entity_surfaces = vec![t.clone(), c.clone(), h.clone()];
        for d in 0..opts.distractors {
            let d1 = surface(&mut rng, ids[3 + 2 * d], opts.multi_token_p);
            let d2 = surface(&mut rng, ids[4 + 2 * d], opts.multi_token_p);
            let k_d = pick(&mut rng, STATEMENT_MIDS.len());
            let (d_stmt, _) = statement(k_d, &d1, &d2);
            let mut d_sents = vec![d_stmt];
            if coin(&mut rng, opts.filler_p) {
                d_sents.push(
                    FILLERS[pick(&mut rng, FILLERS.len())]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                );
            }
            paragraphs.push(Paragraph {
                title: d1.clone(),
                sentences: d_sents,
            });
            entity_surfaces.push(d1);
            entity_surfaces.push(d2);
        }

        if opts.shuffle_paragraphs {
            let n = paragraphs.len();
            for p in 0..n {
                let q = p + pick(&mut rng, n - p);
                paragraphs.swap(p, q);
                if answer_paragraph == q {
                    answer_paragraph = p;
                } else if answer_paragraph == p {
                    answer_paragraph = q;
                }
            }
        }

        for s in &entity_surfaces {
            lexicon.insert(s.join(" "));
        }

        let ex = Example {
            id: format!("synth-{}-{}-t{}c{}h{}", opts.seed, i, t_id, c_id, h_id),
            paragraphs,
            answer: AnswerLoc {
                text: h,
                paragraph_idx: answer_paragraph,
                sentence_idx: 0,
                token_span: h_span,
            },
            question: question(k_a, &t),
        };
        debug_assert!(ex.validate().is_ok());
        examples.push(ex);
    }

    Ok(Dataset {
        examples,
        lexicon: lexicon.into_iter().collect(),
        ..Dataset::default()
    })
}

/// The `(topic, bridge, answer)` entity ids encoded in a synthetic
/// example id, used to compare entity combinations across datasets.
pub fn synthetic_triple(id: &str) -> Option<(usize, usize, usize)> {
    let tail = id.rsplit('-').next()?;
    let rest = tail.strip_prefix('t')?;
    let (t, rest) = rest.split_once('c')?;
    let (c, h) = rest.split_once('h')?;
    Some((t.parse().ok()?, c.parse().ok()?, h.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contains_subseq(hay: &[String], needle: &[String]) -> bool {
        !needle.is_empty()
            && needle.len() <= hay.len()
            && (0..=hay.len() - needle.len()).any(|i| hay[i..i + needle.len()] == *needle)
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let a = generate_synthetic(7, 20, 30).unwrap();
        let b = generate_synthetic(7, 20, 30).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.lexicon, b.lexicon);
    }

    #[test]
    fn prefix_stability_under_count() {
        let a = generate_synthetic(7, 5, 30).unwrap();
        let b = generate_synthetic(7, 20, 30).unwrap();
        assert_eq!(a.examples[..], b.examples[..5]);
    }

    #[test]
    fn answer_only_in_second_hop_paragraph_and_never_in_question() {
        let ds = generate_synthetic(7, 50, 40).unwrap();
        for ex in &ds.examples {
            let ans = &ex.answer.text;
            assert!(
                !contains_subseq(&ex.question, ans),
                "answer leaked into question"
            );
            for (pi, p) in ex.paragraphs.iter().enumerate() {
                let mut all: Vec<String> = p.title.clone();
                all.extend(p.sentences.iter().flatten().cloned());
                let has = contains_subseq(&all, ans);
                assert_eq!(
                    has,
                    pi == ex.answer.paragraph_idx,
                    "answer must appear exactly in its own paragraph"
                );
            }
        }
    }

    #[test]
    fn bridge_entity_appears_in_both_hop_paragraphs() {
        let ds = generate_synthetic(11, 50, 40).unwrap();
        for ex in &ds.examples {
            // the bridge is the title of the answer paragraph
            let bridge = &ex.paragraphs[ex.answer.paragraph_idx].title;
            let other: Vec<&Paragraph> = ex
                .paragraphs
                .iter()
                .enumerate()
                .filter(|(pi, _)| *pi != ex.answer.paragraph_idx)
                .map(|(_, p)| p)
                .collect();
            let found = other.iter().any(|p| {
                let mut all: Vec<String> = p.title.clone();
                all.extend(p.sentences.iter().flatten().cloned());
                contains_subseq(&all, bridge)
            });
            assert!(found, "bridge entity must occur in the first-hop paragraph");
        }
    }

    #[test]
    fn multi_token_rate_is_near_p() {
        let ds = generate_synthetic(3, 300, 500).unwrap();
        let mut multi = 0;
        let mut total = 0;
        for s in &ds.lexicon {
            total += 1;
            if s.contains(' ') {
                multi += 1;
            }
        }
        let rate = multi as f64 / total as f64;
        assert!((0.15..0.45).contains(&rate), "rate {rate}");
    }

    #[test]
    fn pool_too_small_errors() {
        assert!(generate_synthetic(1, 1, 2).is_err());
        assert!(generate_synthetic(1, 0, 10).is_err());
        let mut o = SynthOpts::new(1, 1, 5);
        o.distractors = 2;
        assert!(generate_with(&o).is_err());
    }

    #[test]
    fn distractors_and_shuffle_keep_answer_located() {
        let mut o = SynthOpts::new(13, 40, 60);
        o.distractors = 2;
        o.shuffle_paragraphs = true;
        let ds = generate_with(&o).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.paragraphs.len(), 4);
            ex.validate().unwrap();
        }
        // paragraph order varies across the corpus
        let first_is_answer = ds
            .examples
            .iter()
            .filter(|e| e.answer.paragraph_idx == 0)
            .count();
        assert!(first_is_answer > 0 && first_is_answer < 40);
    }

    #[test]
    fn disjoint_pool_offsets_share_no_surfaces() {
        let a = generate_with(&SynthOpts::new(5, 30, 40)).unwrap();
        let mut o = SynthOpts::new(5, 30, 40);
        o.pool_offset = 40;
        let b = generate_with(&o).unwrap();
        let set: BTreeSet<&String> = a.lexicon.iter().collect();
        assert!(b.lexicon.iter().all(|s| !set.contains(s)));
    }

    #[test]
    fn ids_encode_the_entity_triple() {
        let ds = generate_synthetic(9, 3, 20).unwrap();
        for ex in &ds.examples {
            let (t, c, h) = synthetic_triple(&ex.id).unwrap();
            assert!(t != c && c != h && t != h);
            assert!(t < 20 && c < 20 && h < 20);
        }
    }
}
