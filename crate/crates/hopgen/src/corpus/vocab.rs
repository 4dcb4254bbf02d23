use indexmap::IndexMap;

use crate::corpus::example::Dataset;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];

/// Token inventory with four fixed reserved ids followed by corpus
/// tokens in frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: IndexMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    /// Reserved entries only.
    fn default() -> Self {
        Vocab::from_ordered_tokens(std::iter::empty())
    }
}

impl Vocab {
    fn from_ordered_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; unknown tokens map to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Append one token at the next free id (for vocabularies built from
    /// external token lists rather than corpus counts).
    pub fn push(&mut self, token: &str) -> Result<usize> {
        if RESERVED.contains(&token) || self.token_to_id.contains_key(token) {
            return Err(Error::contract(
                "vocab",
                format!("token {token} already present"),
            ));
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::contract("vocab", format!("id {id} out of {}", self.len())))
    }

    /// Plain-text form: one non-reserved token per line, line number + 4
    /// giving the id.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.id_to_token[RESERVED.len()..] {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let mut seen = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                return Err(Error::data_at(i + 1, "empty vocab line"));
            }
            if RESERVED.contains(&t) || seen.insert(t.to_string(), i).is_some() {
                return Err(Error::data_at(i + 1, format!("duplicate vocab token {t}")));
            }
        }
        Ok(Vocab::from_ordered_tokens(seen.into_keys()))
    }
}

/// Count every token in contexts, questions and answers, then keep the
/// most frequent until `max_size` ids (including the 4 reserved) are
/// used. Frequency ties break lexicographically.
pub fn build_vocab(dataset: &Dataset, max_size: usize) -> Result<Vocab> {
    if max_size < 5 {
        return Err(Error::Config(format!(
            "vocab max_size must be at least 5, got {max_size}"
        )));
    }
    let mut counts: IndexMap<String, usize> = IndexMap::new();
    let mut bump = |tok: &String| {
        if !RESERVED.contains(&tok.as_str()) {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    };
    for ex in &dataset.examples {
        for p in &ex.paragraphs {
            p.title.iter().for_each(&mut bump);
            p.sentences.iter().flatten().for_each(&mut bump);
        }
        ex.question.iter().for_each(&mut bump);
        ex.answer.text.iter().for_each(&mut bump);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocab::from_ordered_tokens(
        ranked.into_iter().map(|(t, _)| t),
    ))
}
