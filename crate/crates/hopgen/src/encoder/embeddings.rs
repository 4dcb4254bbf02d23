//! Loading word2vec-style text vectors into the word embedding table.

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::num::ParamStore;

/// Overwrite rows of `embed.word` with vectors from a text file of
/// `token v1 .. vd` lines (an optional `count dim` header line is
/// accepted). Tokens outside the vocabulary are skipped; vector width
/// must match the table. Returns how many rows were loaded. Works on
/// frozen tables too, so pretrained vectors can stay fixed.
pub fn load_pretrained_embeddings(
    store: &mut ParamStore,
    path: &std::path::Path,
    vocab: &Vocab,
) -> Result<usize> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let table = store.get_mut("embed.word")?;
    let (rows, dim) = (table.rows(), table.cols());
    if rows != vocab.len() {
        return Err(Error::contract(
            "embeddings",
            format!("table has {rows} rows for a vocabulary of {}", vocab.len()),
        ));
    }
    let mut loaded = vec![false; rows];
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::data_at(lineno, format!("bad float {f}")))
            })
            .collect::<Result<_>>()?;
        // Header line: two integer fields, first line only.
        if lineno == 1 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::data_at(
                lineno,
                format!(
                    "vector of width {} for a table of width {dim}",
                    values.len()
                ),
            ));
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if loaded[id] {
            return Err(Error::data_at(
                lineno,
                format!("duplicate vector for {token}"),
            ));
        }
        loaded[id] = true;
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Tensor;
    use std::io::Write;

    fn vocab_with(tokens: &[&str]) -> Vocab {
        let mut v = Vocab::default();
        for t in tokens {
            v.push(t).unwrap();
        }
        v
    }

    fn store_for(vocab: &Vocab, dim: usize) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("embed.word", Tensor::zeros(vocab.len(), dim))
            .unwrap();
        ps
    }

    fn write_file(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("vectors.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_matching_rows_and_skips_unknown_tokens() {
        let vocab = vocab_with(&["cat", "dog"]);
        let mut ps = store_for(&vocab, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "cat 1 2 3\nzebra 9 9 9\ndog -1 0 0.5\n");
        let n = load_pretrained_embeddings(&mut ps, &path, &vocab).unwrap();
        assert_eq!(n, 2);
        let t = ps.get("embed.word").unwrap();
        let cat = vocab.id("cat");
        assert_eq!(&t.data()[cat * 3..cat * 3 + 3], &[1.0, 2.0, 3.0]);
        let dog = vocab.id("dog");
        assert_eq!(&t.data()[dog * 3..dog * 3 + 3], &[-1.0, 0.0, 0.5]);
    }

    #[test]
    fn header_line_is_accepted() {
        let vocab = vocab_with(&["cat"]);
        let mut ps = store_for(&vocab, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "7 2\ncat 4 5\n");
        assert_eq!(
            load_pretrained_embeddings(&mut ps, &path, &vocab).unwrap(),
            1
        );
        let cat = vocab.id("cat");
        let t = ps.get("embed.word").unwrap();
        assert_eq!(&t.data()[cat * 2..cat * 2 + 2], &[4.0, 5.0]);
    }

    #[test]
    fn width_mismatch_duplicates_and_junk_are_rejected() {
        let vocab = vocab_with(&["cat"]);
        let dir = tempfile::tempdir().unwrap();
        for bad in ["cat 1 2 3\n", "cat 1 2\ncat 3 4\n", "cat one 2\n"] {
            let mut ps = store_for(&vocab, 2);
            let path = write_file(dir.path(), bad);
            assert!(
                load_pretrained_embeddings(&mut ps, &path, &vocab).is_err(),
                "accepted {bad:?}"
            );
        }
    }
}
