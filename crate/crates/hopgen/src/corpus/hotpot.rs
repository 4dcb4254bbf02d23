use serde::Deserialize;

use crate::corpus::example::{AnswerLoc, Dataset, Example, Paragraph};
use crate::error::{Error, Result};

/// HotpotQA-compatible line: `context` pairs of `[title, sentences]`,
/// plus free-text `answer` and `question`.
#[derive(Deserialize)]
struct HotpotLine {
    #[serde(default, alias = "_id")]
    id: Option<String>,
    context: Vec<(String, Vec<String>)>,
    answer: String,
    question: String,
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// First occurrence of `needle` as a contiguous subsequence of `hay`.
fn find_subsequence(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

fn example_from_hotpot(line: HotpotLine, fallback_id: String) -> Result<Option<Example>> {
    let answer_toks = tokenize(&line.answer);
    if answer_toks == ["yes"] || answer_toks == ["no"] {
        return Ok(None);
    }
    let paragraphs: Vec<Paragraph> = line
        .context
        .into_iter()
        .map(|(title, sents)| Paragraph {
            title: tokenize(&title),
            sentences: sents
                .iter()
                .map(|s| tokenize(s))
                .filter(|t| !t.is_empty())
                .collect(),
        })
        .filter(|p| !p.sentences.is_empty() || !p.title.is_empty())
        .collect();

    // First occurrence wins: paragraph order, then sentence order, then
    // position. Answers only in titles are treated as unlocatable.
    let mut loc = None;
    'search: for (pi, p) in paragraphs.iter().enumerate() {
        for (si, s) in p.sentences.iter().enumerate() {
            if let Some(start) = find_subsequence(s, &answer_toks) {
                loc = Some((pi, si, start));
                break 'search;
            }
        }
    }
    let Some((pi, si, start)) = loc else {
        return Ok(None);
    };
    let ex = Example {
        id: fallback_id,
        paragraphs,
        answer: AnswerLoc {
            text: answer_toks.clone(),
            paragraph_idx: pi,
            sentence_idx: si,
            token_span: (start, start + answer_toks.len()),
        },
        question: tokenize(&line.question),
    };
    ex.validate()?;
    Ok(Some(ex))
}

/// Load a JSON Lines dataset. Each line is either a HotpotQA-subset
/// object (`context`/`answer`/`question`) or the internal schema
/// (detected by a `paragraphs` field). Yes/no answers and answers that
/// cannot be located in any sentence are skipped and counted.
pub fn load_hotpot_jsonl(path: &std::path::Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut ds = Dataset::default();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw)
            .map_err(|e| Error::data_at(lineno, format!("invalid JSON: {e}")))?;
        if value.get("paragraphs").is_some() {
            let ex: Example = serde_json::from_value(value)
                .map_err(|e| Error::data_at(lineno, format!("bad example object: {e}")))?;
            ex.validate()
                .map_err(|e| Error::data_at(lineno, e.to_string()))?;
            ds.examples.push(ex);
            continue;
        }
        let line: HotpotLine = serde_json::from_value(value)
            .map_err(|e| Error::data_at(lineno, format!("bad record: {e}")))?;
        let is_yes_no = {
            let a = tokenize(&line.answer);
            a == ["yes"] || a == ["no"]
        };
        let id = line.id.clone().unwrap_or_else(|| format!("line{lineno}"));
        match example_from_hotpot(line, id) {
            Ok(Some(ex)) => ds.examples.push(ex),
            Ok(None) if is_yes_no => ds.skipped_yes_no += 1,
            Ok(None) => ds.skipped_unlocatable += 1,
            Err(e) => return Err(Error::data_at(lineno, e.to_string())),
        }
    }
    if ds.examples.is_empty() {
        return Err(Error::data(format!(
            "no usable records in {} ({} yes/no skipped, {} unlocatable skipped)",
            path.display(),
            ds.skipped_yes_no,
            ds.skipped_unlocatable
        )));
    }
    Ok(ds)
}
