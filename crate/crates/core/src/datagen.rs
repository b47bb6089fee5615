//! Pretraining pair generation.
//!
//! Answer candidates are found with date patterns and a capitalization rule,
//! template questions are built from the sentence around each candidate, and
//! inverse-cloze pairs use a sentence of the chunk as a pseudo-question.
//! Externally generated pairs enter through [`ingest_pairs`].

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_answer, read_ndjson, write_ndjson, Chunk, Span, Token};
use crate::error::{Error, Result};

pub const MAX_ENTITY_LEN: usize = 6;
pub const DEFAULT_ICT_DROP_PROB: f64 = 0.9;

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

const AUXILIARIES: [&str; 14] = [
    "is", "was", "are", "were", "has", "had", "have", "will", "can", "did", "does", "do",
    "could", "would",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Date,
    Entity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerCandidate {
    pub span: Span,
    pub kind: CandidateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Template,
    Ict,
    #[default]
    External,
}

/// A pretraining example: a question and the chunk it was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPPair {
    pub question: String,
    pub chunk_id: u64,
    pub answer: String,
    #[serde(default)]
    pub source: PairSource,
    /// Replacement positive text (inverse-cloze pairs whose question sentence
    /// was removed). `None` means the whole chunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

fn is_sentence_end(t: &Token) -> bool {
    matches!(t.text.as_str(), "." | "!" | "?")
}

/// Token ranges `[start, end)` of sentences; a sentence ends at `.`, `!` or `?`.
pub fn sentences(tokens: &[Token]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if is_sentence_end(t) {
            out.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push((start, tokens.len()));
    }
    out
}

fn is_capitalized(t: &str) -> bool {
    t.chars().next().is_some_and(|c| c.is_uppercase())
}

fn month_index(t: &str) -> Option<usize> {
    if !is_capitalized(t) {
        return None;
    }
    let lower = t.to_lowercase();
    MONTHS.iter().position(|m| {
        *m == lower || (lower.len() >= 3 && m.starts_with(&lower) && (lower.len() == 3 || lower == "sept"))
    })
}

fn digits_value(t: &str) -> Option<u32> {
    if t.is_empty() || t.len() > 4 || !t.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    t.parse().ok()
}

fn is_year(t: &str) -> bool {
    t.len() == 4 && digits_value(t).is_some_and(|v| (1000..=2999).contains(&v))
}

fn is_day(t: &str) -> bool {
    t.len() <= 2 && digits_value(t).is_some_and(|v| (1..=31).contains(&v))
}

/// Length of the longest date pattern starting at `i`, or 0.
///
/// Patterns: `Year`; `Month [Day] [[,] Year]`; `Day Month [Year]`.
fn date_len(tokens: &[Token], i: usize) -> usize {
    let at = |j: usize| tokens.get(j).map(|t| t.text.as_str());
    let year_after = |j: usize| -> usize {
        match (at(j), at(j + 1)) {
            (Some(y), _) if is_year(y) => 1,
            (Some(","), Some(y)) if is_year(y) => 2,
            _ => 0,
        }
    };
    let Some(t) = at(i) else { return 0 };
    if month_index(t).is_some() {
        let mut len = 1;
        if at(i + 1).is_some_and(is_day) {
            len += 1;
        }
        return len + year_after(i + len);
    }
    if is_day(t) && at(i + 1).is_some_and(|m| month_index(m).is_some()) {
        return 2 + at(i + 2).map_or(0, |y| is_year(y) as usize);
    }
    if is_year(t) {
        return 1;
    }
    0
}

/// Dates first (longest match, left to right), then maximal runs of
/// capitalized tokens not at sentence start and not inside a date.
pub fn detect_candidates(chunk: &Chunk) -> Vec<AnswerCandidate> {
    let toks = &chunk.tokens;
    let mut out = Vec::new();
    let mut in_date = vec![false; toks.len()];
    let mut i = 0;
    while i < toks.len() {
        let len = date_len(toks, i);
        if len > 0 {
            out.push(AnswerCandidate {
                span: Span {
                    chunk_id: chunk.id,
                    start: i,
                    end: i + len - 1,
                },
                kind: CandidateKind::Date,
            });
            in_date[i..i + len].iter_mut().for_each(|d| *d = true);
            i += len;
        } else {
            i += 1;
        }
    }

    for (s, e) in sentences(toks) {
        let mut j = s + 1;
        while j < e {
            if in_date[j] || !is_capitalized(&toks[j].text) {
                j += 1;
                continue;
            }
            let start = j;
            while j < e && !in_date[j] && is_capitalized(&toks[j].text) {
                j += 1;
            }
            if j - start <= MAX_ENTITY_LEN {
                out.push(AnswerCandidate {
                    span: Span {
                        chunk_id: chunk.id,
                        start,
                        end: j - 1,
                    },
                    kind: CandidateKind::Entity,
                });
            }
        }
    }
    out.retain(|c| !normalize_answer(chunk.span_text(&c.span)).is_empty());
    out.sort_by_key(|c| (c.span.start, c.span.end));
    out
}

/// Turns the candidate's sentence into a question: the answer tokens and the
/// closing punctuation are removed, the text is lowercased, an auxiliary verb
/// that follows a short subject is moved to the front, and the wh-word
/// ("when" for dates, "who or what" otherwise) leads.
pub fn make_template_question(chunk: &Chunk, candidate: &AnswerCandidate) -> QPPair {
    let span = candidate.span;
    let (s, e) = sentences(&chunk.tokens)
        .into_iter()
        .find(|&(s, e)| s <= span.start && span.start < e)
        .unwrap_or((span.start, span.end + 1));
    let mut words: Vec<String> = Vec::new();
    let mut answer_pos = None;
    for i in s..e {
        if (span.start..=span.end).contains(&i) {
            answer_pos.get_or_insert(words.len());
            continue;
        }
        if i + 1 == e && is_sentence_end(&chunk.tokens[i]) {
            continue;
        }
        words.push(chunk.tokens[i].text.to_lowercase());
    }
    let answer_pos = answer_pos.unwrap_or(0);
    if let Some(aux) = words
        .iter()
        .take(4)
        .position(|w| AUXILIARIES.contains(&w.as_str()))
    {
        if aux > 0 && aux < answer_pos {
            let verb = words.remove(aux);
            words.insert(0, verb);
        }
    }
    let wh = match candidate.kind {
        CandidateKind::Date => "when",
        CandidateKind::Entity => "who or what",
    };
    let mut question = wh.to_string();
    for w in &words {
        question.push(' ');
        question.push_str(w);
    }
    QPPair {
        question,
        chunk_id: chunk.id,
        answer: chunk.span_text(&span).to_string(),
        source: PairSource::Template,
        positive: None,
    }
}

/// Template pairs for every candidate, in candidate order, optionally capped.
pub fn template_pairs(chunk: &Chunk, max_per_chunk: Option<usize>) -> Vec<QPPair> {
    detect_candidates(chunk)
        .iter()
        .take(max_per_chunk.unwrap_or(usize::MAX))
        .map(|c| make_template_question(chunk, c))
        .collect()
}

/// Inverse-cloze pair with the sentence and drop decision fixed.
pub fn ict_pair_for(chunk: &Chunk, sentence: usize, drop: bool) -> Option<QPPair> {
    let sents = sentences(&chunk.tokens);
    if sents.len() < 2 || sentence >= sents.len() {
        return None;
    }
    let text_of = |(s, e): (usize, usize)| chunk.surface(s, e - 1).to_string();
    let question = text_of(sents[sentence]);
    let positive = drop.then(|| {
        sents
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != sentence)
            .map(|(_, &r)| text_of(r))
            .collect::<Vec<_>>()
            .join(" ")
    });
    Some(QPPair {
        question,
        chunk_id: chunk.id,
        answer: String::new(),
        source: PairSource::Ict,
        positive,
    })
}

/// Samples a sentence uniformly as the pseudo-question; with probability
/// `drop_prob` it is removed from the positive. Chunks with fewer than two
/// sentences yield nothing.
pub fn make_ict_pair(chunk: &Chunk, rng: &mut impl Rng, drop_prob: f64) -> Option<QPPair> {
    let n = sentences(&chunk.tokens).len();
    if n < 2 {
        return None;
    }
    let sentence = rng.gen_range(0..n);
    let drop = rng.gen::<f64>() < drop_prob;
    ict_pair_for(chunk, sentence, drop)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    question: String,
    chunk_id: u64,
    #[serde(default)]
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<PairSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positive: Option<String>,
}

pub fn write_pairs(path: &Path, pairs: &[QPPair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            question: p.question.clone(),
            chunk_id: p.chunk_id,
            answer: p.answer.clone(),
            source: Some(p.source),
            positive: p.positive.clone(),
        })
        .collect();
    write_ndjson(path, &records)
}

/// Loads a pair file, checking every `chunk_id` against `known_chunks`.
/// Loaded pairs are tagged [`PairSource::External`].
pub fn ingest_pairs(path: &Path, known_chunks: &HashSet<u64>) -> Result<Vec<QPPair>> {
    let records: Vec<(usize, PairRecord)> = read_numbered(path)?;
    records
        .into_iter()
        .map(|(line, r)| {
            if !known_chunks.contains(&r.chunk_id) {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("unknown chunk_id {}", r.chunk_id),
                });
            }
            Ok(QPPair {
                question: r.question,
                chunk_id: r.chunk_id,
                answer: r.answer,
                source: PairSource::External,
                positive: r.positive,
            })
        })
        .collect()
}

fn read_numbered<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Reads a pair file without chunk validation (keeps recorded sources).
pub fn read_pairs(path: &Path) -> Result<Vec<QPPair>> {
    let records: Vec<PairRecord> = read_ndjson(path)?;
    Ok(records
        .into_iter()
        .map(|r| QPPair {
            question: r.question,
            chunk_id: r.chunk_id,
            answer: r.answer,
            source: r.source.unwrap_or_default(),
            positive: r.positive,
        })
        .collect())
}
