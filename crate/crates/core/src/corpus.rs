//! Tokenization, paragraph-aware chunking, and answer matching.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{Error, Result};

/// Default chunk budget in content tokens.
pub const DEFAULT_CHUNK_LEN: usize = 256;
/// Default cap on answer span length, in tokens.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 10;

const OFFSETS_MAGIC: &[u8; 4] = b"PQTK";

/// A token with byte offsets into the text it was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// A source paragraph and its tokens (offsets index into `text`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Paragraph {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }
}

/// One retrievable unit of the corpus. Token offsets index into `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: u64,
    pub doc_id: String,
    pub tokens: Vec<Token>,
    pub text: String,
}

impl Chunk {
    /// Builds a chunk by tokenizing `text`.
    pub fn from_text(id: u64, doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            id,
            doc_id: doc_id.into(),
            tokens,
            text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Source text covered by the inclusive token range `start..=end`.
    pub fn surface(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].start..self.tokens[end].end]
    }

    pub fn span_text(&self, span: &Span) -> &str {
        self.surface(span.start, span.end)
    }
}

/// Inclusive token range inside a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub chunk_id: u64,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace and detaches every punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                text: text[s..end].to_string(),
                start: s,
                end,
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut tokens, &mut word_start, i);
        } else if is_punct(c) {
            flush(&mut tokens, &mut word_start, i);
            let end = i + c.len_utf8();
            tokens.push(Token {
                text: text[i..end].to_string(),
                start: i,
                end,
            });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    flush(&mut tokens, &mut word_start, text.len());
    tokens
}

/// A contiguous token range of one paragraph, used while assembling chunks.
#[derive(Clone, Copy)]
struct Piece {
    para: usize,
    from: usize,
    to: usize,
}

/// Greedy paragraph packing: whole paragraphs are appended until the chunk
/// reaches `max_len`, at which point it is closed. Paragraphs longer than
/// `max_len` are cut at `max_len` boundaries; the trailing remainder is packed
/// like an ordinary paragraph.
pub fn chunk_document(
    doc_id: &str,
    paragraphs: &[Paragraph],
    max_len: usize,
    first_id: u64,
) -> Result<Vec<Chunk>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    let mut groups: Vec<Vec<Piece>> = Vec::new();
    let mut current: Vec<Piece> = Vec::new();
    let mut current_len = 0;
    for (p, para) in paragraphs.iter().enumerate() {
        let n = para.tokens.len();
        if n == 0 {
            continue;
        }
        if n > max_len {
            if !current.is_empty() {
                groups.push(std::mem::take(&mut current));
                current_len = 0;
            }
            let mut from = 0;
            while from < n {
                let to = (from + max_len).min(n);
                let piece = Piece { para: p, from, to };
                if to - from == max_len {
                    groups.push(vec![piece]);
                } else {
                    current.push(piece);
                    current_len = to - from;
                }
                from = to;
            }
            continue;
        }
        current.push(Piece {
            para: p,
            from: 0,
            to: n,
        });
        current_len += n;
        if current_len >= max_len {
            groups.push(std::mem::take(&mut current));
            current_len = 0;
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, pieces)| assemble(first_id + i as u64, doc_id, paragraphs, &pieces))
        .collect())
}

fn assemble(id: u64, doc_id: &str, paragraphs: &[Paragraph], pieces: &[Piece]) -> Chunk {
    let mut text = String::new();
    let mut tokens = Vec::new();
    for (i, piece) in pieces.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let para = &paragraphs[piece.para];
        let toks = &para.tokens[piece.from..piece.to];
        let base = toks[0].start;
        let shift = text.len();
        text.push_str(&para.text[base..toks[toks.len() - 1].end]);
        tokens.extend(toks.iter().map(|t| Token {
            text: t.text.clone(),
            start: t.start - base + shift,
            end: t.end - base + shift,
        }));
    }
    Chunk {
        id,
        doc_id: doc_id.to_string(),
        tokens,
        text,
    }
}

/// A raw corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub paragraphs: Vec<String>,
}

/// Chunks every document; ids are assigned by (document order, chunk order).
pub fn chunk_corpus(docs: &[Document], max_len: usize) -> Result<Vec<Chunk>> {
    let per_doc: Vec<Vec<Chunk>> = docs
        .par_iter()
        .map(|d| {
            let paras: Vec<Paragraph> = d.paragraphs.iter().map(Paragraph::new).collect();
            chunk_document(&d.doc_id, &paras, max_len, 0)
        })
        .collect::<Result<_>>()?;
    let mut next = 0u64;
    let mut out = Vec::with_capacity(per_doc.iter().map(Vec::len).sum());
    for chunks in per_doc {
        for mut c in chunks {
            c.id = next;
            next += 1;
            out.push(c);
        }
    }
    Ok(out)
}

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !is_punct(*c)).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every span of at most `max_answer_len` tokens whose normalized surface text
/// equals a normalized answer, sorted by (start, end). Spans never start or end
/// on a punctuation token and never start on an article.
pub fn find_answer_spans(chunk: &Chunk, answers: &[String], max_answer_len: usize) -> Vec<Span> {
    let targets: HashSet<String> = answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    if targets.is_empty() || chunk.tokens.is_empty() {
        return Vec::new();
    }
    // Normalization works token-locally, so a normalized span is always a
    // substring of the normalized chunk. Cheap rejection for the common case.
    let whole = normalize_answer(&chunk.text);
    if !targets.iter().any(|t| whole.contains(t.as_str())) {
        return Vec::new();
    }
    find_answer_spans_exhaustive(chunk, &targets, max_answer_len)
}

fn find_answer_spans_exhaustive(
    chunk: &Chunk,
    targets: &HashSet<String>,
    max_answer_len: usize,
) -> Vec<Span> {
    let n = chunk.tokens.len();
    let wordlike: Vec<bool> = chunk
        .tokens
        .iter()
        .map(|t| t.text.chars().any(char::is_alphanumeric))
        .collect();
    let can_start = |i: usize| {
        wordlike[i] && !matches!(chunk.tokens[i].text.to_lowercase().as_str(), "a" | "an" | "the")
    };
    let mut spans = Vec::new();
    for start in (0..n).filter(|&i| can_start(i)) {
        for end in (start..n.min(start + max_answer_len)).filter(|&i| wordlike[i]) {
            let norm = normalize_answer(chunk.surface(start, end));
            if !norm.is_empty() && targets.contains(&norm) {
                spans.push(Span {
                    chunk_id: chunk.id,
                    start,
                    end,
                });
            }
        }
    }
    spans
}

/// True when any answer occurs as a span of the chunk.
pub fn contains_answer(chunk: &Chunk, answers: &[String], max_answer_len: usize) -> bool {
    !find_answer_spans(chunk, answers, max_answer_len).is_empty()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    read_ndjson(path)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    write_ndjson(path, docs)
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    id: u64,
    doc_id: String,
    text: String,
}

/// Writes the chunk store (`path`, one JSON record per chunk) and its
/// token-offset sidecar (`path.offsets`).
pub fn write_chunk_store(path: &Path, chunks: &[Chunk]) -> Result<()> {
    let records: Vec<ChunkRecord> = chunks
        .iter()
        .map(|c| ChunkRecord {
            id: c.id,
            doc_id: c.doc_id.clone(),
            text: c.text.clone(),
        })
        .collect();
    write_ndjson(path, &records)?;

    // Sidecar: per chunk a (chunk id, token count) pair followed by one
    // (start, end) pair per token, all little-endian u32.
    let mut w = BinWriter::new(OFFSETS_MAGIC);
    w.u32(chunks.len() as u32);
    for c in chunks {
        w.u32(c.id as u32);
        w.u32(c.tokens.len() as u32);
        for t in &c.tokens {
            w.u32(t.start as u32);
            w.u32(t.end as u32);
        }
    }
    w.write_to(&offsets_path(path))
}

pub fn offsets_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".offsets");
    s.into()
}

/// Loads a chunk store. Uses the offset sidecar when present, otherwise
/// re-tokenizes the stored text.
pub fn read_chunk_store(path: &Path) -> Result<Vec<Chunk>> {
    let records: Vec<ChunkRecord> = read_ndjson(path)?;
    let side = offsets_path(path);
    if !side.exists() {
        return Ok(records
            .into_iter()
            .map(|r| Chunk::from_text(r.id, r.doc_id, r.text))
            .collect());
    }
    let bytes = read_file(&side)?;
    let mut r = BinReader::open(&side, &bytes, OFFSETS_MAGIC)?;
    let count = r.u32()? as usize;
    if count != records.len() {
        return Err(r.format_err(format!(
            "sidecar lists {count} chunks, store has {}",
            records.len()
        )));
    }
    let mut chunks = Vec::with_capacity(count);
    for rec in records {
        let id = r.u32()? as u64;
        if id != rec.id & 0xffff_ffff {
            return Err(r.format_err(format!("chunk id {} out of order", rec.id)));
        }
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let start = r.u32()? as usize;
            let end = r.u32()? as usize;
            let text = rec
                .text
                .get(start..end)
                .ok_or_else(|| r.format_err(format!("bad offsets in chunk {}", rec.id)))?;
            tokens.push(Token {
                text: text.to_string(),
                start,
                end,
            });
        }
        chunks.push(Chunk {
            id: rec.id,
            doc_id: rec.doc_id,
            tokens,
            text: rec.text,
        });
    }
    r.expect_end()?;
    Ok(chunks)
}

pub(crate) fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    fn para_of_len(n: usize) -> Paragraph {
        Paragraph::new(vec!["w"; n].join(" "))
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(texts(&tokenize("Hello, world")), ["Hello", ",", "world"]);
        assert_eq!(texts(&tokenize("Jan 5, 1952")), ["Jan", "5", ",", "1952"]);
        let toks = tokenize("  U.S.A. ");
        assert_eq!(texts(&toks), ["U", ".", "S", ".", "A", "."]);
        assert_eq!((toks[0].start, toks[0].end), (2, 3));
    }

    #[test]
    fn tokenize_multibyte_offsets() {
        let text = "café – “Zürich”";
        for t in tokenize(text) {
            assert_eq!(&text[t.start..t.end], t.text);
        }
    }

    #[test]
    fn chunk_lengths() {
        let lens = |paras: &[usize], max| -> Vec<usize> {
            let ps: Vec<_> = paras.iter().map(|&n| para_of_len(n)).collect();
            chunk_document("d", &ps, max, 0)
                .unwrap()
                .iter()
                .map(Chunk::len)
                .collect()
        };
        assert_eq!(lens(&[100, 100, 100], 256), [300]);
        assert_eq!(lens(&[300], 256), [256, 44]);
        assert_eq!(lens(&[256], 256), [256]);
        assert_eq!(lens(&[10, 600, 5], 256), [10, 256, 256, 93]);
        assert!(lens(&[], 256).is_empty());
        assert!(chunk_document("d", &[], 0, 0).is_err());
    }

    #[test]
    fn chunk_text_round_trip() {
        let ps = vec![
            Paragraph::new("First para, here."),
            Paragraph::new("Second one!"),
        ];
        let chunks = chunk_document("doc", &ps, 256, 7).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].id, 7);
        assert_eq!(chunks[0].text, "First para, here.\nSecond one!");
        for t in &chunks[0].tokens {
            assert_eq!(&chunks[0].text[t.start..t.end], t.text);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("The Beatles"), "beatles");
        assert_eq!(normalize_answer("U.S.A."), "usa");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  A  tale of   an Apple "), "tale of apple");
    }

    #[test]
    fn answer_spans() {
        let c = Chunk::from_text(3, "d", "the capital is Paris .");
        let spans = find_answer_spans(&c, &["Paris".into()], 10);
        assert_eq!(
            spans,
            [Span {
                chunk_id: 3,
                start: 3,
                end: 3
            }]
        );

        let c = Chunk::from_text(0, "d", "Paris , yes Paris");
        let spans = find_answer_spans(&c, &["paris".into()], 10);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[1].start), (0, 3));

        let words: Vec<String> = (0..11).map(|i| format!("w{i}")).collect();
        let c = Chunk::from_text(0, "d", words.join(" "));
        assert!(find_answer_spans(&c, &[words.join(" ")], 10).is_empty());
        assert_eq!(find_answer_spans(&c, &[words.join(" ")], 11).len(), 1);
    }

    #[test]
    fn answer_spans_across_punctuation() {
        let c = Chunk::from_text(0, "d", "born in the U.S.A. in 1950");
        let spans = find_answer_spans(&c, &["USA".into()], 10);
        // "U.S.A." and "the U.S.A." also normalize to "usa" but end on
        // punctuation or start on an article.
        let texts: Vec<&str> = spans.iter().map(|s| c.span_text(s)).collect();
        assert_eq!(texts, ["U.S.A"]);
        assert!(spans.windows(2).all(|w| (w[0].start, w[0].end) < (w[1].start, w[1].end)));
    }

    #[test]
    fn chunk_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chunks.jsonl");
        let docs = vec![
            Document {
                doc_id: "a".into(),
                paragraphs: vec!["One two.".into(), "Three, four!".into()],
            },
            Document {
                doc_id: "b".into(),
                paragraphs: vec!["Élan vital".into()],
            },
        ];
        let chunks = chunk_corpus(&docs, 3).unwrap();
        write_chunk_store(&path, &chunks).unwrap();
        assert_eq!(read_chunk_store(&path).unwrap(), chunks);
        std::fs::remove_file(offsets_path(&path)).unwrap();
        assert_eq!(read_chunk_store(&path).unwrap(), chunks);
    }

    fn arb_doc() -> impl Strategy<Value = Vec<Paragraph>> {
        prop::collection::vec(
            prop::collection::vec("[a-zA-Z0-9]{1,6}|[,.!?]", 0..40)
                .prop_map(|ws| Paragraph::new(ws.join(" "))),
            0..12,
        )
    }

    proptest! {
        #[test]
        fn chunking_partitions_tokens(doc in arb_doc(), max_len in 1usize..50) {
            let chunks = chunk_document("d", &doc, max_len, 0).unwrap();
            let flat: Vec<String> = chunks.iter().flat_map(|c| c.tokens.iter().map(|t| t.text.clone())).collect();
            let expected: Vec<String> = doc.iter().flat_map(|p| p.tokens.iter().map(|t| t.text.clone())).collect();
            prop_assert_eq!(flat, expected);
            for c in &chunks {
                prop_assert!(!c.tokens.is_empty());
                for t in &c.tokens {
                    prop_assert_eq!(&c.text[t.start..t.end], t.text.as_str());
                }
            }
        }

        #[test]
        fn chunk_overshoot_bounded(lens in prop::collection::vec(1usize..40, 0..15), max_len in 1usize..60) {
            let doc: Vec<_> = lens.iter().map(|&n| para_of_len(n)).collect();
            let chunks = chunk_document("d", &doc, max_len, 0).unwrap();
            let longest = lens.iter().copied().filter(|&n| n <= max_len).max().unwrap_or(0);
            for c in &chunks {
                prop_assert!(c.len() < max_len + longest.max(1));
            }
        }

        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn every_token_matches_itself(words in prop::collection::vec("[a-zA-Z0-9.,']{1,5}", 1..20), pick in any::<prop::sample::Index>()) {
            let c = Chunk::from_text(0, "d", words.join(" "));
            let i = pick.index(c.tokens.len());
            let t = c.tokens[i].text.clone();
            if !normalize_answer(&t).is_empty() {
                let spans = find_answer_spans(&c, &[t], 10);
                prop_assert!(spans.iter().any(|s| s.start == i && s.end == i));
            }
        }

        #[test]
        fn prefilter_never_rejects(words in prop::collection::vec("[a-cA-C.,']{1,3}|the|an|a", 1..15), ans in "[a-cA-C.' ]{1,6}") {
            let c = Chunk::from_text(0, "d", words.join(" "));
            let answers = vec![ans];
            let targets: HashSet<String> = answers.iter().map(|a| normalize_answer(a)).filter(|a| !a.is_empty()).collect();
            let fast = find_answer_spans(&c, &answers, 10);
            let slow = if targets.is_empty() { vec![] } else { find_answer_spans_exhaustive(&c, &targets, 10) };
            prop_assert_eq!(fast, slow);
        }
    }
}
