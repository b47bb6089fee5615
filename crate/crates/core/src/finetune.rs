//! QA finetuning: a bilinear span reader on top of retrieved chunks, the
//! span-marginal reader loss with shared or per-paragraph normalization, the
//! early retrieval loss, the joint latent-paragraph loss, and answer inference.
//!
//! The paragraph tower and the index are only ever borrowed immutably here.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::corpus::{contains_answer, find_answer_spans, normalize_answer, read_ndjson, write_ndjson, Chunk, Span};
use crate::encoder::{featurize, mean_pool, EncoderConfig, EncoderParams, Features, Tower, TowerGrad};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, Matrix};
use crate::optim::{AdamConfig, AdamState, GradView};
use crate::seed::stage_rng;
use crate::vecindex::{flat_search, Retriever, VectorStore};

const READER_MAGIC: &[u8; 4] = b"PQRD";
const READER_VERSION: u32 = 1;

pub const RETRIEVAL_WEIGHT_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub top_k: usize,
    /// Candidates for the early loss (capped at the corpus size).
    pub early_candidates: usize,
    /// Depth of the pre-annotated answer cache (capped at the corpus size).
    pub cache_depth: usize,
    pub max_answer_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate of the question tower.
    pub learning_rate: f64,
    pub reader_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shared_norm: bool,
    pub joint: bool,
    pub train_token_embedding: bool,
    pub nprobe: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            early_candidates: 5000,
            cache_depth: 10_000,
            max_answer_len: crate::corpus::DEFAULT_MAX_ANSWER_LEN,
            batch_size: 8,
            epochs: 1,
            learning_rate: 1e-5,
            reader_learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 3,
            shared_norm: true,
            joint: false,
            train_token_embedding: false,
            nprobe: crate::vecindex::DEFAULT_NPROBE,
        }
    }
}

impl FinetuneConfig {
    /// Settings for the small synthetic corpus: more epochs, larger steps, and
    /// a trainable token table for the reader.
    pub fn desk() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-4,
            reader_learning_rate: 3e-3,
            train_token_embedding: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.batch_size == 0 || self.max_answer_len == 0 {
            return Err(Error::invalid("top_k, batch_size and max_answer_len must be at least 1"));
        }
        if self.early_candidates == 0 || self.cache_depth < self.early_candidates {
            return Err(Error::invalid("need 1 <= early_candidates <= cache_depth"));
        }
        for lr in [self.learning_rate, self.reader_learning_rate] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid("learning rates must be positive"));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            joint: self.joint,
            norm: if self.shared_norm { SpanNorm::Shared } else { SpanNorm::PerParagraph },
        }
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One QA record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answers: Vec<String>,
}

pub fn read_qa(path: &Path) -> Result<Vec<QaExample>> {
    read_ndjson(path)
}

pub fn write_qa(path: &Path, examples: &[QaExample]) -> Result<()> {
    write_ndjson(path, examples)
}

/// Span-probability normalization set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanNorm {
    /// One softmax over all spans of all retrieved chunks.
    Shared,
    /// A separate softmax inside each chunk.
    PerParagraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub joint: bool,
    pub norm: SpanNorm,
}

/// Start/end bilinear forms between the reader's question vector `h_r` and
/// token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    /// The reader's own question encoder, producing `h_r`.
    pub question: EncoderParams,
    /// `index_dim × hidden_dim`.
    pub start: Matrix,
    pub end: Matrix,
    /// Copy of the paragraph tower's embedding table.
    pub token_embedding: Matrix,
    pub train_embedding: bool,
}

impl ReaderParams {
    /// Zero bilinear forms over a copy of `paragraph.embedding`, with a freshly
    /// initialized question encoder.
    pub fn new(paragraph: &EncoderParams, config: &EncoderConfig, train_embedding: bool, seed: u64) -> Self {
        let (index, hidden) = (paragraph.index_dim(), paragraph.hidden_dim());
        Self {
            question: EncoderParams::init(Tower::Question, config, &mut stage_rng(seed, "reader-init", 0)),
            start: Matrix::zeros(index, hidden),
            end: Matrix::zeros(index, hidden),
            token_embedding: paragraph.embedding.clone(),
            train_embedding,
        }
    }

    pub fn index_dim(&self) -> usize {
        self.start.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.start.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.question.is_finite() && self.start.is_finite() && self.end.is_finite() && self.token_embedding.is_finite()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(READER_MAGIC);
        w.u32(READER_VERSION);
        w.u32(self.index_dim() as u32);
        w.u32(self.hidden_dim() as u32);
        w.u32(self.token_embedding.rows() as u32);
        w.u8(self.train_embedding as u8);
        let q = &self.question;
        for m in [&self.start, &self.end, &self.token_embedding, &q.embedding, &q.projection] {
            m.as_slice().iter().for_each(|&v| w.f32(v as f32));
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, READER_MAGIC)?;
        let version = r.u32()?;
        if version != READER_VERSION {
            return Err(r.format_err(format!("unsupported reader version {version}")));
        }
        let index = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let buckets = r.u32()? as usize;
        let train_embedding = r.u8()? != 0;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = (0..rows * cols)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_vec(rows, cols, data)
        };
        let start = read_matrix(index, hidden)?;
        let end = read_matrix(index, hidden)?;
        let token_embedding = read_matrix(buckets, hidden)?;
        let question = EncoderParams {
            tower: Tower::Question,
            embedding: read_matrix(buckets, hidden)?,
            projection: read_matrix(hidden, index)?,
        };
        r.expect_end()?;
        let params = Self {
            question,
            start,
            end,
            token_embedding,
            train_embedding,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("reader parameters"));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrad {
    pub question: TowerGrad,
    pub start: Matrix,
    pub end: Matrix,
    pub embedding: BTreeMap<u32, Vec<f64>>,
}

impl ReaderGrad {
    pub fn zeros(reader: &ReaderParams) -> Self {
        Self {
            question: TowerGrad::zeros_like(&reader.question),
            start: Matrix::zeros(reader.index_dim(), reader.hidden_dim()),
            end: Matrix::zeros(reader.index_dim(), reader.hidden_dim()),
            embedding: BTreeMap::new(),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &ReaderGrad) {
        self.question.add_scaled(scale, &other.question);
        self.start.add_scaled(scale, &other.start);
        self.end.add_scaled(scale, &other.end);
        for (&b, row) in &other.embedding {
            let dst = self.embedding.entry(b).or_insert_with(|| vec![0.0; row.len()]);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += scale * v;
            }
        }
    }

    pub fn embedding_at(&self, bucket: u32, col: usize) -> f64 {
        self.embedding.get(&bucket).map_or(0.0, |r| r[col])
    }

    fn is_finite(&self) -> bool {
        self.question.is_finite()
            && self.start.as_slice().iter().chain(self.end.as_slice()).all(|v| v.is_finite())
            && self.embedding.values().flatten().all(|v| v.is_finite())
    }
}

/// Features of each token of a chunk, hashed on their own.
pub fn token_features(chunk: &Chunk, config: &EncoderConfig) -> Vec<Features> {
    chunk
        .tokens
        .iter()
        .map(|t| featurize(std::iter::once(t.text.as_str()), config))
        .collect()
}

/// `(start, end)` scores per token: `h_rᵀ · M · e_t`.
pub fn reader_token_scores(reader: &ReaderParams, h_r: &[f64], tokens: &[Features]) -> (Vec<f64>, Vec<f64>) {
    let us = reader.start.t_matvec(h_r);
    let ue = reader.end.t_matvec(h_r);
    tokens
        .iter()
        .map(|f| {
            let e = mean_pool(&reader.token_embedding, f);
            (dot(&us, &e), dot(&ue, &e))
        })
        .unzip()
}

/// All `(start, end)` pairs with `start ≤ end < n` and at most `max_len` tokens.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|s| (s..n.min(s + max_len)).map(move |e| (s, e)))
        .collect()
}

/// A span inside the retrieved list: candidate position plus token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpanRef {
    pub cand: usize,
    pub start: usize,
    pub end: usize,
}

fn span_logits(starts: &[Vec<f64>], ends: &[Vec<f64>], max_len: usize) -> (Vec<SpanRef>, Vec<f64>) {
    let mut refs = Vec::new();
    let mut z = Vec::new();
    for (c, (s, e)) in starts.iter().zip(ends).enumerate() {
        for (a, b) in enumerate_spans(s.len(), max_len) {
            refs.push(SpanRef { cand: c, start: a, end: b });
            z.push(s[a] + e[b]);
        }
    }
    (refs, z)
}

fn group_of(r: &SpanRef, norm: SpanNorm) -> usize {
    match norm {
        SpanNorm::Shared => 0,
        SpanNorm::PerParagraph => r.cand,
    }
}

/// Span probabilities from start + end scores under the chosen normalization.
pub fn span_probs(starts: &[Vec<f64>], ends: &[Vec<f64>], max_len: usize, norm: SpanNorm) -> Vec<(SpanRef, f64)> {
    let (refs, z) = span_logits(starts, ends, max_len);
    let n_groups = starts.len().max(1);
    let mut lse = vec![f64::NEG_INFINITY; n_groups];
    for (r, &v) in refs.iter().zip(&z) {
        let g = group_of(r, norm);
        lse[g] = log_sum_exp(&[lse[g], v]);
    }
    refs.into_iter()
        .zip(z)
        .map(|(r, v)| (r, (v - lse[group_of(&r, norm)]).exp()))
        .collect()
}

/// Global softmax over every valid span of every retrieved chunk.
pub fn shared_norm_span_probs(starts: &[Vec<f64>], ends: &[Vec<f64>], max_len: usize) -> Vec<(SpanRef, f64)> {
    span_probs(starts, ends, max_len, SpanNorm::Shared)
}

/// One retrieved chunk as seen by the losses.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub chunk_id: u64,
    /// Frozen paragraph vector from the index.
    pub vector: Vec<f64>,
    pub tokens: &'a [Features],
    /// Gold `(start, end)` token spans, inclusive.
    pub gold: Vec<(usize, usize)>,
}

/// Loss value with gradients for the retrieval query `h_q`, the reader query
/// `h_r` and the reader head. `reader.question` is left at zero.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_hq: Vec<f64>,
    pub d_hr: Vec<f64>,
    pub reader: ReaderGrad,
}

/// `−log Σ_{gold i} exp(ℓ_i + prior[cand(i)])` with `ℓ` the normalized span log-probability.
/// Returns the loss, `∂/∂z` and `∂/∂prior`.
fn latent_span_loss(
    refs: &[SpanRef],
    z: &[f64],
    gold: &[bool],
    prior: &[f64],
    norm: SpanNorm,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n_groups = prior.len().max(1);
    let mut lse = vec![f64::NEG_INFINITY; n_groups];
    for (r, &v) in refs.iter().zip(z) {
        let g = group_of(r, norm);
        lse[g] = log_sum_exp(&[lse[g], v]);
    }
    let ell: Vec<f64> = refs.iter().zip(z).map(|(r, &v)| v - lse[group_of(r, norm)]).collect();
    let gold_vals: Vec<f64> = (0..refs.len())
        .filter(|&i| gold[i])
        .map(|i| ell[i] + prior[refs[i].cand])
        .collect();
    let total = log_sum_exp(&gold_vals);
    let loss = -total;

    let mut resp = vec![0.0; refs.len()];
    let mut group_resp = vec![0.0; n_groups];
    let mut d_prior = vec![0.0; prior.len()];
    for i in 0..refs.len() {
        if gold[i] {
            let r = (ell[i] + prior[refs[i].cand] - total).exp();
            resp[i] = r;
            group_resp[group_of(&refs[i], norm)] += r;
            d_prior[refs[i].cand] -= r;
        }
    }
    let dz = (0..refs.len())
        .map(|j| ell[j].exp() * group_resp[group_of(&refs[j], norm)] - resp[j])
        .collect();
    (loss, dz, d_prior)
}

struct ReaderForward {
    us: Vec<f64>,
    ue: Vec<f64>,
    /// Token embeddings per candidate.
    emb: Vec<Vec<Vec<f64>>>,
    starts: Vec<Vec<f64>>,
    ends: Vec<Vec<f64>>,
}

fn reader_forward(reader: &ReaderParams, h_r: &[f64], cands: &[Candidate<'_>]) -> ReaderForward {
    let us = reader.start.t_matvec(h_r);
    let ue = reader.end.t_matvec(h_r);
    let emb: Vec<Vec<Vec<f64>>> = cands
        .iter()
        .map(|c| c.tokens.iter().map(|f| mean_pool(&reader.token_embedding, f)).collect())
        .collect();
    let starts = emb.iter().map(|es| es.iter().map(|e| dot(&us, e)).collect()).collect();
    let ends = emb.iter().map(|es| es.iter().map(|e| dot(&ue, e)).collect()).collect();
    ReaderForward { us, ue, emb, starts, ends }
}

/// Backward through the bilinear scores given `∂loss/∂z` per span.
fn reader_backward(
    reader: &ReaderParams,
    h_r: &[f64],
    cands: &[Candidate<'_>],
    fwd: &ReaderForward,
    refs: &[SpanRef],
    dz: &[f64],
) -> (ReaderGrad, Vec<f64>) {
    let mut d_start: Vec<Vec<f64>> = fwd.starts.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut d_end = d_start.clone();
    for (r, &g) in refs.iter().zip(dz) {
        d_start[r.cand][r.start] += g;
        d_end[r.cand][r.end] += g;
    }
    let hidden = reader.hidden_dim();
    let mut ws = vec![0.0; hidden];
    let mut we = vec![0.0; hidden];
    let mut grad = ReaderGrad::zeros(reader);
    for (c, cand) in cands.iter().enumerate() {
        for (t, f) in cand.tokens.iter().enumerate() {
            let (gs, ge) = (d_start[c][t], d_end[c][t]);
            if gs == 0.0 && ge == 0.0 {
                continue;
            }
            let e = &fwd.emb[c][t];
            for k in 0..hidden {
                ws[k] += gs * e[k];
                we[k] += ge * e[k];
            }
            if reader.train_embedding && f.total > 0.0 {
                let de: Vec<f64> = (0..hidden).map(|k| gs * fwd.us[k] + ge * fwd.ue[k]).collect();
                for &(b, cnt) in &f.buckets {
                    let row = grad.embedding.entry(b).or_insert_with(|| vec![0.0; hidden]);
                    let w = cnt / f.total;
                    for k in 0..hidden {
                        row[k] += w * de[k];
                    }
                }
            }
        }
    }
    grad.start.add_outer(1.0, h_r, &ws);
    grad.end.add_outer(1.0, h_r, &we);
    let mut d_hr = reader.start.matvec(&ws);
    for (d, v) in d_hr.iter_mut().zip(reader.end.matvec(&we)) {
        *d += v;
    }
    (grad, d_hr)
}

fn gold_mask(refs: &[SpanRef], cands: &[Candidate<'_>]) -> Vec<bool> {
    let sets: Vec<HashSet<(usize, usize)>> = cands.iter().map(|c| c.gold.iter().copied().collect()).collect();
    refs.iter().map(|r| sets[r.cand].contains(&(r.start, r.end))).collect()
}

#[allow(clippy::too_many_arguments)]
fn marginal_loss(
    reader: &ReaderParams,
    h_q: &[f64],
    h_r: &[f64],
    cands: &[Candidate<'_>],
    norm: SpanNorm,
    max_len: usize,
    joint: bool,
) -> Result<LossOutput> {
    let fwd = reader_forward(reader, h_r, cands);
    let (refs, z) = span_logits(&fwd.starts, &fwd.ends, max_len);
    let gold = gold_mask(&refs, cands);
    if !gold.iter().any(|&g| g) {
        return Err(Error::invalid("no gold span among retrieved chunks"));
    }
    let scores: Vec<f64> = cands.iter().map(|c| dot(h_q, &c.vector)).collect();
    let prior: Vec<f64> = if joint {
        let lse = log_sum_exp(&scores);
        scores.iter().map(|s| s - lse).collect()
    } else {
        vec![0.0; cands.len()]
    };
    let (loss, dz, d_prior) = latent_span_loss(&refs, &z, &gold, &prior, norm);
    let (reader_grad, d_hr) = reader_backward(reader, h_r, cands, &fwd, &refs, &dz);

    let mut d_hq = vec![0.0; h_q.len()];
    if joint {
        // prior = log softmax(scores): ∂/∂s_c = d_prior_c − P_c · Σ d_prior.
        let lse = log_sum_exp(&scores);
        let sum_d: f64 = d_prior.iter().sum();
        for (c, cand) in cands.iter().enumerate() {
            let ds = d_prior[c] - (scores[c] - lse).exp() * sum_d;
            for (d, &v) in d_hq.iter_mut().zip(&cand.vector) {
                *d += ds * v;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("span loss"));
    }
    Ok(LossOutput {
        loss,
        d_hq,
        d_hr,
        reader: reader_grad,
    })
}

/// `−log Σ_{p∈D*} Σ_{s∈S*_p} P(s|p,q)` over the retrieved chunks.
///
/// With per-paragraph normalization each answer-bearing chunk contributes up to
/// one unit of mass, so the loss can go below zero.
pub fn reader_loss(
    reader: &ReaderParams,
    h_r: &[f64],
    cands: &[Candidate<'_>],
    norm: SpanNorm,
    max_len: usize,
) -> Result<LossOutput> {
    let h_q = vec![0.0; cands.first().map_or(0, |c| c.vector.len())];
    marginal_loss(reader, &h_q, h_r, cands, norm, max_len, false)
}

/// `−log Σ_{p∈D*} P_θ(p|q) Σ_{s∈S*_p} P(s|p,q)` with `P_θ` normalized over the candidates.
pub fn joint_loss(
    reader: &ReaderParams,
    h_q: &[f64],
    h_r: &[f64],
    cands: &[Candidate<'_>],
    norm: SpanNorm,
    max_len: usize,
) -> Result<LossOutput> {
    marginal_loss(reader, h_q, h_r, cands, norm, max_len, true)
}

/// `−log Σ_{p∈D*_M} P_θ(p|q)` normalized over the `M` given vectors, with
/// `∂loss/∂h_q`. `None` when no vector is marked gold.
pub fn early_loss(h_q: &[f64], vectors: &[&[f32]], gold: &[bool]) -> Option<(f64, Vec<f64>)> {
    if !gold.iter().any(|&g| g) {
        return None;
    }
    let scores: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().zip(h_q).map(|(&a, &b)| f64::from(a) * b).sum())
        .collect();
    let lse = log_sum_exp(&scores);
    let gold_scores: Vec<f64> = scores.iter().zip(gold).filter(|(_, &g)| g).map(|(&s, _)| s).collect();
    let gold_lse = log_sum_exp(&gold_scores);
    let loss = lse - gold_lse;
    let mut d = vec![0.0; h_q.len()];
    for ((v, &s), &g) in vectors.iter().zip(&scores).zip(gold) {
        let w = (s - lse).exp() - if g { (s - gold_lse).exp() } else { 0.0 };
        for (dk, &vk) in d.iter_mut().zip(v.iter()) {
            *dk += w * f64::from(vk);
        }
    }
    Some((loss, d))
}

/// Per question: the answer-bearing chunk ids among the top retrieved by the
/// untuned question tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSetCache {
    pub fingerprint: String,
    pub depth: usize,
    pub entries: Vec<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub question: String,
    pub chunks: Vec<u64>,
}

impl AnswerSetCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

/// Read-only view of everything retrieval needs.
pub struct QaContext<'a> {
    pub chunks: &'a [Chunk],
    pub store: &'a VectorStore,
    pub retriever: &'a dyn Retriever,
    pub max_answer_len: usize,
    by_id: HashMap<u64, usize>,
    rows: HashMap<u64, usize>,
    token_features: Vec<Vec<Features>>,
}

impl<'a> QaContext<'a> {
    pub fn new(
        chunks: &'a [Chunk],
        store: &'a VectorStore,
        retriever: &'a dyn Retriever,
        config: &EncoderConfig,
        max_answer_len: usize,
    ) -> Result<Self> {
        if chunks.is_empty() || store.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let by_id: HashMap<u64, usize> = chunks.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let rows: HashMap<u64, usize> = store.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if let Some(id) = store.ids().iter().find(|id| !by_id.contains_key(id)) {
            return Err(Error::invalid(format!("vector {id} has no chunk")));
        }
        let token_features = chunks.par_iter().map(|c| token_features(c, config)).collect();
        Ok(Self {
            chunks,
            store,
            retriever,
            max_answer_len,
            by_id,
            rows,
            token_features,
        })
    }

    pub fn chunk(&self, id: u64) -> Option<&'a Chunk> {
        self.by_id.get(&id).map(|&i| &self.chunks[i])
    }

    fn vector(&self, id: u64) -> Vec<f64> {
        self.store.row(self.rows[&id]).iter().map(|&v| f64::from(v)).collect()
    }

    fn candidates(&self, ids: &[u64], answers: Option<&[String]>) -> Vec<Candidate<'_>> {
        ids.iter()
            .map(|&id| {
                let i = self.by_id[&id];
                let gold = answers.map_or_else(Vec::new, |a| {
                    find_answer_spans(&self.chunks[i], a, self.max_answer_len)
                        .into_iter()
                        .map(|s| (s.start, s.end))
                        .collect()
                });
                Candidate {
                    chunk_id: id,
                    vector: self.vector(id),
                    tokens: &self.token_features[i],
                    gold,
                }
            })
            .collect()
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Pre-annotates the top `depth` chunks of each question under the given question tower.
pub fn build_answer_cache(
    questions: &[QaExample],
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    ctx: &QaContext<'_>,
    depth: usize,
    fingerprint: impl Into<String>,
) -> Result<AnswerSetCache> {
    let depth = depth.min(ctx.store.len());
    let entries = questions
        .par_iter()
        .map(|q| {
            let h = question_tower.encode_vector(&featurize(crate::corpus::tokenize(&q.question).iter().map(|t| t.text.as_str()), config));
            let hits = flat_search(ctx.store, &h.to_f32(), depth)?;
            let mut chunks: Vec<u64> = hits
                .hits
                .iter()
                .filter(|hit| ctx.chunk(hit.id).is_some_and(|c| contains_answer(c, &q.answers, ctx.max_answer_len)))
                .map(|hit| hit.id)
                .collect();
            chunks.sort_unstable();
            Ok(CacheEntry {
                question: q.question.clone(),
                chunks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnswerSetCache {
        fingerprint: fingerprint.into(),
        depth,
        entries,
    })
}

fn question_features(text: &str, config: &EncoderConfig) -> Features {
    featurize(crate::corpus::tokenize(text).iter().map(|t| t.text.as_str()), config)
}

/// Gradients for one question.
#[derive(Debug, Clone)]
pub struct QuestionGrads {
    pub loss: f64,
    /// Early-loss share of `loss`.
    pub early_loss: f64,
    pub question: TowerGrad,
    pub reader: ReaderGrad,
    pub early_skipped: bool,
}

/// Early loss plus the reader or joint loss for one question, or `None` when
/// the top-k chunks hold no answer (the question is skipped).
#[allow(clippy::too_many_arguments)]
pub fn question_step(
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    reader: &ReaderParams,
    ctx: &QaContext<'_>,
    example: &QaExample,
    cached: Option<&[u64]>,
    ft: &FinetuneConfig,
) -> Result<Option<QuestionGrads>> {
    let features = question_features(&example.question, config);
    let enc = question_tower.encode(&features);
    let h_q = &enc.output.0;
    let reader_enc = reader.question.encode(&features);
    let h_r = &reader_enc.output.0;
    let query = to_f32(h_q);
    let top = ctx.retriever.search(&query, ft.top_k)?;
    let cands = ctx.candidates(&top.ids(), Some(&example.answers));
    if cands.iter().all(|c| c.gold.is_empty()) {
        return Ok(None);
    }
    let objective = ft.objective();
    let mut out = if objective.joint {
        joint_loss(reader, h_q, h_r, &cands, objective.norm, ctx.max_answer_len)?
    } else {
        reader_loss(reader, h_r, &cands, objective.norm, ctx.max_answer_len)?
    };
    reader.question.backprop(&features, &reader_enc, &out.d_hr, &mut out.reader.question);
    let mut loss = out.loss;
    let mut d_hq = out.d_hq;

    let m = ft.early_candidates.min(ctx.store.len());
    let early_hits = flat_search(ctx.store, &query, m)?;
    let gold: Vec<bool> = match cached {
        Some(ids) => {
            let set: HashSet<u64> = ids.iter().copied().collect();
            early_hits.hits.iter().map(|h| set.contains(&h.id)).collect()
        }
        None => early_hits
            .hits
            .iter()
            .map(|h| contains_answer(ctx.chunk(h.id).unwrap(), &example.answers, ctx.max_answer_len))
            .collect(),
    };
    let vectors: Vec<&[f32]> = early_hits.hits.iter().map(|h| ctx.store.row(ctx.rows[&h.id])).collect();
    let early = early_loss(h_q, &vectors, &gold);
    let early_skipped = early.is_none();
    let mut early_part = 0.0;
    if let Some((l, d)) = early {
        loss += l;
        early_part = l;
        for (a, b) in d_hq.iter_mut().zip(d) {
            *a += b;
        }
    }

    let mut question = TowerGrad::zeros(config);
    question_tower.backprop(&features, &enc, &d_hq, &mut question);
    Ok(Some(QuestionGrads {
        loss,
        early_loss: early_part,
        question,
        reader: out.reader,
        early_skipped,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: u64,
    pub loss: f64,
    pub early_loss: f64,
    pub questions: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub question: EncoderParams,
    pub reader: ReaderParams,
    pub log: Vec<FinetuneLog>,
    pub updates: u64,
    /// Question visits skipped because the top-k held no answer.
    pub skipped: usize,
    /// Question visits whose early-loss candidates held no answer.
    pub early_skipped: usize,
}

/// Trains the question tower and the reader. Batches where every question is
/// skipped apply no update.
pub fn finetune(
    ft: &FinetuneConfig,
    config: &EncoderConfig,
    ctx: &QaContext<'_>,
    mut question: EncoderParams,
    mut reader: ReaderParams,
    train: &[QaExample],
    cache: Option<&AnswerSetCache>,
) -> Result<FinetuneOutcome> {
    ft.validate()?;
    if let Some(c) = cache {
        if c.entries.len() != train.len() || c.entries.iter().zip(train).any(|(e, q)| e.question != q.question) {
            return Err(Error::invalid("answer cache does not match the training questions"));
        }
    }
    reader.train_embedding = ft.train_token_embedding;
    let mut question_adam = AdamState::new(&[question.embedding.as_slice().len(), question.projection.as_slice().len()]);
    let mut reader_sizes = vec![
        reader.question.embedding.as_slice().len(),
        reader.question.projection.as_slice().len(),
        reader.start.as_slice().len(),
        reader.end.as_slice().len(),
    ];
    if reader.train_embedding {
        reader_sizes.push(reader.token_embedding.as_slice().len());
    }
    let mut reader_adam = AdamState::new(&reader_sizes);
    let (question_cfg, reader_cfg) = (ft.adam(ft.learning_rate), ft.adam(ft.reader_learning_rate));

    let mut log = Vec::new();
    let (mut skipped, mut early_skipped) = (0, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..ft.epochs {
        let mut rng = stage_rng(ft.seed, "finetune-order", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(ft.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let cached = cache.map(|c| c.entries[i].chunks.as_slice());
                    question_step(&question, config, &reader, ctx, &train[i], cached, ft)
                })
                .collect::<Result<Vec<_>>>()?;
            let used: Vec<&QuestionGrads> = results.iter().flatten().collect();
            skipped += batch.len() - used.len();
            early_skipped += used.iter().filter(|g| g.early_skipped).count();
            if used.is_empty() {
                continue;
            }
            let scale = 1.0 / used.len() as f64;
            let mut qg = TowerGrad::zeros(config);
            let mut rg = ReaderGrad::zeros(&reader);
            let (mut loss, mut early_loss) = (0.0, 0.0);
            for g in &used {
                early_loss += scale * g.early_loss;
                qg.add_scaled(scale, &g.question);
                rg.add_scaled(scale, &g.reader);
                loss += scale * g.loss;
            }
            let hidden = config.hidden_dim;
            let question_grads = [
                GradView::Rows {
                    rows: &qg.embedding,
                    width: hidden,
                },
                GradView::Dense(qg.projection.as_slice()),
            ];
            let mut reader_params: Vec<&mut [f64]> = vec![
                reader.question.embedding.as_mut_slice(),
                reader.question.projection.as_mut_slice(),
                reader.start.as_mut_slice(),
                reader.end.as_mut_slice(),
            ];
            let mut reader_grads = vec![
                GradView::Rows {
                    rows: &rg.question.embedding,
                    width: hidden,
                },
                GradView::Dense(rg.question.projection.as_slice()),
                GradView::Dense(rg.start.as_slice()),
                GradView::Dense(rg.end.as_slice()),
            ];
            if reader.train_embedding {
                reader_params.push(reader.token_embedding.as_mut_slice());
                reader_grads.push(GradView::Rows {
                    rows: &rg.embedding,
                    width: hidden,
                });
            }
            // Both states validate before mutating; check the reader first so a
            // failure leaves every parameter untouched.
            if !rg.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            question_adam.update(
                &question_cfg,
                &mut [question.embedding.as_mut_slice(), question.projection.as_mut_slice()],
                &question_grads,
            )?;
            reader_adam.update(&reader_cfg, &mut reader_params, &reader_grads)?;
            log.push(FinetuneLog {
                step: question_adam.step,
                loss,
                early_loss,
                questions: used.len(),
                skipped: batch.len() - used.len(),
            });
        }
    }
    Ok(FinetuneOutcome {
        question,
        reader,
        log,
        updates: question_adam.step,
        skipped,
        early_skipped,
    })
}

/// A scored answer candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub span: Span,
    pub span_score: f64,
    pub retrieval_score: f64,
    pub combined: f64,
}

/// Highest `weight · retrieval + span` score; ties go to the lower chunk id, then the lower start.
pub fn select_span(spans: &[SpanPrediction], retrieval_weight: f64) -> Option<SpanPrediction> {
    spans
        .iter()
        .map(|s| SpanPrediction {
            combined: retrieval_weight * s.retrieval_score + s.span_score,
            ..*s
        })
        .min_by(|a, b| {
            b.combined
                .total_cmp(&a.combined)
                .then(a.span.chunk_id.cmp(&b.span.chunk_id))
                .then(a.span.start.cmp(&b.span.start))
                .then(a.span.end.cmp(&b.span.end))
        })
}

/// Every valid span in the top-k chunks with its span and retrieval scores.
pub fn score_spans(
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    reader: &ReaderParams,
    ctx: &QaContext<'_>,
    question: &str,
    k: usize,
) -> Result<Vec<SpanPrediction>> {
    let features = question_features(question, config);
    let h_q = question_tower.encode_vector(&features).0;
    let h_r = reader.question.encode_vector(&features).0;
    let top = ctx.retriever.search(&to_f32(&h_q), k)?;
    let cands = ctx.candidates(&top.ids(), None);
    let fwd = reader_forward(reader, &h_r, &cands);
    let mut out = Vec::new();
    for (c, cand) in cands.iter().enumerate() {
        let retrieval = dot(&h_q, &cand.vector);
        for (s, e) in enumerate_spans(cand.tokens.len(), ctx.max_answer_len) {
            out.push(SpanPrediction {
                span: Span {
                    chunk_id: cand.chunk_id,
                    start: s,
                    end: e,
                },
                span_score: fwd.starts[c][s] + fwd.ends[c][e],
                retrieval_score: retrieval,
                combined: 0.0,
            });
        }
    }
    Ok(out)
}

/// Answer text for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question: String,
    pub prediction: String,
    pub normalized: String,
    pub combined_score: f64,
    pub chunk_id: Option<u64>,
    pub span: Option<SpanPrediction>,
}

fn prediction_from(ctx: &QaContext<'_>, question: &str, best: Option<SpanPrediction>) -> Prediction {
    match best {
        Some(sp) => {
            let text = ctx.chunk(sp.span.chunk_id).map_or("", |c| c.span_text(&sp.span)).to_string();
            Prediction {
                question: question.to_string(),
                normalized: normalize_answer(&text),
                prediction: text,
                combined_score: sp.combined,
                chunk_id: Some(sp.span.chunk_id),
                span: Some(sp),
            }
        }
        None => Prediction {
            question: question.to_string(),
            prediction: String::new(),
            normalized: String::new(),
            combined_score: f64::NEG_INFINITY,
            chunk_id: None,
            span: None,
        },
    }
}

pub fn answer_inference(
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    reader: &ReaderParams,
    ctx: &QaContext<'_>,
    question: &str,
    k: usize,
    retrieval_weight: f64,
) -> Result<Prediction> {
    let spans = score_spans(question_tower, config, reader, ctx, question, k)?;
    Ok(prediction_from(ctx, question, select_span(&spans, retrieval_weight)))
}

/// Predictions for many questions, in order.
#[allow(clippy::too_many_arguments)]
pub fn predict_all(
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    reader: &ReaderParams,
    ctx: &QaContext<'_>,
    questions: &[QaExample],
    k: usize,
    retrieval_weight: f64,
) -> Result<Vec<Prediction>> {
    questions
        .par_iter()
        .map(|q| answer_inference(question_tower, config, reader, ctx, &q.question, k, retrieval_weight))
        .collect()
}

/// Exact match of each grid weight on a dev set; picks the best, smallest weight on ties.
pub fn sweep_retrieval_weight(
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    reader: &ReaderParams,
    ctx: &QaContext<'_>,
    dev: &[QaExample],
    k: usize,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if dev.is_empty() || grid.is_empty() {
        return Err(Error::Empty("retrieval weight sweep"));
    }
    let scored = dev
        .par_iter()
        .map(|q| score_spans(question_tower, config, reader, ctx, &q.question, k))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(grid.len());
    for &w in grid {
        let preds: Vec<String> = scored
            .iter()
            .zip(dev)
            .map(|(spans, q)| prediction_from(ctx, &q.question, select_span(spans, w)).prediction)
            .collect();
        let golds: Vec<Vec<String>> = dev.iter().map(|q| q.answers.clone()).collect();
        table.push((w, crate::evalqa::exact_match(&preds, &golds)?));
    }
    let best = table
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(w, em)| match acc {
            Some((_, b)) if b >= em => acc,
            _ => Some((w, em)),
        })
        .unwrap()
        .0;
    Ok((best, table))
}
