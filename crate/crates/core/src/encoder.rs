//! Dual encoder: a question tower and a paragraph tower that map token lists to
//! dense vectors whose inner product is the matching score.
//!
//! The reference tower hashes character n-grams of the lowercased tokens into
//! buckets, mean-pools the bucket embeddings, and applies a linear projection:
//!
//! ```text
//! pooled = Σ_b (count_b / Σ count) · embedding[b]      (hidden_dim)
//! h      = projectionᵀ · pooled                        (index_dim)
//! ```
//!
//! Gradients are computed analytically from `∂loss/∂h` (see [`EncoderParams::backprop`]).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::corpus::{Chunk, Token};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::vecindex::VectorStore;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PQEN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_buckets: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hidden_dim: usize,
    pub index_dim: usize,
    pub seed: u64,
    /// Use one parameter set for both towers.
    pub share_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_buckets: 1 << 16,
            ngram_min: 3,
            ngram_max: 5,
            hidden_dim: 64,
            index_dim: 32,
            seed: 0,
            share_weights: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_buckets == 0 || self.n_buckets > u32::MAX as usize {
            return Err(Error::invalid("n_buckets must be in 1..=u32::MAX"));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::invalid("need 1 <= ngram_min <= ngram_max"));
        }
        if self.index_dim == 0 || self.index_dim > self.hidden_dim {
            return Err(Error::invalid("need 1 <= index_dim <= hidden_dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Question,
    Paragraph,
}

/// Sparse bucket counts, sorted by bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Features {
    pub buckets: Vec<(u32, f64)>,
    pub total: f64,
}

impl Features {
    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hashes every character n-gram (sizes `ngram_min..=ngram_max`) of each
/// lowercased token. Tokens shorter than `ngram_min` contribute nothing.
pub fn featurize<'a, I>(tokens: I, config: &EncoderConfig) -> Features
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    let mut buf = String::new();
    for tok in tokens {
        let chars: Vec<char> = tok.to_lowercase().chars().collect();
        for n in config.ngram_min..=config.ngram_max {
            if chars.len() < n {
                break;
            }
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                let b = (fnv1a(buf.as_bytes()) % config.n_buckets as u64) as u32;
                *counts.entry(b).or_insert(0.0) += 1.0;
            }
        }
    }
    let total = counts.values().sum();
    Features {
        buckets: counts.into_iter().collect(),
        total,
    }
}

pub fn featurize_tokens(tokens: &[Token], config: &EncoderConfig) -> Features {
    featurize(tokens.iter().map(|t| t.text.as_str()), config)
}

/// Dense output of a tower (`h_q` or `h_p`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// Forward record for one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub pooled: Vec<f64>,
    pub output: DenseVector,
}

/// Mean of embedding rows weighted by feature counts; zero for empty features.
pub fn mean_pool(embedding: &Matrix, features: &Features) -> Vec<f64> {
    let mut pooled = vec![0.0; embedding.cols()];
    if features.total == 0.0 {
        return pooled;
    }
    for &(b, c) in &features.buckets {
        let w = c / features.total;
        for (p, &e) in pooled.iter_mut().zip(embedding.row(b as usize)) {
            *p += w * e;
        }
    }
    pooled
}

/// Gradient of one tower. Embedding rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrad {
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub projection: Matrix,
    hidden_dim: usize,
}

impl TowerGrad {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            embedding: BTreeMap::new(),
            projection: Matrix::zeros(config.hidden_dim, config.index_dim),
            hidden_dim: config.hidden_dim,
        }
    }

    /// Zero gradient shaped like `params`.
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            embedding: BTreeMap::new(),
            projection: Matrix::zeros(params.hidden_dim(), params.index_dim()),
            hidden_dim: params.hidden_dim(),
        }
    }

    pub fn embedding_row(&self, bucket: u32) -> Option<&[f64]> {
        self.embedding.get(&bucket).map(Vec::as_slice)
    }

    /// `∂loss/∂embedding[bucket][col]`, zero for untouched rows.
    pub fn embedding_at(&self, bucket: u32, col: usize) -> f64 {
        self.embedding_row(bucket).map_or(0.0, |r| r[col])
    }

    pub(crate) fn add_embedding_row(&mut self, bucket: u32, scale: f64, v: &[f64]) {
        let row = self
            .embedding
            .entry(bucket)
            .or_insert_with(|| vec![0.0; self.hidden_dim]);
        for (r, &x) in row.iter_mut().zip(v) {
            *r += scale * x;
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &TowerGrad) {
        self.projection.add_scaled(scale, &other.projection);
        for (&b, row) in &other.embedding {
            self.add_embedding_row(b, scale, row);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.projection.scale(s);
        for row in self.embedding.values_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.projection.is_finite()
            && self
                .embedding
                .values()
                .all(|r| r.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.projection.as_slice().iter().all(|&v| v == 0.0)
            && self.embedding.values().all(|r| r.iter().all(|&v| v == 0.0))
    }
}

/// Gradients for both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub question: TowerGrad,
    pub paragraph: TowerGrad,
}

impl GradientSet {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            question: TowerGrad::zeros(config),
            paragraph: TowerGrad::zeros(config),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &GradientSet) {
        self.question.add_scaled(scale, &other.question);
        self.paragraph.add_scaled(scale, &other.paragraph);
    }

    pub fn scale(&mut self, s: f64) {
        self.question.scale(s);
        self.paragraph.scale(s);
    }

    pub fn is_finite(&self) -> bool {
        self.question.is_finite() && self.paragraph.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.question.is_zero() && self.paragraph.is_zero()
    }
}

/// Trainable weights of one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tower: Tower,
    pub embedding: Matrix,
    pub projection: Matrix,
}

impl EncoderParams {
    /// Fan-in scaled uniform initialization.
    pub fn init(tower: Tower, config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let e = 1.0 / (config.hidden_dim as f64).sqrt();
        let p = 1.0 / (config.index_dim as f64).sqrt();
        let embedding = (0..config.n_buckets * config.hidden_dim)
            .map(|_| rng.gen_range(-e..=e))
            .collect();
        let projection = (0..config.hidden_dim * config.index_dim)
            .map(|_| rng.gen_range(-p..=p))
            .collect();
        Self {
            tower,
            embedding: Matrix::from_vec(config.n_buckets, config.hidden_dim, embedding).unwrap(),
            projection: Matrix::from_vec(config.hidden_dim, config.index_dim, projection)
                .unwrap(),
        }
    }

    pub fn zeros(tower: Tower, config: &EncoderConfig) -> Self {
        Self {
            tower,
            embedding: Matrix::zeros(config.n_buckets, config.hidden_dim),
            projection: Matrix::zeros(config.hidden_dim, config.index_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn index_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn encode(&self, features: &Features) -> Encoding {
        let pooled = mean_pool(&self.embedding, features);
        let output = DenseVector(self.projection.t_matvec(&pooled));
        Encoding { pooled, output }
    }

    pub fn encode_vector(&self, features: &Features) -> DenseVector {
        self.encode(features).output
    }

    /// Encodes many inputs in parallel, preserving order.
    pub fn encode_all(&self, features: &[Features]) -> Vec<DenseVector> {
        features.par_iter().map(|f| self.encode_vector(f)).collect()
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂h` for one input.
    pub fn backprop(&self, features: &Features, enc: &Encoding, d_out: &[f64], grad: &mut TowerGrad) {
        grad.projection.add_outer(1.0, &enc.pooled, d_out);
        if features.total == 0.0 {
            return;
        }
        let d_pooled = self.projection.matvec(d_out);
        for &(b, c) in &features.buckets {
            grad.add_embedding_row(b, c / features.total, &d_pooled);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite() && self.projection.is_finite()
    }

    pub fn to_bytes(&self, config: &EncoderConfig) -> Vec<u8> {
        let mut w = BinWriter::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(match self.tower {
            Tower::Question => 0,
            Tower::Paragraph => 1,
        });
        w.u32(config.n_buckets as u32);
        w.u32(config.ngram_min as u32);
        w.u32(config.ngram_max as u32);
        w.u32(config.hidden_dim as u32);
        w.u32(config.index_dim as u32);
        w.u64(config.seed);
        w.u8(config.share_weights as u8);
        for &v in self.embedding.as_slice() {
            w.f32(v as f32);
        }
        for &v in self.projection.as_slice() {
            w.f32(v as f32);
        }
        w.finish()
    }

    pub fn save(&self, path: &Path, config: &EncoderConfig) -> Result<()> {
        std::fs::write(path, self.to_bytes(config)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(EncoderConfig, EncoderParams)> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.format_err(format!("unsupported checkpoint version {version}")));
        }
        let tower = match r.u32()? {
            0 => Tower::Question,
            1 => Tower::Paragraph,
            t => return Err(r.format_err(format!("unknown tower tag {t}"))),
        };
        let config = EncoderConfig {
            n_buckets: r.u32()? as usize,
            ngram_min: r.u32()? as usize,
            ngram_max: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            index_dim: r.u32()? as usize,
            seed: r.u64()?,
            share_weights: r.u8()? != 0,
        };
        config
            .validate()
            .map_err(|e| r.format_err(e.to_string()))?;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = (0..rows * cols)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_vec(rows, cols, data)
        };
        let embedding = read_matrix(config.n_buckets, config.hidden_dim)?;
        let projection = read_matrix(config.hidden_dim, config.index_dim)?;
        r.expect_end()?;
        let params = EncoderParams {
            tower,
            embedding,
            projection,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok((config, params))
    }
}

/// Both towers plus their shared configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub question: EncoderParams,
    pub paragraph: EncoderParams,
}

impl DualEncoder {
    /// Seeded initialization. With `share_weights` both towers start (and stay) identical.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let question = EncoderParams::init(Tower::Question, &config, &mut rng);
        let paragraph = if config.share_weights {
            EncoderParams {
                tower: Tower::Paragraph,
                ..question.clone()
            }
        } else {
            rng.set_stream(2);
            EncoderParams::init(Tower::Paragraph, &config, &mut rng)
        };
        Ok(Self {
            config,
            question,
            paragraph,
        })
    }

    pub fn from_towers(question: EncoderParams, paragraph: EncoderParams, config: EncoderConfig) -> Result<Self> {
        for p in [&question, &paragraph] {
            if p.embedding.shape() != (config.n_buckets, config.hidden_dim)
                || p.projection.shape() != (config.hidden_dim, config.index_dim)
            {
                return Err(Error::invalid("tower shapes do not match encoder config"));
            }
        }
        Ok(Self {
            config,
            question,
            paragraph,
        })
    }

    pub fn featurize(&self, tokens: &[Token]) -> Features {
        featurize_tokens(tokens, &self.config)
    }

    /// Zeroes both projections, so every score is 0.
    pub fn zero_projections(&mut self) {
        self.question.projection.scale(0.0);
        self.paragraph.projection.scale(0.0);
    }
}

/// Encodes chunks with a tower into a store keyed by chunk id, in input order.
pub fn encode_corpus(tower: &EncoderParams, config: &EncoderConfig, chunks: &[Chunk]) -> Result<VectorStore> {
    let dim = tower.index_dim();
    let data: Vec<f32> = chunks
        .par_iter()
        .map(|c| tower.encode_vector(&featurize_tokens(&c.tokens, config)).to_f32())
        .collect::<Vec<_>>()
        .concat();
    VectorStore::from_rows(dim, chunks.iter().map(|c| c.id).collect(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n_buckets: usize, hidden: usize, index: usize) -> EncoderConfig {
        EncoderConfig {
            n_buckets,
            hidden_dim: hidden,
            index_dim: index,
            ..Default::default()
        }
    }

    #[test]
    fn featurize_examples() {
        let c = EncoderConfig::default();
        assert!(featurize([], &c).is_empty());
        assert!(featurize(["ab"], &c).is_empty());
        let f = featurize(["abc", "abc"], &c);
        // FNV-1a 64 of "abc" is 0xe71fa2190541574b; mod 2^16 = 22347.
        assert_eq!(f.buckets, vec![(22347, 2.0)]);
        assert_eq!(f.total, 2.0);
        // Case folding.
        assert_eq!(featurize(["ABC"], &c), featurize(["abc"], &c));
        let f = featurize(["abcde"], &c);
        let buckets: Vec<u32> = f.buckets.iter().map(|b| b.0).collect();
        assert_eq!(buckets, [9437, 22347, 25768, 44642, 46565, 50789]);
    }

    #[test]
    fn encode_zero_projection_and_identity() {
        let c = cfg(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = EncoderParams::init(Tower::Question, &c, &mut rng);
        p.projection.scale(0.0);
        let f = Features {
            buckets: vec![(1, 2.0), (3, 1.0)],
            total: 3.0,
        };
        assert_eq!(p.encode_vector(&f).0, vec![0.0, 0.0]);

        // Identity block projection, one-hot feature on bucket 2.
        let mut p = EncoderParams::init(Tower::Question, &c, &mut rng);
        p.projection = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let f = Features {
            buckets: vec![(2, 1.0)],
            total: 1.0,
        };
        assert_eq!(p.encode_vector(&f).0, p.embedding.row(2)[..2].to_vec());

        // Empty features encode to zero.
        assert_eq!(p.encode_vector(&Features::default()).0, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_hand_sized() {
        // 2 buckets, hidden 2, index 1.
        // embedding = [[1, 2], [3, 4]], projection = [[0.5], [-1]]
        // counts: bucket0 ×1, bucket1 ×3 → pooled = 0.25·[1,2] + 0.75·[3,4] = [2.5, 3.5]
        // h = 0.5·2.5 − 3.5 = −2.25
        let p = EncoderParams {
            tower: Tower::Paragraph,
            embedding: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            projection: Matrix::from_rows(&[vec![0.5], vec![-1.0]]).unwrap(),
        };
        let f = Features {
            buckets: vec![(0, 1.0), (1, 3.0)],
            total: 4.0,
        };
        assert_eq!(p.encode_vector(&f).0, vec![-2.25]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let c = cfg(16, 4, 2);
        let enc = DualEncoder::new(EncoderConfig { seed: 9, ..c }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        enc.question.save(&path, &enc.config).unwrap();
        let (cfg2, q2) = EncoderParams::load(&path).unwrap();
        assert_eq!(cfg2, enc.config);
        assert_eq!(q2.tower, Tower::Question);
        for (a, b) in q2.embedding.as_slice().iter().zip(enc.question.embedding.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // Saving the reloaded params is byte-stable.
        assert_eq!(q2.to_bytes(&cfg2), std::fs::read(&path).unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(EncoderParams::load(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn shared_weights_start_identical() {
        let enc = DualEncoder::new(EncoderConfig {
            share_weights: true,
            ..cfg(32, 4, 2)
        })
        .unwrap();
        assert_eq!(enc.question.embedding, enc.paragraph.embedding);
        let enc = DualEncoder::new(cfg(32, 4, 2)).unwrap();
        assert_ne!(enc.question.embedding, enc.paragraph.embedding);
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(0, 4, 2).validate().is_err());
        assert!(cfg(8, 2, 4).validate().is_err());
        assert!(EncoderConfig {
            ngram_min: 4,
            ngram_max: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn encode_linear_in_embedding(seed in any::<u64>(), counts in prop::collection::vec(0u8..4, 8)) {
            let c = cfg(8, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = EncoderParams::init(Tower::Question, &c, &mut rng);
            let mut b = EncoderParams::init(Tower::Question, &c, &mut rng);
            b.projection = a.projection.clone();
            let mut sum = a.clone();
            sum.embedding.add_scaled(1.0, &b.embedding);
            let buckets: Vec<(u32, f64)> = counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(i, &n)| (i as u32, n as f64)).collect();
            let total = buckets.iter().map(|b| b.1).sum();
            let f = Features { buckets, total };
            let ha = a.encode_vector(&f).0;
            let hb = b.encode_vector(&f).0;
            let hs = sum.encode_vector(&f).0;
            for i in 0..3 {
                prop_assert!((hs[i] - ha[i] - hb[i]).abs() < 1e-12);
            }
        }
    }
}
