//! Clustering-based progressive pretraining with in-batch negatives.
//!
//! Every `recluster_every` updates the paired chunks are re-encoded with the
//! current paragraph tower and clustered; each batch is then drawn from a single
//! cluster so the other paragraphs in the batch act as hard negatives.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Chunk};
use crate::datagen::QPPair;
use crate::encoder::{featurize_tokens, DualEncoder, EncoderConfig, Features, GradientSet};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::optim::{AdamConfig, AdamState, GradView};
use crate::seed::{derive_seed, stage_rng};
use crate::vecindex::{kmeans_with, KMeansParams, VectorStore, DEFAULT_KMEANS_ITERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub total_updates: u64,
    pub recluster_every: u64,
    pub num_clusters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub clustering_enabled: bool,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 80,
            accumulation_steps: 8,
            total_updates: 90_000,
            recluster_every: 20_000,
            num_clusters: 20,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 3,
            clustering_enabled: true,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            kmeans_restarts: 2,
        }
    }
}

impl PretrainConfig {
    /// Small budget for laptop runs. The learning rate is raised to match the
    /// shallow reference encoder and the short schedule.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            accumulation_steps: 2,
            total_updates: 2000,
            recluster_every: 500,
            num_clusters: 20,
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::invalid("accumulation_steps must be at least 1"));
        }
        if self.num_clusters == 0 {
            return Err(Error::invalid("num_clusters must be at least 1"));
        }
        if self.recluster_every == 0 {
            return Err(Error::invalid("recluster_every must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A pair with both sides featurized.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub chunk_id: u64,
    pub question: Features,
    pub positive: Features,
}

/// Featurized pairs plus the chunks they point to.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub pairs: Vec<PreparedPair>,
    /// Sorted ids of chunks with at least one pair.
    pub chunk_ids: Vec<u64>,
    /// Features of each chunk in `chunk_ids`, used for clustering.
    pub chunk_features: Vec<Features>,
    pairs_by_chunk: HashMap<u64, Vec<usize>>,
}

impl TrainingSet {
    pub fn build(pairs: &[QPPair], chunks: &[Chunk], config: &EncoderConfig) -> Result<Self> {
        let by_id: HashMap<u64, &Chunk> = chunks.iter().map(|c| (c.id, c)).collect();
        if let Some(p) = pairs.iter().find(|p| !by_id.contains_key(&p.chunk_id)) {
            return Err(Error::invalid(format!("pair references unknown chunk {}", p.chunk_id)));
        }
        let prepared: Vec<PreparedPair> = pairs
            .par_iter()
            .map(|p| {
                let chunk = by_id[&p.chunk_id];
                let positive = match &p.positive {
                    Some(text) => featurize_tokens(&tokenize(text), config),
                    None => featurize_tokens(&chunk.tokens, config),
                };
                PreparedPair {
                    chunk_id: p.chunk_id,
                    question: featurize_tokens(&tokenize(&p.question), config),
                    positive,
                }
            })
            .collect();
        let mut pairs_by_chunk: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, p) in prepared.iter().enumerate() {
            pairs_by_chunk.entry(p.chunk_id).or_default().push(i);
        }
        let mut chunk_ids: Vec<u64> = pairs_by_chunk.keys().copied().collect();
        chunk_ids.sort_unstable();
        let chunk_features = chunk_ids
            .par_iter()
            .map(|id| featurize_tokens(&by_id[id].tokens, config))
            .collect();
        Ok(Self {
            pairs: prepared,
            chunk_ids,
            chunk_features,
            pairs_by_chunk,
        })
    }

    pub fn pairs_of(&self, chunk_id: u64) -> &[usize] {
        self.pairs_by_chunk.get(&chunk_id).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
pub struct InBatchLoss {
    pub loss: f64,
    pub grads: GradientSet,
    /// Batch size after dropping repeated chunks.
    pub size: usize,
}

/// Mean cross-entropy of picking each question's own paragraph among the batch.
///
/// Pairs whose chunk already appeared earlier in the batch are dropped so the
/// diagonal is the only correct label.
pub fn inbatch_loss(encoder: &DualEncoder, batch: &[&PreparedPair]) -> Result<InBatchLoss> {
    let mut seen = HashSet::new();
    let batch: Vec<&PreparedPair> = batch
        .iter()
        .copied()
        .filter(|p| seen.insert(p.chunk_id))
        .collect();
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let b = batch.len();
    let q: Vec<_> = batch
        .par_iter()
        .map(|p| encoder.question.encode(&p.question))
        .collect();
    let p: Vec<_> = batch
        .par_iter()
        .map(|p| encoder.paragraph.encode(&p.positive))
        .collect();

    let mut loss = 0.0;
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| q[i].output.dot(&p[j].output)).collect();
        let lse = log_sum_exp(&row);
        loss += lse - row[i];
        for j in 0..b {
            let prob = (row[j] - lse).exp();
            g[i][j] = (prob - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("in-batch loss"));
    }

    let k = encoder.config.index_dim;
    let mut grads = GradientSet::zeros(&encoder.config);
    for i in 0..b {
        let mut dq = vec![0.0; k];
        let mut dp = vec![0.0; k];
        for j in 0..b {
            for d in 0..k {
                dq[d] += g[i][j] * p[j].output.0[d];
                dp[d] += g[j][i] * q[j].output.0[d];
            }
        }
        encoder
            .question
            .backprop(&batch[i].question, &q[i], &dq, &mut grads.question);
        encoder
            .paragraph
            .backprop(&batch[i].positive, &p[i], &dp, &mut grads.paragraph);
    }
    Ok(InBatchLoss {
        loss,
        grads,
        size: b,
    })
}

/// Cluster assignment of the paired chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    pub assignment: BTreeMap<u64, usize>,
    /// Member chunk ids per cluster, ascending.
    pub members: Vec<Vec<u64>>,
    /// Other clusters ordered by centroid distance, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    pub built_at: u64,
}

impl ClusterMap {
    /// A single cluster holding every chunk: plain uniform sampling.
    pub fn uniform(chunk_ids: &[u64], built_at: u64) -> Self {
        Self {
            assignment: chunk_ids.iter().map(|&id| (id, 0)).collect(),
            members: vec![chunk_ids.to_vec()],
            neighbors: vec![Vec::new()],
            built_at,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    /// Builds a map from explicit groups; neighbors follow group order.
    pub fn from_groups(groups: Vec<Vec<u64>>, built_at: u64) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        let mut members = Vec::with_capacity(groups.len());
        for (c, mut g) in groups.into_iter().enumerate() {
            g.sort_unstable();
            for &id in &g {
                if assignment.insert(id, c).is_some() {
                    return Err(Error::invalid(format!("chunk {id} in two clusters")));
                }
            }
            members.push(g);
        }
        let n = members.len();
        let neighbors = (0..n).map(|c| (0..n).filter(|&o| o != c).collect()).collect();
        Ok(Self {
            assignment,
            members,
            neighbors,
            built_at,
        })
    }
}

/// Encodes the paired chunks with the paragraph tower and runs k-means with `k = num_clusters`.
pub fn build_cluster_map(
    data: &TrainingSet,
    encoder: &DualEncoder,
    num_clusters: usize,
    kmeans: KMeansParams,
    built_at: u64,
) -> Result<ClusterMap> {
    let n = data.chunk_ids.len();
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::invalid(format!(
            "cannot form {num_clusters} clusters from {n} paired chunks"
        )));
    }
    let dim = encoder.config.index_dim;
    let vectors = encoder.paragraph.encode_all(&data.chunk_features);
    let flat: Vec<f32> = vectors.iter().flat_map(|v| v.to_f32()).collect();
    let store = VectorStore::from_rows(dim, data.chunk_ids.clone(), flat)?;
    let result = kmeans_with(
        &store,
        KMeansParams {
            k: num_clusters,
            ..kmeans
        },
    )?;

    let mut members = vec![Vec::new(); num_clusters];
    let mut assignment = BTreeMap::new();
    for (&id, &c) in data.chunk_ids.iter().zip(&result.assignments) {
        members[c].push(id);
        assignment.insert(id, c);
    }
    let neighbors = (0..num_clusters)
        .map(|c| {
            let mut others: Vec<(f64, usize)> = (0..num_clusters)
                .filter(|&o| o != c)
                .map(|o| {
                    let d = result
                        .centroid(c)
                        .iter()
                        .zip(result.centroid(o))
                        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                        .sum::<f64>();
                    (d, o)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().map(|(_, o)| o).collect()
        })
        .collect();
    Ok(ClusterMap {
        assignment,
        members,
        neighbors,
        built_at,
    })
}

/// Pair indices of one batch and the cluster it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub cluster: usize,
    pub pairs: Vec<usize>,
}

/// Draws a cluster proportionally to its size, then `batch_size` distinct chunks
/// from it (topping up from the nearest clusters), then one pair per chunk.
pub fn sample_batch(map: &ClusterMap, data: &TrainingSet, rng: &mut ChaCha8Rng, batch_size: usize) -> Batch {
    let total: usize = map.members.iter().map(Vec::len).sum();
    let mut r = rng.gen_range(0..total);
    let mut cluster = 0;
    for (c, m) in map.members.iter().enumerate() {
        if r < m.len() {
            cluster = c;
            break;
        }
        r -= m.len();
    }

    let mut chosen = Vec::with_capacity(batch_size);
    let fill = |from: &[u64], chosen: &mut Vec<u64>, rng: &mut ChaCha8Rng| {
        let need = batch_size - chosen.len();
        if from.len() <= need {
            chosen.extend_from_slice(from);
        } else {
            chosen.extend(index::sample(rng, from.len(), need).into_iter().map(|i| from[i]));
        }
    };
    fill(&map.members[cluster], &mut chosen, rng);
    for &nb in &map.neighbors[cluster] {
        if chosen.len() == batch_size {
            break;
        }
        fill(&map.members[nb], &mut chosen, rng);
    }
    chosen.shuffle(rng);

    let pairs = chosen
        .iter()
        .map(|&id| {
            let options = data.pairs_of(id);
            options[rng.gen_range(0..options.len())]
        })
        .collect();
    Batch { cluster, pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub cluster_epoch: u64,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub encoder: DualEncoder,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub cluster_map: Option<ClusterMap>,
    pub cluster_epoch: u64,
}

impl TrainState {
    pub fn new(config: &PretrainConfig, encoder: DualEncoder) -> Self {
        let sizes = [
            encoder.question.embedding.as_slice().len(),
            encoder.question.projection.as_slice().len(),
            encoder.paragraph.embedding.as_slice().len(),
            encoder.paragraph.projection.as_slice().len(),
        ];
        Self {
            step: 0,
            encoder,
            adam: AdamState::new(&sizes),
            rng: stage_rng(config.seed, "pretrain-sampler", 0),
            cluster_map: None,
            cluster_epoch: 0,
        }
    }

    /// Writes `question.ckpt`, `paragraph.ckpt` and `optimizer.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = &self.encoder.config;
        self.encoder.question.save(&dir.join("question.ckpt"), cfg)?;
        self.encoder.paragraph.save(&dir.join("paragraph.ckpt"), cfg)?;
        self.adam.save(&dir.join("optimizer.bin"))
    }

    fn apply(&mut self, adam: &AdamConfig, mut grads: GradientSet) -> Result<()> {
        if self.encoder.config.share_weights {
            let mut merged = grads.question.clone();
            merged.add_scaled(1.0, &grads.paragraph);
            grads.paragraph = merged.clone();
            grads.question = merged;
        }
        let hidden = self.encoder.config.hidden_dim;
        let enc = &mut self.encoder;
        let views = [
            GradView::Rows {
                rows: &grads.question.embedding,
                width: hidden,
            },
            GradView::Dense(grads.question.projection.as_slice()),
            GradView::Rows {
                rows: &grads.paragraph.embedding,
                width: hidden,
            },
            GradView::Dense(grads.paragraph.projection.as_slice()),
        ];
        self.adam.update(
            adam,
            &mut [
                enc.question.embedding.as_mut_slice(),
                enc.question.projection.as_mut_slice(),
                enc.paragraph.embedding.as_mut_slice(),
                enc.paragraph.projection.as_mut_slice(),
            ],
            &views,
        )?;
        self.step += 1;
        Ok(())
    }
}

fn recluster(state: &mut TrainState, config: &PretrainConfig, data: &TrainingSet) -> Result<()> {
    let epoch = state.step / config.recluster_every;
    let map = if config.clustering_enabled {
        let params = KMeansParams {
            k: config.num_clusters,
            max_iters: config.kmeans_iters,
            restarts: config.kmeans_restarts.max(1),
            seed: derive_seed(config.seed, "pretrain-kmeans", epoch),
        };
        build_cluster_map(data, &state.encoder, config.num_clusters, params, state.step)?
    } else {
        ClusterMap::uniform(&data.chunk_ids, state.step)
    };
    state.cluster_map = Some(map);
    state.cluster_epoch = epoch;
    Ok(())
}

/// One accumulation window: `U` batches, averaged gradients, exactly one Adam update.
pub fn train_update(state: &mut TrainState, config: &PretrainConfig, data: &TrainingSet) -> Result<LogRecord> {
    let map = state
        .cluster_map
        .as_ref()
        .ok_or_else(|| Error::invalid("cluster map not built"))?;
    let u = config.accumulation_steps;
    let mut acc = GradientSet::zeros(&state.encoder.config);
    let mut loss = 0.0;
    for _ in 0..u {
        let batch = sample_batch(map, data, &mut state.rng, config.batch_size);
        let refs: Vec<&PreparedPair> = batch.pairs.iter().map(|&i| &data.pairs[i]).collect();
        let out = inbatch_loss(&state.encoder, &refs)?;
        acc.add_scaled(1.0 / u as f64, &out.grads);
        loss += out.loss / u as f64;
    }
    state.apply(&config.adam(), acc)?;
    Ok(LogRecord {
        step: state.step,
        loss,
        cluster_epoch: state.cluster_epoch,
    })
}

/// Runs the full schedule. `on_checkpoint` sees the initial state, the state at
/// every reclustering boundary, and the final state; `on_log` sees every update.
pub fn progressive_train(
    config: &PretrainConfig,
    data: &TrainingSet,
    encoder: DualEncoder,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
    mut on_log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if config.clustering_enabled && config.num_clusters > data.chunk_ids.len() {
        return Err(Error::invalid(format!(
            "num_clusters {} exceeds {} paired chunks",
            config.num_clusters,
            data.chunk_ids.len()
        )));
    }
    let mut state = TrainState::new(config, encoder);
    on_checkpoint(&state)?;
    while state.step < config.total_updates {
        if state.step.is_multiple_of(config.recluster_every) {
            recluster(&mut state, config, data)?;
        }
        let record = train_update(&mut state, config, data)?;
        on_log(&record)?;
        if state.step.is_multiple_of(config.recluster_every) || state.step == config.total_updates {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PairSource;
    use crate::linalg::Matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            n_buckets: 64,
            hidden_dim: 8,
            index_dim: 4,
            ..Default::default()
        }
    }

    fn pair(chunk_id: u64, question: &str) -> QPPair {
        QPPair {
            question: question.into(),
            chunk_id,
            answer: String::new(),
            source: PairSource::Template,
            positive: None,
        }
    }

    fn toy_data(n: usize, config: &EncoderConfig) -> (Vec<Chunk>, TrainingSet) {
        let chunks: Vec<Chunk> = (0..n as u64)
            .map(|i| Chunk::from_text(i, format!("d{i}"), format!("paragraph number{i} about topic{}", i % 3)))
            .collect();
        let pairs: Vec<QPPair> = (0..n as u64)
            .flat_map(|i| [pair(i, &format!("what is number{i}")), pair(i, &format!("tell me topic{}", i % 3))])
            .collect();
        let data = TrainingSet::build(&pairs, &chunks, config).unwrap();
        (chunks, data)
    }

    fn brute_loss(enc: &DualEncoder, batch: &[&PreparedPair]) -> f64 {
        let q: Vec<Vec<f64>> = batch.iter().map(|p| enc.question.encode(&p.question).output.0).collect();
        let p: Vec<Vec<f64>> = batch.iter().map(|p| enc.paragraph.encode(&p.positive).output.0).collect();
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut scores = Vec::new();
            for pj in &p {
                let mut s = 0.0;
                for d in 0..pj.len() {
                    s += q[i][d] * pj[d];
                }
                scores.push(s);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            total -= (scores[i] - m).exp().ln() - z.ln();
        }
        total / batch.len() as f64
    }

    #[test]
    fn zero_projection_gives_log_batch_size() {
        let cfg = tiny_config();
        let (_, data) = toy_data(16, &cfg);
        let mut enc = DualEncoder::new(cfg).unwrap();
        enc.zero_projections();
        for b in [2usize, 4, 16] {
            let ids: Vec<usize> = (0..b).map(|i| data.pairs_of(i as u64)[0]).collect();
            let refs: Vec<_> = ids.iter().map(|&i| &data.pairs[i]).collect();
            let out = inbatch_loss(&enc, &refs).unwrap();
            assert!((out.loss - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_item_batch_has_zero_loss_and_gradient() {
        let cfg = tiny_config();
        let (_, data) = toy_data(2, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let out = inbatch_loss(&enc, &[&data.pairs[0]]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn duplicate_chunks_are_dropped() {
        let cfg = tiny_config();
        let (_, data) = toy_data(3, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let a = &data.pairs[0];
        let b = &data.pairs[1]; // same chunk as `a`
        let c = &data.pairs[2];
        assert_eq!(a.chunk_id, b.chunk_id);
        let with_dup = inbatch_loss(&enc, &[a, b, c]).unwrap();
        let without = inbatch_loss(&enc, &[a, c]).unwrap();
        assert_eq!(with_dup.size, 2);
        assert_eq!(with_dup.loss, without.loss);
        assert_eq!(with_dup.grads, without.grads);
    }

    #[test]
    fn loss_matches_brute_force_and_finite_differences() {
        let cfg = tiny_config();
        let (_, data) = toy_data(6, &cfg);
        for seed in 0..5 {
            let enc = DualEncoder::new(EncoderConfig { seed, ..cfg.clone() }).unwrap();
            let refs: Vec<_> = [0usize, 3, 5, 8].iter().map(|&i| &data.pairs[i]).collect();
            let out = inbatch_loss(&enc, &refs).unwrap();
            assert!((out.loss - brute_loss(&enc, &refs)).abs() < 1e-12);

            let h = 1e-4;
            let check = |analytic: f64, perturb: &dyn Fn(&mut DualEncoder, f64)| {
                let mut plus = enc.clone();
                perturb(&mut plus, h);
                let mut minus = enc.clone();
                perturb(&mut minus, -h);
                let numeric = (brute_loss(&plus, &refs) - brute_loss(&minus, &refs)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
            };
            for r in 0..cfg.n_buckets {
                for c in 0..cfg.hidden_dim {
                    check(out.grads.question.embedding_at(r as u32, c), &|e, d| {
                        let v = e.question.embedding.get(r, c);
                        e.question.embedding.set(r, c, v + d);
                    });
                    check(out.grads.paragraph.embedding_at(r as u32, c), &|e, d| {
                        let v = e.paragraph.embedding.get(r, c);
                        e.paragraph.embedding.set(r, c, v + d);
                    });
                }
            }
            for r in 0..cfg.hidden_dim {
                for c in 0..cfg.index_dim {
                    check(out.grads.question.projection.get(r, c), &|e, d| {
                        let v = e.question.projection.get(r, c);
                        e.question.projection.set(r, c, v + d);
                    });
                    check(out.grads.paragraph.projection.get(r, c), &|e, d| {
                        let v = e.paragraph.projection.get(r, c);
                        e.paragraph.projection.set(r, c, v + d);
                    });
                }
            }
        }
    }

    fn disjoint_groups_data() -> (EncoderConfig, TrainingSet) {
        let cfg = EncoderConfig {
            n_buckets: 4096,
            hidden_dim: 16,
            index_dim: 8,
            ..Default::default()
        };
        let chunks: Vec<Chunk> = (0..8u64)
            .map(|i| {
                let text = if i < 4 { "aaaaa bbbbb ccccc" } else { "xxxxx yyyyy zzzzz" };
                Chunk::from_text(i, "d", format!("{text} {text}"))
            })
            .collect();
        let pairs: Vec<QPPair> = (0..8).map(|i| pair(i, "q")).collect();
        let data = TrainingSet::build(&pairs, &chunks, &cfg).unwrap();
        (cfg, data)
    }

    #[test]
    fn cluster_map_edge_cases() {
        let (cfg, data) = disjoint_groups_data();
        let enc = DualEncoder::new(cfg).unwrap();
        let one = build_cluster_map(&data, &enc, 1, KMeansParams::new(1, 0), 0).unwrap();
        assert_eq!(one.members, vec![data.chunk_ids.clone()]);
        assert_eq!(one.members, ClusterMap::uniform(&data.chunk_ids, 0).members);

        // Identical texts inside each group encode identically, so two clusters recover the groups.
        let two = build_cluster_map(&data, &enc, 2, KMeansParams::new(2, 0), 0).unwrap();
        let mut groups = two.members.clone();
        groups.sort();
        assert_eq!(groups, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);

        assert!(build_cluster_map(&data, &enc, 9, KMeansParams::new(9, 0), 0).is_err());
    }

    #[test]
    fn singleton_clusters_when_c_equals_chunks() {
        let cfg = tiny_config();
        let (_, data) = toy_data(5, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        // Distinct texts; k-means with k = n gives each point its own cluster.
        let map = build_cluster_map(&data, &enc, 5, KMeansParams::new(5, 1), 0).unwrap();
        assert!(map.members.iter().all(|m| m.len() == 1));
        assert_eq!(map.assignment.len(), 5);
    }

    #[test]
    fn sampler_forced_cases() {
        let cfg = tiny_config();
        let (_, data) = toy_data(8, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let map = ClusterMap::from_groups(vec![vec![0, 1, 2, 3]], 0).unwrap();
        let batch = sample_batch(&map, &data, &mut rng, 4);
        let mut chunks: Vec<u64> = batch.pairs.iter().map(|&i| data.pairs[i].chunk_id).collect();
        chunks.sort();
        assert_eq!(chunks, vec![0, 1, 2, 3]);

        // Cluster 0 has B − 1 members; exactly one comes from the neighbor.
        let map = ClusterMap::from_groups(vec![vec![0, 1, 2], vec![4, 5, 6, 7]], 0).unwrap();
        for _ in 0..50 {
            let batch = sample_batch(&map, &data, &mut rng, 4);
            let chunks: Vec<u64> = batch.pairs.iter().map(|&i| data.pairs[i].chunk_id).collect();
            let distinct: HashSet<_> = chunks.iter().collect();
            assert_eq!(distinct.len(), 4);
            if batch.cluster == 0 {
                assert_eq!(chunks.iter().filter(|&&c| c >= 4).count(), 1);
            } else {
                assert!(chunks.iter().all(|&c| c >= 4));
            }
        }
    }

    #[test]
    fn cluster_frequency_follows_size() {
        let cfg = tiny_config();
        let chunks: Vec<Chunk> = (0..400u64).map(|i| Chunk::from_text(i, "d", "t")).collect();
        let pairs: Vec<QPPair> = (0..400).map(|i| pair(i, "q")).collect();
        let data = TrainingSet::build(&pairs, &chunks, &cfg).unwrap();
        let map = ClusterMap::from_groups(vec![(0..100).collect(), (100..400).collect()], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let first = (0..draws)
            .filter(|_| sample_batch(&map, &data, &mut rng, 2).cluster == 0)
            .count();
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.25).abs() < 0.02, "{freq}");
    }

    fn desk(total: u64) -> PretrainConfig {
        PretrainConfig {
            batch_size: 4,
            accumulation_steps: 2,
            total_updates: total,
            recluster_every: 5,
            num_clusters: 1,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_updates_emit_only_initial_checkpoint() {
        let cfg = tiny_config();
        let (_, data) = toy_data(8, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let mut steps = Vec::new();
        let state = progressive_train(&desk(0), &data, enc.clone(), |s| {
            steps.push(s.step);
            Ok(())
        }, |_| Ok(()))
        .unwrap();
        assert_eq!(steps, vec![0]);
        assert_eq!(state.encoder, enc);
    }

    #[test]
    fn checkpoints_at_boundaries_and_end() {
        let cfg = tiny_config();
        let (_, data) = toy_data(8, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let mut steps = Vec::new();
        let mut logs = Vec::new();
        progressive_train(&desk(12), &data, enc, |s| {
            steps.push(s.step);
            Ok(())
        }, |r| {
            logs.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, vec![0, 5, 10, 12]);
        assert_eq!(logs.len(), 12);
        assert_eq!(logs.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
        assert_eq!(logs.iter().map(|r| r.cluster_epoch).collect::<Vec<_>>(), [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn one_update_per_window() {
        let cfg = tiny_config();
        let (_, data) = toy_data(8, &cfg);
        let config = PretrainConfig {
            accumulation_steps: 3,
            ..desk(1)
        };
        let mut state = TrainState::new(&config, DualEncoder::new(cfg).unwrap());
        recluster(&mut state, &config, &data).unwrap();
        let before = state.encoder.clone();
        train_update(&mut state, &config, &data).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.adam.step, 1);
        assert_ne!(state.encoder, before);
    }

    #[test]
    fn single_cluster_matches_uniform_mode() {
        let cfg = tiny_config();
        let (_, data) = toy_data(8, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let run = |clustering_enabled| {
            let config = PretrainConfig {
                clustering_enabled,
                ..desk(11)
            };
            let mut logs = Vec::new();
            let state = progressive_train(&config, &data, enc.clone(), |_| Ok(()), |r| {
                logs.push(*r);
                Ok(())
            })
            .unwrap();
            (state.encoder, logs)
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn shared_weights_stay_tied() {
        let cfg = EncoderConfig {
            share_weights: true,
            ..tiny_config()
        };
        let (_, data) = toy_data(8, &cfg);
        let enc = DualEncoder::new(cfg).unwrap();
        let state = progressive_train(&desk(4), &data, enc, |_| Ok(()), |_| Ok(())).unwrap();
        assert_eq!(state.encoder.question.embedding, state.encoder.paragraph.embedding);
        assert_eq!(state.encoder.question.projection, state.encoder.paragraph.projection);
    }

    #[test]
    fn training_lowers_loss_and_replays_exactly() {
        let cfg = EncoderConfig {
            n_buckets: 1024,
            hidden_dim: 16,
            index_dim: 8,
            ..Default::default()
        };
        let (_, data) = toy_data(40, &cfg);
        let config = PretrainConfig {
            batch_size: 8,
            accumulation_steps: 1,
            total_updates: 200,
            recluster_every: 50,
            num_clusters: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let run = || {
            let mut logs = Vec::new();
            let state = progressive_train(&config, &data, DualEncoder::new(cfg.clone()).unwrap(), |_| Ok(()), |r| {
                logs.push(r.loss);
                Ok(())
            })
            .unwrap();
            (state, logs)
        };
        let (a, logs) = run();
        let tail: f64 = logs[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < 8f64.ln(), "{tail}");
        let (b, _) = run();
        let cfg_ = &a.encoder.config;
        assert_eq!(a.encoder.question.to_bytes(cfg_), b.encoder.question.to_bytes(cfg_));
        assert_eq!(a.encoder.paragraph.to_bytes(cfg_), b.encoder.paragraph.to_bytes(cfg_));
        assert_eq!(a.adam.to_bytes(), b.adam.to_bytes());
    }

    #[test]
    fn rejects_unknown_chunk() {
        let cfg = tiny_config();
        let chunks = vec![Chunk::from_text(0, "d", "x")];
        assert!(TrainingSet::build(&[pair(5, "q")], &chunks, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn zero_scores_give_log_b_for_any_batch(seed in 0u64..1000, b in 1usize..8) {
            let cfg = tiny_config();
            let (_, data) = toy_data(8, &cfg);
            let mut enc = DualEncoder::new(EncoderConfig { seed, ..cfg }).unwrap();
            enc.question.projection = Matrix::zeros(8, 4);
            let refs: Vec<_> = (0..b).map(|i| &data.pairs[2 * i + (seed as usize % 2)]).collect();
            let out = inbatch_loss(&enc, &refs).unwrap();
            prop_assert!((out.loss - (b as f64).ln()).abs() < 1e-12);
        }

        #[test]
        fn sampled_batches_are_distinct_chunks(seed in 0u64..1000, b in 1usize..9) {
            let cfg = tiny_config();
            let (_, data) = toy_data(8, &cfg);
            let map = ClusterMap::from_groups(vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]], 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&map, &data, &mut rng, b);
            let chunks: HashSet<u64> = batch.pairs.iter().map(|&i| data.pairs[i].chunk_id).collect();
            prop_assert_eq!(chunks.len(), b);
            prop_assert_eq!(batch.pairs.len(), b);
        }
    }
}
