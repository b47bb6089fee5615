//! Maximum inner product search over dense vectors: an exact flat scan, an
//! IVF-flat index, and the k-means used both for the IVF coarse quantizer and
//! for training-time corpus clustering.
//!
//! Cells are trained and assigned with L2 k-means but probed by inner product
//! between the query and the cell centroids.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::linalg::dot_f32;

const VECTORS_MAGIC: &[u8; 4] = b"PQVE";
const INDEX_MAGIC: &[u8; 4] = b"PQIV";
const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_NCELLS: usize = 100;
pub const DEFAULT_NPROBE: usize = 20;
pub const DEFAULT_KMEANS_ITERS: usize = 25;
pub const DEFAULT_KMEANS_RESTARTS: usize = 16;

/// Row-major `f32` vectors with caller-assigned ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector data"));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn push(&mut self, id: u64, v: &[f32]) -> Result<()> {
        self.check_dim(v)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector data"));
        }
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(VECTORS_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.ids.len() as u64);
        for &id in &self.ids {
            w.u64(id);
        }
        for &v in &self.data {
            w.f32(v);
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, VECTORS_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.format_err(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let ids = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let data = (0..count * dim)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::from_rows(dim, ids, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

/// Ranked ids with inner-product scores, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|h| h.score).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

fn top_k(mut hits: Vec<Hit>, k: usize) -> RetrievalResult {
    if k < hits.len() {
        hits.select_nth_unstable_by(k, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    RetrievalResult { hits }
}

/// Something that answers top-k inner-product queries.
pub trait Retriever: Sync {
    fn dim(&self) -> usize;
    fn search(&self, query: &[f32], topk: usize) -> Result<RetrievalResult>;
}

/// Exhaustive inner-product search.
pub fn flat_search(store: &VectorStore, query: &[f32], topk: usize) -> Result<RetrievalResult> {
    store.check_dim(query)?;
    if topk == 0 {
        return Err(Error::invalid("topk must be >= 1"));
    }
    let hits = (0..store.len())
        .map(|i| Hit {
            id: store.ids[i],
            score: dot_f32(store.row(i), query),
        })
        .collect();
    Ok(top_k(hits, topk))
}

/// Exact search as a [`Retriever`].
pub struct FlatIndex<'a> {
    pub store: &'a VectorStore,
}

impl Retriever for FlatIndex<'_> {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn search(&self, query: &[f32], topk: usize) -> Result<RetrievalResult> {
        flat_search(self.store, query, topk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: DEFAULT_KMEANS_ITERS,
            restarts: DEFAULT_KMEANS_RESTARTS,
            seed,
        }
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Nearest centroid by L2, lowest id on ties.
fn nearest(v: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(v, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations, with default restarts.
pub fn kmeans(store: &VectorStore, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(
        store,
        KMeansParams {
            max_iters,
            ..KMeansParams::new(k, seed)
        },
    )
}

pub fn kmeans_with(store: &VectorStore, params: KMeansParams) -> Result<KMeansResult> {
    let n = store.len();
    if params.k == 0 || params.k > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= count (k = {}, count = {n})",
            params.k
        )));
    }
    if params.max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..params.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(store, params.k, params.max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn plus_plus_init(store: &VectorStore, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = store.len();
    let as_f64 = |i: usize| store.row(i).iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(store.row(i), &as_f64(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.unwrap()
        } else {
            // Every remaining point coincides with a center; take an unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        let c = as_f64(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(store.row(i), &c));
        }
    }
    chosen.into_iter().map(as_f64).collect()
}

fn lloyd(store: &VectorStore, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = store.len();
    let dim = store.dim();
    let mut centroids = plus_plus_init(store, k, rng);
    let assign = |centroids: &[Vec<f64>]| -> Vec<(usize, f64)> {
        (0..n)
            .into_par_iter()
            .map(|i| nearest(store.row(i), centroids))
            .collect()
    };

    let mut current = assign(&centroids);
    let mut history = vec![current.iter().map(|a| a.1).sum::<f64>()];
    for _ in 0..max_iters {
        // Update step, summed in index order.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in current.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(store.row(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its own (updated) centroid.
        let mut taken = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .map(|i| (i, sq_dist(store.row(i), &centroids[current[i].0])))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, _)) = far {
                centroids[c] = store.row(i).iter().map(|&x| x as f64).collect();
                taken.push(i);
            }
        }

        let next = assign(&centroids);
        let inertia: f64 = next.iter().map(|a| a.1).sum();
        let prev = *history.last().unwrap();
        assert!(
            inertia <= prev * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased: {prev} -> {inertia}"
        );
        history.push(inertia);
        let fixpoint = next.iter().zip(&current).all(|(a, b)| a.0 == b.0);
        current = next;
        if fixpoint && taken.is_empty() {
            break;
        }
    }

    KMeansResult {
        k,
        dim,
        centroids: centroids.iter().flatten().map(|&x| x as f32).collect(),
        assignments: current.iter().map(|a| a.0).collect(),
        inertia: *history.last().unwrap(),
        history,
    }
}

/// IVF-flat index. Cell lists hold row positions into the [`VectorStore`]
/// the index was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    ncells: usize,
    pub nprobe_default: usize,
    centroids: Vec<f32>,
    /// `offsets[c]..offsets[c + 1]` indexes `rows` for cell `c`.
    offsets: Vec<usize>,
    rows: Vec<usize>,
}

impl IvfIndex {
    pub fn ncells(&self) -> usize {
        self.ncells
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        &self.rows[self.offsets[c]..self.offsets[c + 1]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(INDEX_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.ncells as u32);
        w.u32(self.dim as u32);
        w.u32(self.nprobe_default as u32);
        for &v in &self.centroids {
            w.f32(v);
        }
        for &o in &self.offsets {
            w.u64(o as u64);
        }
        for &r in &self.rows {
            w.u64(r as u64);
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::open(path, &bytes, INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.format_err(format!("unsupported version {version}")));
        }
        let ncells = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let nprobe_default = r.u32()? as usize;
        if ncells == 0 || dim == 0 {
            return Err(r.format_err("ncells and dim must be >= 1"));
        }
        let centroids = (0..ncells * dim)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        let offsets = (0..=ncells)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(r.format_err("cell offsets not monotone"));
        }
        let rows = (0..offsets[ncells])
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(Self {
            dim,
            ncells,
            nprobe_default: nprobe_default.clamp(1, ncells),
            centroids,
            offsets,
            rows,
        })
    }
}

/// Trains `ncells` L2 centroids and posts every row to its nearest one.
pub fn ivf_build(store: &VectorStore, ncells: usize, seed: u64) -> Result<IvfIndex> {
    let km = kmeans(store, ncells, DEFAULT_KMEANS_ITERS, seed)?;
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); ncells];
    for (row, &c) in km.assignments.iter().enumerate() {
        lists[c].push(row);
    }
    let mut offsets = Vec::with_capacity(ncells + 1);
    offsets.push(0);
    let mut rows = Vec::with_capacity(store.len());
    for l in &lists {
        rows.extend_from_slice(l);
        offsets.push(rows.len());
    }
    Ok(IvfIndex {
        dim: store.dim(),
        ncells,
        nprobe_default: DEFAULT_NPROBE.min(ncells),
        centroids: km.centroids,
        offsets,
        rows,
    })
}

/// Probes the `nprobe` cells whose centroids have the largest inner product
/// with the query, then scans them exhaustively.
pub fn ivf_search(
    index: &IvfIndex,
    store: &VectorStore,
    query: &[f32],
    topk: usize,
    nprobe: usize,
) -> Result<RetrievalResult> {
    store.check_dim(query)?;
    if index.dim != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            actual: store.dim(),
        });
    }
    if nprobe == 0 || nprobe > index.ncells {
        return Err(Error::invalid(format!(
            "nprobe must be in 1..={} (got {nprobe})",
            index.ncells
        )));
    }
    if topk == 0 {
        return Err(Error::invalid("topk must be >= 1"));
    }
    let cells = (0..index.ncells)
        .map(|c| Hit {
            id: c as u64,
            score: dot_f32(index.centroid(c), query),
        })
        .collect();
    let probed = top_k(cells, nprobe);
    let mut hits = Vec::new();
    for cell in &probed.hits {
        for &row in index.cell(cell.id as usize) {
            let v = store.row(row);
            hits.push(Hit {
                id: store.ids[row],
                score: dot_f32(v, query),
            });
        }
    }
    Ok(top_k(hits, topk))
}

/// IVF search bound to its store and probe count.
pub struct IvfRetriever<'a> {
    pub index: &'a IvfIndex,
    pub store: &'a VectorStore,
    pub nprobe: usize,
}

impl Retriever for IvfRetriever<'_> {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn search(&self, query: &[f32], topk: usize) -> Result<RetrievalResult> {
        ivf_search(self.index, self.store, query, topk, self.nprobe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn store_1d(xs: &[f32]) -> VectorStore {
        VectorStore::from_rows(1, (0..xs.len() as u64).collect(), xs.to_vec()).unwrap()
    }

    fn random_store(n: usize, dim: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        VectorStore::from_rows(dim, (0..n as u64).collect(), data).unwrap()
    }

    /// Best inertia over all 2-partitions, by enumeration.
    fn best_two_partition(xs: &[f64]) -> f64 {
        let n = xs.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<f64> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| xs[i])
                    .collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn kmeans_1d_example() {
        let s = store_1d(&[0.0, 1.0, 10.0, 11.0]);
        let km = kmeans(&s, 2, 25, 1).unwrap();
        let mut cents = km.centroids.clone();
        cents.sort_by(f32::total_cmp);
        assert_eq!(cents, [0.5, 10.5]);
        assert!((km.inertia - 1.0).abs() < 1e-12);
        assert!((best_two_partition(&[0.0, 1.0, 10.0, 11.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_count_and_one() {
        let s = store_1d(&[3.0, -1.0, 7.5, 2.0]);
        let km = kmeans(&s, 4, 25, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort();
        assert_eq!(a, [0, 1, 2, 3]);

        let km = kmeans(&s, 1, 25, 0).unwrap();
        assert!((km.centroids[0] - 2.875).abs() < 1e-6);
        assert!(kmeans(&s, 5, 25, 0).is_err());
        assert!(kmeans(&s, 0, 25, 0).is_err());
    }

    #[test]
    fn kmeans_duplicate_points() {
        let s = store_1d(&[1.0, 1.0, 1.0, 1.0]);
        let km = kmeans(&s, 3, 10, 2).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert!(km.centroids.iter().all(|c| !c.is_nan()));
    }

    #[test]
    fn flat_search_examples() {
        let s = VectorStore::from_rows(2, vec![0, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7]).unwrap();
        let r = flat_search(&s, &[1.0, 0.0], 2).unwrap();
        assert_eq!(r.ids(), [0, 2]);
        assert_eq!(r.scores()[0], 1.0);
        assert!((r.scores()[1] - 0.7).abs() < 1e-6);

        let r = flat_search(&s, &[0.0, 0.0], 3).unwrap();
        assert_eq!(r.ids(), [0, 1, 2]);
        assert!(r.scores().iter().all(|&x| x == 0.0));

        let r = flat_search(&s, &[0.2, 1.0], 10).unwrap();
        assert_eq!(r.len(), 3);
        assert!(flat_search(&s, &[1.0], 1).is_err());
    }

    #[test]
    fn ivf_examples() {
        let s = store_1d(&[0.0, 1.0, 10.0, 11.0]);
        let one = ivf_build(&s, 1, 0).unwrap();
        assert_eq!(one.cell(0), [0, 1, 2, 3]);

        let two = ivf_build(&s, 2, 0).unwrap();
        let mut cells: Vec<Vec<usize>> = (0..2).map(|c| two.cell(c).to_vec()).collect();
        cells.sort();
        assert_eq!(cells, [vec![0, 1], vec![2, 3]]);

        // Query 10.5: centroid IPs are 0.5·10.5 and 10.5·10.5, so nprobe 1
        // scans only the {10, 11} cell.
        let r = ivf_search(&two, &s, &[10.5], 4, 1).unwrap();
        assert_eq!(r.ids(), [3, 2]);

        let all = ivf_build(&s, 4, 0).unwrap();
        assert!((0..4).all(|c| all.cell(c).len() == 1));
        assert!(ivf_search(&all, &s, &[1.0], 1, 5).is_err());
    }

    #[test]
    fn files_round_trip() {
        let s = random_store(50, 8, 4);
        let idx = ivf_build(&s, 5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("v.bin");
        let ip = dir.path().join("i.bin");
        s.save(&vp).unwrap();
        idx.save(&ip).unwrap();
        assert_eq!(VectorStore::load(&vp).unwrap(), s);
        assert_eq!(IvfIndex::load(&ip).unwrap(), idx);

        let mut bytes = std::fs::read(&ip).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 0x80;
        std::fs::write(&ip, bytes).unwrap();
        assert!(IvfIndex::load(&ip).is_err());
        assert!(IvfIndex::load(&vp).is_err());
    }

    #[test]
    fn kmeans_matches_partition_oracle() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let xs: Vec<f32> = (0..8).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            let km = kmeans(&store_1d(&xs), 2, 50, seed).unwrap();
            let oracle = best_two_partition(&xs.iter().map(|&x| x as f64).collect::<Vec<_>>());
            assert!((km.inertia - oracle).abs() < 1e-6 * (1.0 + oracle), "seed {seed}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ivf_full_probe_is_flat(seed in any::<u64>(), n in 5usize..80, ncells in 1usize..5) {
            let s = random_store(n, 6, seed);
            let idx = ivf_build(&s, ncells.min(n), seed).unwrap();
            let q: Vec<f32> = s.row(0).iter().map(|x| x * 0.5 + 0.1).collect();
            let flat = flat_search(&s, &q, 10).unwrap();
            let ivf = ivf_search(&idx, &s, &q, 10, idx.ncells()).unwrap();
            prop_assert_eq!(flat, ivf);
        }

        #[test]
        fn cells_partition_rows(seed in any::<u64>(), n in 2usize..60, ncells in 1usize..8) {
            let s = random_store(n, 3, seed);
            let idx = ivf_build(&s, ncells.min(n), seed).unwrap();
            let mut all: Vec<usize> = (0..idx.ncells()).flat_map(|c| idx.cell(c).to_vec()).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn flat_scores_descending(seed in any::<u64>(), k in 1usize..20) {
            let s = random_store(30, 4, seed);
            let r = flat_search(&s, s.row(3), k).unwrap();
            prop_assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn kmeans_assignments_are_nearest(seed in any::<u64>(), k in 1usize..6) {
            let s = random_store(40, 3, seed);
            let km = kmeans(&s, k, 25, seed).unwrap();
            let cents: Vec<Vec<f64>> = (0..k).map(|c| km.centroid(c).iter().map(|&x| x as f64).collect()).collect();
            for i in 0..s.len() {
                // Stored centroids are f32-rounded; allow tiny slack.
                let d_assigned = sq_dist(s.row(i), &cents[km.assignments[i]]);
                let (_, d_best) = nearest(s.row(i), &cents);
                prop_assert!(d_assigned <= d_best + 1e-5);
            }
            prop_assert!(km.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        }
    }
}
