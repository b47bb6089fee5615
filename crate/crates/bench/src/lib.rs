//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qaret_core::corpus::Chunk;
use qaret_core::encoder::{featurize_tokens, EncoderConfig, Features};
use qaret_core::pretrain::PreparedPair;
use qaret_core::vecindex::VectorStore;

pub fn random_store(n: usize, dim: usize, seed: u64) -> VectorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    VectorStore::from_rows(dim, (0..n as u64).collect(), data).expect("shape is consistent")
}

const WORDS: [&str; 16] = [
    "river", "castle", "founded", "museum", "harbor", "king", "treaty", "valley", "bridge", "north", "empire",
    "village", "bishop", "coast", "market", "station",
];

/// A chunk of `len` words drawn from a small vocabulary.
pub fn random_chunk(id: u64, len: usize, rng: &mut ChaCha8Rng) -> Chunk {
    let text: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    Chunk::from_text(id, format!("d{id}"), text.join(" "))
}

pub fn random_chunks(n: usize, len: usize, seed: u64) -> Vec<Chunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64).map(|i| random_chunk(i, len, &mut rng)).collect()
}

/// `n` pairs whose question is a short prefix of a random chunk.
pub fn random_pairs(n: usize, config: &EncoderConfig, seed: u64) -> Vec<PreparedPair> {
    random_chunks(n, 120, seed)
        .iter()
        .map(|c| PreparedPair {
            chunk_id: c.id,
            question: featurize_tokens(&c.tokens[..8], config),
            positive: featurize_tokens(&c.tokens, config),
        })
        .collect()
}

pub fn features(chunks: &[Chunk], config: &EncoderConfig) -> Vec<Features> {
    chunks.iter().map(|c| featurize_tokens(&c.tokens, config)).collect()
}
