//! Pretrains three strategies on the synthetic corpus and prints Recall@k.
//!
//! `cargo run --release -p qaret-core --example desk_ablation [updates]`

use std::time::Instant;

use qaret_core::corpus::{chunk_corpus, DEFAULT_CHUNK_LEN};
use qaret_core::datagen::{make_ict_pair, template_pairs, DEFAULT_ICT_DROP_PROB};
use qaret_core::encoder::{encode_corpus, DualEncoder, EncoderConfig};
use qaret_core::evalqa::recall_at_k;
use qaret_core::pretrain::{progressive_train, PretrainConfig, TrainingSet};
use qaret_core::seed::stage_rng;
use qaret_core::synth::{generate, SynthConfig};
use qaret_core::vecindex::FlatIndex;

fn main() -> qaret_core::Result<()> {
    let updates: u64 = std::env::args().nth(1).map_or(2000, |s| s.parse().unwrap());
    let data = generate(&SynthConfig::default())?;
    let chunks = chunk_corpus(&data.docs, DEFAULT_CHUNK_LEN)?;
    let templates: Vec<_> = chunks.iter().flat_map(|c| template_pairs(c, None)).collect();
    let mut rng = stage_rng(3, "ict", 0);
    let ict: Vec<_> = chunks
        .iter()
        .flat_map(|c| (0..3).filter_map(|_| make_ict_pair(c, &mut rng, DEFAULT_ICT_DROP_PROB)).collect::<Vec<_>>())
        .collect();
    println!("chunks {} template pairs {} ict pairs {}", chunks.len(), templates.len(), ict.len());

    let enc_cfg = EncoderConfig { seed: 3, ..EncoderConfig::default() };
    let base = PretrainConfig { total_updates: updates, ..PretrainConfig::desk() };
    for (name, pairs, clustering) in [
        ("progressive", &templates, true),
        ("no-clustering", &templates, false),
        ("ict", &ict, false),
    ] {
        let t = Instant::now();
        let set = TrainingSet::build(pairs, &chunks, &enc_cfg)?;
        let cfg = PretrainConfig { clustering_enabled: clustering, ..base.clone() };
        let mut last = 0.0;
        let state = progressive_train(&cfg, &set, DualEncoder::new(enc_cfg.clone())?, |_| Ok(()), |r| {
            last = r.loss;
            Ok(())
        })?;
        let store = encode_corpus(&state.encoder.paragraph, &enc_cfg, &chunks)?;
        let flat = FlatIndex { store: &store };
        let (r, _) = recall_at_k(&data.test, &state.encoder.question, &enc_cfg, &flat, &chunks, &[5, 10, 20], 10)?;
        println!(
            "{name:<14} R@5 {:5.1} R@10 {:5.1} R@20 {:5.1}  last loss {last:.3}  {:.1}s",
            100.0 * r[&5],
            100.0 * r[&10],
            100.0 * r[&20],
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
