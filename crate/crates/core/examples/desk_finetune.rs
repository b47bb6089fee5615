//! Pretrains with clustering, then compares finetuning objectives by test EM.
//!
//! `cargo run --release -p qaret-core --example desk_finetune`

use std::time::Instant;

use qaret_core::corpus::{chunk_corpus, DEFAULT_CHUNK_LEN};
use qaret_core::datagen::template_pairs;
use qaret_core::encoder::{encode_corpus, DualEncoder, EncoderConfig};
use qaret_core::evalqa::exact_match;
use qaret_core::finetune::{
    build_answer_cache, finetune, predict_all, sweep_retrieval_weight, FinetuneConfig, QaContext, ReaderParams,
    RETRIEVAL_WEIGHT_GRID,
};
use qaret_core::pretrain::{progressive_train, PretrainConfig, TrainingSet};
use qaret_core::synth::{generate, SynthConfig};
use qaret_core::vecindex::{ivf_build, IvfRetriever, DEFAULT_NCELLS, DEFAULT_NPROBE};

fn main() -> qaret_core::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let chunks = chunk_corpus(&data.docs, DEFAULT_CHUNK_LEN)?;
    let pairs: Vec<_> = chunks.iter().flat_map(|c| template_pairs(c, None)).collect();
    let enc_cfg = EncoderConfig { seed: 3, ..EncoderConfig::default() };
    let t = Instant::now();
    let set = TrainingSet::build(&pairs, &chunks, &enc_cfg)?;
    let state = progressive_train(&PretrainConfig::desk(), &set, DualEncoder::new(enc_cfg.clone())?, |_| Ok(()), |_| Ok(()))?;
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let store = encode_corpus(&state.encoder.paragraph, &enc_cfg, &chunks)?;
    let index = ivf_build(&store, DEFAULT_NCELLS, 3)?;
    let retriever = IvfRetriever { index: &index, store: &store, nprobe: DEFAULT_NPROBE };
    let ctx = QaContext::new(&chunks, &store, &retriever, &enc_cfg, 10)?;
    let cache = build_answer_cache(&data.train, &state.encoder.question, &enc_cfg, &ctx, 10_000, "desk")?;
    let golds: Vec<Vec<String>> = data.test.iter().map(|q| q.answers.clone()).collect();
    for (shared_norm, joint) in [(true, false), (false, false), (true, true), (false, true)] {
        let t = Instant::now();
        let ft = FinetuneConfig { shared_norm, joint, ..FinetuneConfig::desk() };
        let reader = ReaderParams::new(&state.encoder.paragraph, &enc_cfg, ft.train_token_embedding, ft.seed);
        let out = finetune(&ft, &enc_cfg, &ctx, state.encoder.question.clone(), reader, &data.train, Some(&cache))?;
        let (w, _) = sweep_retrieval_weight(&out.question, &enc_cfg, &out.reader, &ctx, &data.dev, 5, &RETRIEVAL_WEIGHT_GRID)?;
        let preds = predict_all(&out.question, &enc_cfg, &out.reader, &ctx, &data.test, 5, w)?;
        let em = exact_match(&preds.iter().map(|p| p.prediction.clone()).collect::<Vec<_>>(), &golds)?;
        println!(
            "shared {shared_norm:<5} joint {joint:<5} EM {:5.1}  w {w:.1}  updates {} skipped {}  {:.1}s",
            100.0 * em,
            out.updates,
            out.skipped,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
