//! One function per subcommand. Inputs are checked before any work starts;
//! every artifact gets a `<file>.meta.json` sidecar carrying the config
//! fingerprint and the file's SHA-256.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use qaret_core::corpus::{chunk_corpus, read_chunk_store, read_corpus, write_chunk_store, write_corpus, Chunk};
use qaret_core::datagen::{ingest_pairs, make_ict_pair, template_pairs, write_pairs, QPPair};
use qaret_core::encoder::{encode_corpus, DualEncoder, EncoderConfig, EncoderParams};
use qaret_core::evalqa::{exact_match, is_exact_match, recall_at_k, AblationTable, EvalReport};
use qaret_core::finetune::{
    answer_inference, build_answer_cache, finetune, predict_all, read_qa, sweep_retrieval_weight, write_qa,
    AnswerSetCache, QaContext, QaExample, ReaderParams, RETRIEVAL_WEIGHT_GRID,
};
use qaret_core::pretrain::{progressive_train, PretrainConfig, TrainingSet};
use qaret_core::seed::{derive_seed, stage_rng};
use qaret_core::synth::generate;
use qaret_core::vecindex::{ivf_build, FlatIndex, IvfIndex, IvfRetriever, Retriever, VectorStore};

use crate::config::{hex, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "synth" => synth(cfg),
        "chunk" => chunk(cfg),
        "gen-data" => gen_data(cfg),
        "pretrain" => pretrain(cfg),
        "encode-corpus" => encode(cfg),
        "build-index" => build_index(cfg),
        "finetune" => run_finetune(cfg),
        "eval-retrieval" => eval_retrieval(cfg),
        "eval-qa" => eval_qa(cfg),
        "query" => query(cfg),
        "ablation" => ablation(cfg),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(CliError::Usage(format!("missing input {}", p.display()))),
        None => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

fn write_meta(path: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    let meta = json!({
        "fingerprint": cfg.fingerprint(),
        "stage": stage,
        "sha256": sha256_file(path)?,
    });
    let out = meta_path(path);
    std::fs::write(&out, format!("{meta}\n")).map_err(|e| io_err(&out, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let data = generate(&cfg.synth())?;
    for p in [&cfg.corpus, &cfg.train_qa, &cfg.dev_qa, &cfg.test_qa] {
        ensure_parent(p)?;
    }
    write_corpus(&cfg.corpus, &data.docs)?;
    write_meta(&cfg.corpus, "synth", cfg)?;
    for (path, set) in [(&cfg.train_qa, &data.train), (&cfg.dev_qa, &data.dev), (&cfg.test_qa, &data.test)] {
        write_qa(path, set)?;
        write_meta(path, "synth", cfg)?;
    }
    summary(json!({
        "stage": "synth",
        "documents": data.docs.len(),
        "train": data.train.len(),
        "dev": data.dev.len(),
        "test": data.test.len(),
    }));
    Ok(())
}

fn chunk(cfg: &RunConfig) -> Result<()> {
    require(&[&cfg.corpus])?;
    let docs = read_corpus(&cfg.corpus)?;
    let chunks = chunk_corpus(&docs, cfg.chunk_len)?;
    ensure_parent(&cfg.chunks)?;
    write_chunk_store(&cfg.chunks, &chunks)?;
    write_meta(&cfg.chunks, "chunk", cfg)?;
    summary(json!({ "stage": "chunk", "documents": docs.len(), "chunks": chunks.len() }));
    Ok(())
}

fn make_pairs(cfg: &RunConfig, chunks: &[Chunk], source: &str) -> Vec<QPPair> {
    match source {
        "ict" => {
            let mut rng = stage_rng(cfg.seed, "ict", 0);
            chunks
                .iter()
                .flat_map(|c| {
                    (0..cfg.ict_pairs_per_chunk)
                        .filter_map(|_| make_ict_pair(c, &mut rng, cfg.ict_drop_prob))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        _ => {
            let cap = (cfg.max_pairs_per_chunk > 0).then_some(cfg.max_pairs_per_chunk);
            chunks.iter().flat_map(|c| template_pairs(c, cap)).collect()
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    require(&[&cfg.chunks])?;
    let chunks = read_chunk_store(&cfg.chunks)?;
    let pairs = make_pairs(cfg, &chunks, &cfg.pair_source);
    ensure_parent(&cfg.pairs)?;
    write_pairs(&cfg.pairs, &pairs)?;
    write_meta(&cfg.pairs, "gen-data", cfg)?;
    summary(json!({ "stage": "gen-data", "source": cfg.pair_source, "pairs": pairs.len() }));
    Ok(())
}

fn tower_path(dir: &Path, tower: &str) -> PathBuf {
    dir.join(format!("{tower}.ckpt"))
}

fn save_tower(dir: &Path, tower: &str, params: &EncoderParams, enc: &EncoderConfig, cfg: &RunConfig) -> Result<()> {
    let path = tower_path(dir, tower);
    params.save(&path, enc)?;
    write_meta(&path, "pretrain", cfg)
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let enc_cfg = cfg.encoder();
    let pre = cfg.pretrain();
    let dir = &cfg.pretrain_dir;
    let mut log = Vec::new();
    let state_encoder;
    let mut optimizer = None;
    if pre.total_updates == 0 {
        ensure_dir(dir)?;
        state_encoder = DualEncoder::new(enc_cfg.clone())?;
    } else {
        require(&[&cfg.chunks, &cfg.pairs])?;
        let chunks = read_chunk_store(&cfg.chunks)?;
        let known: HashSet<u64> = chunks.iter().map(|c| c.id).collect();
        let pairs = ingest_pairs(&cfg.pairs, &known)?;
        ensure_dir(dir)?;
        let set = TrainingSet::build(&pairs, &chunks, &enc_cfg)?;
        let state = progressive_train(&pre, &set, DualEncoder::new(enc_cfg.clone())?, |_| Ok(()), |r| {
            log.push(*r);
            Ok(())
        })?;
        optimizer = Some(state.adam);
        state_encoder = state.encoder;
    }
    save_tower(dir, "question", &state_encoder.question, &enc_cfg, cfg)?;
    save_tower(dir, "paragraph", &state_encoder.paragraph, &enc_cfg, cfg)?;
    if cfg.save_optimizer {
        if let Some(adam) = &optimizer {
            let path = dir.join("optimizer.bin");
            adam.save(&path)?;
            write_meta(&path, "pretrain", cfg)?;
        }
    }
    let log_path = dir.join("pretrain_log.jsonl");
    write_lines(&log_path, &log)?;
    write_meta(&log_path, "pretrain", cfg)?;
    summary(json!({
        "stage": "pretrain",
        "updates": log.len(),
        "final_loss": log.last().map(|r| r.loss),
    }));
    Ok(())
}

fn load_tower(path: &Path) -> Result<(EncoderConfig, EncoderParams)> {
    require(&[path])?;
    Ok(EncoderParams::load(path)?)
}

fn encode(cfg: &RunConfig) -> Result<()> {
    let para = tower_path(&cfg.pretrain_dir, "paragraph");
    require(&[&cfg.chunks, &para])?;
    let (enc_cfg, tower) = load_tower(&para)?;
    let chunks = read_chunk_store(&cfg.chunks)?;
    let store = encode_corpus(&tower, &enc_cfg, &chunks)?;
    ensure_parent(&cfg.vectors)?;
    store.save(&cfg.vectors)?;
    write_meta(&cfg.vectors, "encode-corpus", cfg)?;
    summary(json!({ "stage": "encode-corpus", "vectors": store.len(), "dim": store.dim() }));
    Ok(())
}

fn index_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "index", 0)
}

fn build_index(cfg: &RunConfig) -> Result<()> {
    require(&[&cfg.vectors])?;
    let store = VectorStore::load(&cfg.vectors)?;
    let index = ivf_build(&store, cfg.ncells, index_seed(cfg))?;
    ensure_parent(&cfg.index)?;
    index.save(&cfg.index)?;
    write_meta(&cfg.index, "build-index", cfg)?;
    summary(json!({ "stage": "build-index", "vectors": store.len(), "ncells": index.ncells() }));
    Ok(())
}

/// Chunks, vectors and (for IVF search) the index, loaded once per command.
struct Corpus {
    chunks: Vec<Chunk>,
    store: VectorStore,
    index: Option<IvfIndex>,
}

impl Corpus {
    fn load(cfg: &RunConfig) -> Result<Self> {
        require(&[&cfg.chunks, &cfg.vectors])?;
        if cfg.search == "ivf" {
            require(&[&cfg.index])?;
        }
        let chunks = read_chunk_store(&cfg.chunks)?;
        let store = VectorStore::load(&cfg.vectors)?;
        let index = if cfg.search == "ivf" { Some(IvfIndex::load(&cfg.index)?) } else { None };
        Ok(Self { chunks, store, index })
    }

    fn retriever(&self, nprobe: usize) -> Box<dyn Retriever + '_> {
        match &self.index {
            Some(index) => Box::new(IvfRetriever {
                index,
                store: &self.store,
                nprobe: nprobe.min(index.ncells()),
            }),
            None => Box::new(FlatIndex { store: &self.store }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InferenceSettings {
    fingerprint: String,
    retrieval_weight: f64,
    /// (weight, dev exact match) for each grid point, empty when the weight was configured.
    sweep: Vec<(f64, f64)>,
}

/// Cache key over the inputs that decide its contents.
fn cache_key(cfg: &RunConfig, question_ckpt: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in [&cfg.chunks, question_ckpt, &cfg.train_qa] {
        h.update(std::fs::read(p).map_err(|e| io_err(p, e))?);
    }
    h.update(cfg.cache_depth.to_le_bytes());
    h.update(cfg.max_answer_len.to_le_bytes());
    h.update(cfg.search.as_bytes());
    h.update(cfg.nprobe.to_le_bytes());
    Ok(hex(&h.finalize()))
}

fn run_finetune(cfg: &RunConfig) -> Result<()> {
    let q_path = tower_path(&cfg.pretrain_dir, "question");
    let p_path = tower_path(&cfg.pretrain_dir, "paragraph");
    require(&[&q_path, &p_path, &cfg.train_qa, &cfg.dev_qa])?;
    let corpus = Corpus::load(cfg)?;
    let (enc_cfg, question) = load_tower(&q_path)?;
    let (_, paragraph) = load_tower(&p_path)?;
    let train = read_qa(&cfg.train_qa)?;
    let dev = read_qa(&cfg.dev_qa)?;
    let ft = cfg.finetune();

    let retriever = corpus.retriever(cfg.nprobe);
    let ctx = QaContext::new(&corpus.chunks, &corpus.store, retriever.as_ref(), &enc_cfg, cfg.max_answer_len)?;

    let key = cache_key(cfg, &q_path)?;
    let cached = cfg
        .answer_cache
        .exists()
        .then(|| AnswerSetCache::load(&cfg.answer_cache).ok())
        .flatten()
        .filter(|c| c.fingerprint == key && c.entries.len() == train.len());
    let cache = match cached {
        Some(c) => c,
        None => {
            let c = build_answer_cache(&train, &question, &enc_cfg, &ctx, cfg.cache_depth, key)?;
            ensure_parent(&cfg.answer_cache)?;
            c.save(&cfg.answer_cache)?;
            write_meta(&cfg.answer_cache, "finetune", cfg)?;
            c
        }
    };

    let reader = ReaderParams::new(&paragraph, &enc_cfg, ft.train_token_embedding, ft.seed);
    let out = finetune(&ft, &enc_cfg, &ctx, question, reader, &train, Some(&cache))?;

    let (weight, sweep) = match cfg.retrieval_weight {
        Some(w) => (w, Vec::new()),
        None => sweep_retrieval_weight(&out.question, &enc_cfg, &out.reader, &ctx, &dev, cfg.top_k, &RETRIEVAL_WEIGHT_GRID)?,
    };

    let dir = &cfg.finetune_dir;
    ensure_dir(dir)?;
    let q_out = tower_path(dir, "question");
    out.question.save(&q_out, &enc_cfg)?;
    write_meta(&q_out, "finetune", cfg)?;
    let r_out = dir.join("reader.bin");
    out.reader.save(&r_out)?;
    write_meta(&r_out, "finetune", cfg)?;
    let log_path = dir.join("finetune_log.jsonl");
    write_lines(&log_path, &out.log)?;
    write_meta(&log_path, "finetune", cfg)?;
    let inf_path = dir.join("inference.json");
    write_json(
        &inf_path,
        &InferenceSettings {
            fingerprint: cfg.fingerprint(),
            retrieval_weight: weight,
            sweep,
        },
    )?;
    write_meta(&inf_path, "finetune", cfg)?;
    summary(json!({
        "stage": "finetune",
        "updates": out.updates,
        "skipped": out.skipped,
        "retrieval_weight": weight,
    }));
    Ok(())
}

fn eval_retrieval(cfg: &RunConfig) -> Result<()> {
    let dir = if cfg.eval_tower == "finetune" { &cfg.finetune_dir } else { &cfg.pretrain_dir };
    let q_path = tower_path(dir, "question");
    require(&[&q_path, &cfg.test_qa])?;
    let corpus = Corpus::load(cfg)?;
    let (enc_cfg, question) = load_tower(&q_path)?;
    let test = read_qa(&cfg.test_qa)?;
    let retriever = corpus.retriever(cfg.nprobe);
    let (recall, records) = recall_at_k(
        &test,
        &question,
        &enc_cfg,
        retriever.as_ref(),
        &corpus.chunks,
        &cfg.recall_ks,
        cfg.max_answer_len,
    )?;
    let report = EvalReport {
        recall_at: recall.clone(),
        em: None,
        skipped: 0,
        fingerprint: cfg.fingerprint(),
        records,
    };
    write_json(&cfg.retrieval_report, &report)?;
    write_meta(&cfg.retrieval_report, "eval-retrieval", cfg)?;
    summary(json!({ "stage": "eval-retrieval", "recall_at": recall }));
    Ok(())
}

/// The finetuned question tower, reader and inference weight.
struct Finetuned {
    enc_cfg: EncoderConfig,
    question: EncoderParams,
    reader: ReaderParams,
    weight: f64,
}

impl Finetuned {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = &cfg.finetune_dir;
        let q_path = tower_path(dir, "question");
        let r_path = dir.join("reader.bin");
        let inf_path = dir.join("inference.json");
        require(&[&q_path, &r_path, &inf_path])?;
        let (enc_cfg, question) = load_tower(&q_path)?;
        let reader = ReaderParams::load(&r_path)?;
        let text = std::fs::read_to_string(&inf_path).map_err(|e| io_err(&inf_path, e))?;
        let inf: InferenceSettings =
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", inf_path.display())))?;
        Ok(Self {
            enc_cfg,
            question,
            reader,
            weight: cfg.retrieval_weight.unwrap_or(inf.retrieval_weight),
        })
    }
}

fn eval_qa(cfg: &RunConfig) -> Result<()> {
    require(&[&cfg.test_qa])?;
    let model = Finetuned::load(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let test = read_qa(&cfg.test_qa)?;
    let retriever = corpus.retriever(cfg.nprobe);
    let ctx = QaContext::new(&corpus.chunks, &corpus.store, retriever.as_ref(), &model.enc_cfg, cfg.max_answer_len)?;
    let preds = predict_all(&model.question, &model.enc_cfg, &model.reader, &ctx, &test, cfg.top_k, model.weight)?;
    let (recall, mut records) = recall_at_k(
        &test,
        &model.question,
        &model.enc_cfg,
        retriever.as_ref(),
        &corpus.chunks,
        &cfg.recall_ks,
        cfg.max_answer_len,
    )?;
    let texts: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
    let golds: Vec<Vec<String>> = test.iter().map(|q| q.answers.clone()).collect();
    let em = exact_match(&texts, &golds)?;
    for ((rec, p), q) in records.iter_mut().zip(&preds).zip(&test) {
        rec.correct = Some(is_exact_match(&p.prediction, &q.answers));
        rec.prediction = Some(p.prediction.clone());
    }
    let report = EvalReport {
        recall_at: recall,
        em: Some(em),
        skipped: preds.iter().filter(|p| p.chunk_id.is_none()).count(),
        fingerprint: cfg.fingerprint(),
        records,
    };
    write_json(&cfg.qa_report, &report)?;
    write_meta(&cfg.qa_report, "eval-qa", cfg)?;
    summary(json!({ "stage": "eval-qa", "em": em, "retrieval_weight": model.weight }));
    Ok(())
}

fn query(cfg: &RunConfig) -> Result<()> {
    let model = Finetuned::load(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let retriever = corpus.retriever(cfg.nprobe);
    let ctx = QaContext::new(&corpus.chunks, &corpus.store, retriever.as_ref(), &model.enc_cfg, cfg.max_answer_len)?;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| CliError::Runtime(format!("stdin: {e}")))?;
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        let p = answer_inference(&model.question, &model.enc_cfg, &model.reader, &ctx, question, cfg.top_k, model.weight)?;
        let score = p.combined_score.is_finite().then_some(p.combined_score);
        let record = json!({
            "question": p.question,
            "prediction": p.prediction,
            "combined_score": score,
            "chunk_id": p.chunk_id,
        });
        writeln!(out, "{record}").map_err(|e| CliError::Runtime(format!("stdout: {e}")))?;
    }
    Ok(())
}

/// Strategy name, pair source, batch clustering.
pub const ABLATION_RUNS: [(&str, &str, bool); 3] = [
    ("progressive", "template", true),
    ("no-clustering", "template", false),
    ("ict", "ict", false),
];

fn ablation(cfg: &RunConfig) -> Result<()> {
    require(&[&cfg.chunks, &cfg.test_qa])?;
    let chunks = read_chunk_store(&cfg.chunks)?;
    let test: Vec<QaExample> = read_qa(&cfg.test_qa)?;
    let enc_cfg = cfg.encoder();
    let mut reports = Vec::new();
    let mut losses = BTreeMap::new();
    for (name, source, clustering) in ABLATION_RUNS {
        let pairs = make_pairs(cfg, &chunks, source);
        let set = TrainingSet::build(&pairs, &chunks, &enc_cfg)?;
        let pre = PretrainConfig {
            clustering_enabled: clustering,
            ..cfg.pretrain()
        };
        let mut last = None;
        let state = progressive_train(&pre, &set, DualEncoder::new(enc_cfg.clone())?, |_| Ok(()), |r| {
            last = Some(r.loss);
            Ok(())
        })?;
        let store = encode_corpus(&state.encoder.paragraph, &enc_cfg, &chunks)?;
        let index = (cfg.search == "ivf")
            .then(|| ivf_build(&store, cfg.ncells, index_seed(cfg)))
            .transpose()?;
        let retriever: Box<dyn Retriever> = match &index {
            Some(index) => Box::new(IvfRetriever {
                index,
                store: &store,
                nprobe: cfg.nprobe.min(index.ncells()),
            }),
            None => Box::new(FlatIndex { store: &store }),
        };
        let (recall, records) = recall_at_k(
            &test,
            &state.encoder.question,
            &enc_cfg,
            retriever.as_ref(),
            &chunks,
            &cfg.recall_ks,
            cfg.max_answer_len,
        )?;
        losses.insert(name, last);
        reports.push((
            name.to_string(),
            EvalReport {
                recall_at: recall,
                em: None,
                skipped: 0,
                fingerprint: cfg.fingerprint(),
                records,
            },
        ));
    }
    let table = AblationTable::new(&cfg.recall_ks, reports)?;
    let dir = &cfg.ablation_dir;
    ensure_dir(dir)?;
    let json_path = dir.join("ablation.json");
    write_json(&json_path, &json!({ "fingerprint": cfg.fingerprint(), "table": table }))?;
    write_meta(&json_path, "ablation", cfg)?;
    let txt_path = dir.join("ablation.txt");
    let text = format!("fingerprint {}\n{}", cfg.fingerprint(), table.to_text());
    std::fs::write(&txt_path, &text).map_err(|e| io_err(&txt_path, e))?;
    write_meta(&txt_path, "ablation", cfg)?;
    print!("{}", table.to_text());
    summary(json!({ "stage": "ablation", "final_loss": losses }));
    Ok(())
}
