//! Run configuration: built-in defaults, an optional TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use qaret_core::encoder::EncoderConfig;
use qaret_core::finetune::FinetuneConfig;
use qaret_core::pretrain::PretrainConfig;
use qaret_core::synth::SynthConfig;
use qaret_core::vecindex::{DEFAULT_NCELLS, DEFAULT_NPROBE};

use crate::CliError;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "QARET_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub train_qa: PathBuf,
    pub dev_qa: PathBuf,
    pub test_qa: PathBuf,
    pub chunks: PathBuf,
    pub pairs: PathBuf,
    pub pretrain_dir: PathBuf,
    pub vectors: PathBuf,
    pub index: PathBuf,
    pub answer_cache: PathBuf,
    pub finetune_dir: PathBuf,
    pub retrieval_report: PathBuf,
    pub qa_report: PathBuf,
    pub ablation_dir: PathBuf,

    pub seed: u64,
    pub threads: usize,

    pub synth_topics: usize,
    pub synth_docs_per_topic: usize,
    pub synth_vocab_per_topic: usize,
    pub synth_min_filler: usize,
    pub synth_max_filler: usize,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,

    pub chunk_len: usize,
    pub max_answer_len: usize,

    pub pair_source: String,
    pub max_pairs_per_chunk: usize,
    pub ict_pairs_per_chunk: usize,
    pub ict_drop_prob: f64,

    pub n_buckets: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hidden_dim: usize,
    pub index_dim: usize,
    pub share_weights: bool,

    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub total_updates: u64,
    pub recluster_every: u64,
    pub num_clusters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clustering: bool,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub save_optimizer: bool,

    pub ncells: usize,
    pub nprobe: usize,
    pub search: String,

    pub top_k: usize,
    pub early_candidates: usize,
    pub cache_depth: usize,
    pub finetune_batch_size: usize,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
    pub reader_learning_rate: f64,
    pub shared_norm: bool,
    pub joint: bool,
    pub train_token_embedding: bool,
    pub retrieval_weight: Option<f64>,

    pub recall_ks: Vec<usize>,
    pub eval_tower: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let enc = EncoderConfig::default();
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        Self {
            corpus: "data/corpus.jsonl".into(),
            train_qa: "data/train.jsonl".into(),
            dev_qa: "data/dev.jsonl".into(),
            test_qa: "data/test.jsonl".into(),
            chunks: "work/chunks.jsonl".into(),
            pairs: "work/pairs.jsonl".into(),
            pretrain_dir: "work/pretrain".into(),
            vectors: "work/vectors.bin".into(),
            index: "work/index.bin".into(),
            answer_cache: "work/answer_cache.json".into(),
            finetune_dir: "work/finetune".into(),
            retrieval_report: "work/retrieval_report.json".into(),
            qa_report: "work/qa_report.json".into(),
            ablation_dir: "work/ablation".into(),

            seed: pre.seed,
            threads: 0,

            synth_topics: synth.topics,
            synth_docs_per_topic: synth.docs_per_topic,
            synth_vocab_per_topic: synth.vocab_per_topic,
            synth_min_filler: synth.min_filler_sentences,
            synth_max_filler: synth.max_filler_sentences,
            synth_train: synth.train_questions,
            synth_dev: synth.dev_questions,
            synth_test: synth.test_questions,

            chunk_len: qaret_core::corpus::DEFAULT_CHUNK_LEN,
            max_answer_len: qaret_core::corpus::DEFAULT_MAX_ANSWER_LEN,

            pair_source: "template".into(),
            max_pairs_per_chunk: 0,
            ict_pairs_per_chunk: 3,
            ict_drop_prob: qaret_core::datagen::DEFAULT_ICT_DROP_PROB,

            n_buckets: enc.n_buckets,
            ngram_min: enc.ngram_min,
            ngram_max: enc.ngram_max,
            hidden_dim: enc.hidden_dim,
            index_dim: enc.index_dim,
            share_weights: enc.share_weights,

            batch_size: pre.batch_size,
            accumulation_steps: pre.accumulation_steps,
            total_updates: pre.total_updates,
            recluster_every: pre.recluster_every,
            num_clusters: pre.num_clusters,
            learning_rate: pre.learning_rate,
            beta1: pre.beta1,
            beta2: pre.beta2,
            eps: pre.eps,
            clustering: pre.clustering_enabled,
            kmeans_iters: pre.kmeans_iters,
            kmeans_restarts: pre.kmeans_restarts,
            save_optimizer: false,

            ncells: DEFAULT_NCELLS,
            nprobe: DEFAULT_NPROBE,
            search: "ivf".into(),

            top_k: ft.top_k,
            early_candidates: ft.early_candidates,
            cache_depth: ft.cache_depth,
            finetune_batch_size: ft.batch_size,
            finetune_epochs: ft.epochs,
            finetune_learning_rate: ft.learning_rate,
            reader_learning_rate: ft.reader_learning_rate,
            shared_norm: ft.shared_norm,
            joint: ft.joint,
            train_token_embedding: ft.train_token_embedding,
            retrieval_weight: None,

            recall_ks: vec![1, 5, 10, 20, 50, 100],
            eval_tower: "pretrain".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Path,
    Text,
    Int,
    Float,
    Bool,
    OptFloat,
    IntList,
}

impl Kind {
    pub fn value_name(self) -> &'static str {
        match self {
            Kind::Path => "PATH",
            Kind::Text => "NAME",
            Kind::Int => "N",
            Kind::Float | Kind::OptFloat => "X",
            Kind::Bool => "BOOL",
            Kind::IntList => "N,N,..",
        }
    }
}

pub struct Field {
    pub name: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn f(name: &'static str, kind: Kind, help: &'static str) -> Field {
    Field { name, kind, help }
}

/// Every `RunConfig` field in flag order.
pub const FIELDS: &[Field] = &[
    f("corpus", Kind::Path, "Corpus file, one JSON document per line"),
    f("train_qa", Kind::Path, "Training questions, one JSON record per line"),
    f("dev_qa", Kind::Path, "Validation questions"),
    f("test_qa", Kind::Path, "Test questions"),
    f("chunks", Kind::Path, "Chunk store"),
    f("pairs", Kind::Path, "Question-paragraph pair file"),
    f("pretrain_dir", Kind::Path, "Pretrained checkpoint directory"),
    f("vectors", Kind::Path, "Encoded corpus vectors"),
    f("index", Kind::Path, "IVF index file"),
    f("answer_cache", Kind::Path, "Answer-set cache for the early loss"),
    f("finetune_dir", Kind::Path, "Finetuned checkpoint directory"),
    f("retrieval_report", Kind::Path, "Retrieval evaluation report"),
    f("qa_report", Kind::Path, "QA evaluation report"),
    f("ablation_dir", Kind::Path, "Pretraining ablation output directory"),
    f("seed", Kind::Int, "Root seed for every stage"),
    f("threads", Kind::Int, "Worker threads, 0 for all cores"),
    f("synth_topics", Kind::Int, "Synthetic corpus: latent topics"),
    f("synth_docs_per_topic", Kind::Int, "Synthetic corpus: documents per topic"),
    f("synth_vocab_per_topic", Kind::Int, "Synthetic corpus: words per topic"),
    f("synth_min_filler", Kind::Int, "Synthetic corpus: fewest filler sentences"),
    f("synth_max_filler", Kind::Int, "Synthetic corpus: most filler sentences"),
    f("synth_train", Kind::Int, "Synthetic corpus: training questions"),
    f("synth_dev", Kind::Int, "Synthetic corpus: validation questions"),
    f("synth_test", Kind::Int, "Synthetic corpus: test questions"),
    f("chunk_len", Kind::Int, "Tokens per chunk"),
    f("max_answer_len", Kind::Int, "Longest answer span in tokens"),
    f("pair_source", Kind::Text, "Pair generator: template or ict"),
    f("max_pairs_per_chunk", Kind::Int, "Template pairs kept per chunk, 0 for all"),
    f("ict_pairs_per_chunk", Kind::Int, "Inverse-cloze pairs drawn per chunk"),
    f("ict_drop_prob", Kind::Float, "Probability of removing the query sentence from its passage"),
    f("n_buckets", Kind::Int, "Hashed n-gram buckets"),
    f("ngram_min", Kind::Int, "Shortest character n-gram"),
    f("ngram_max", Kind::Int, "Longest character n-gram"),
    f("hidden_dim", Kind::Int, "Embedding width"),
    f("index_dim", Kind::Int, "Projected vector width"),
    f("share_weights", Kind::Bool, "Tie question and paragraph towers"),
    f("batch_size", Kind::Int, "Pretraining batch size"),
    f("accumulation_steps", Kind::Int, "Batches accumulated per update"),
    f("total_updates", Kind::Int, "Pretraining updates"),
    f("recluster_every", Kind::Int, "Updates between reclusterings"),
    f("num_clusters", Kind::Int, "Clusters for batch sampling"),
    f("learning_rate", Kind::Float, "Pretraining learning rate"),
    f("beta1", Kind::Float, "Adam beta1"),
    f("beta2", Kind::Float, "Adam beta2"),
    f("eps", Kind::Float, "Adam epsilon"),
    f("clustering", Kind::Bool, "Sample batches from clusters"),
    f("kmeans_iters", Kind::Int, "k-means iterations per reclustering"),
    f("kmeans_restarts", Kind::Int, "k-means restarts per reclustering"),
    f("save_optimizer", Kind::Bool, "Also write the optimizer state after pretraining"),
    f("ncells", Kind::Int, "IVF cells"),
    f("nprobe", Kind::Int, "IVF cells probed per query"),
    f("search", Kind::Text, "Search over the corpus: ivf or flat"),
    f("top_k", Kind::Int, "Chunks read per question"),
    f("early_candidates", Kind::Int, "Candidates normalized over in the early loss"),
    f("cache_depth", Kind::Int, "Depth of the answer-set cache"),
    f("finetune_batch_size", Kind::Int, "Questions per finetuning update"),
    f("finetune_epochs", Kind::Int, "Passes over the training questions"),
    f("finetune_learning_rate", Kind::Float, "Question tower learning rate during finetuning"),
    f("reader_learning_rate", Kind::Float, "Reader learning rate"),
    f("shared_norm", Kind::Bool, "Normalize span scores across all read chunks"),
    f("joint", Kind::Bool, "Marginalize over chunks weighted by retrieval"),
    f("train_token_embedding", Kind::Bool, "Train the reader's token table"),
    f("retrieval_weight", Kind::OptFloat, "Retrieval score weight at inference; unset selects it on the dev set"),
    f("recall_ks", Kind::IntList, "Cutoffs reported by retrieval evaluation"),
    f("eval_tower", Kind::Text, "Question tower for eval-retrieval: pretrain or finetune"),
];

/// Path-valued fields, which do not enter the fingerprint.
fn is_path(name: &str) -> bool {
    FIELDS.iter().any(|f| f.name == name && f.kind == Kind::Path)
}

pub fn flag_name(field: &str) -> String {
    field.replace('_', "-")
}

/// Default of one field as shown in `--help`.
pub fn default_text(field: &str) -> String {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    match &v[field] {
        Value::Null => "unset".into(),
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(Value::to_string).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_value(field: &Field, raw: &str) -> Result<Value, String> {
    let bad = |what: &str| format!("--{}: expected {what}, got {raw:?}", flag_name(field.name));
    Ok(match field.kind {
        Kind::Path | Kind::Text => Value::String(raw.to_string()),
        Kind::Int => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Kind::Float => Value::from(raw.parse::<f64>().map_err(|_| bad("a number"))?),
        Kind::OptFloat => match raw {
            "" | "unset" | "none" => Value::Null,
            _ => Value::from(raw.parse::<f64>().map_err(|_| bad("a number or unset"))?),
        },
        Kind::Bool => Value::Bool(raw.parse::<bool>().map_err(|_| bad("true or false"))?),
        Kind::IntList => Value::Array(
            raw.split(',')
                .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad("comma-separated integers")))
                .collect::<Result<_, _>>()?,
        ),
    })
}

impl RunConfig {
    /// Defaults, overlaid with the TOML file named by `path` or by [`CONFIG_ENV`].
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.to_string().replace('\n', " ");
            CliError::Usage(format!("bad config {}: {}", path.display(), msg.trim()))
        })
    }

    /// Applies `(field, raw value)` overrides.
    pub fn with_overrides(self, overrides: &[(&'static str, String)]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let Value::Object(mut map) = serde_json::to_value(&self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        for (name, raw) in overrides {
            let field = FIELDS.iter().find(|f| f.name == *name).expect("flag comes from FIELDS");
            map.insert(name.to_string(), parse_value(field, raw).map_err(CliError::Usage)?);
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// SHA-256 over every setting that can change an artifact. Paths and the
    /// thread count are left out.
    pub fn fingerprint(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let kept: Map<String, Value> = map
            .into_iter()
            .filter(|(k, _)| !is_path(k) && k != "threads")
            .collect();
        hex(&Sha256::digest(Value::Object(kept).to_string().as_bytes()))
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_buckets: self.n_buckets,
            ngram_min: self.ngram_min,
            ngram_max: self.ngram_max,
            hidden_dim: self.hidden_dim,
            index_dim: self.index_dim,
            seed: self.seed,
            share_weights: self.share_weights,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            accumulation_steps: self.accumulation_steps,
            total_updates: self.total_updates,
            recluster_every: self.recluster_every,
            num_clusters: self.num_clusters,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            clustering_enabled: self.clustering,
            kmeans_iters: self.kmeans_iters,
            kmeans_restarts: self.kmeans_restarts,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            top_k: self.top_k,
            early_candidates: self.early_candidates,
            cache_depth: self.cache_depth,
            max_answer_len: self.max_answer_len,
            batch_size: self.finetune_batch_size,
            epochs: self.finetune_epochs,
            learning_rate: self.finetune_learning_rate,
            reader_learning_rate: self.reader_learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            shared_norm: self.shared_norm,
            joint: self.joint,
            train_token_embedding: self.train_token_embedding,
            nprobe: self.nprobe,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            topics: self.synth_topics,
            docs_per_topic: self.synth_docs_per_topic,
            vocab_per_topic: self.synth_vocab_per_topic,
            min_filler_sentences: self.synth_min_filler,
            max_filler_sentences: self.synth_max_filler,
            train_questions: self.synth_train,
            dev_questions: self.synth_dev,
            test_questions: self.synth_test,
            seed: self.seed,
        }
    }

    /// Checks enumerated and cross-field settings up front.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !matches!(self.pair_source.as_str(), "template" | "ict") {
            return usage(format!("pair_source must be template or ict, got {:?}", self.pair_source));
        }
        if !matches!(self.search.as_str(), "ivf" | "flat") {
            return usage(format!("search must be ivf or flat, got {:?}", self.search));
        }
        if !matches!(self.eval_tower.as_str(), "pretrain" | "finetune") {
            return usage(format!("eval_tower must be pretrain or finetune, got {:?}", self.eval_tower));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return usage("recall_ks must list positive cutoffs".into());
        }
        if self.ncells == 0 || self.nprobe == 0 {
            return usage("ncells and nprobe must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ict_drop_prob) {
            return usage("ict_drop_prob must lie in [0, 1]".into());
        }
        if self.retrieval_weight.is_some_and(|w| !w.is_finite()) {
            return usage("retrieval_weight must be finite".into());
        }
        let checks = [
            self.encoder().validate(),
            self.pretrain().validate(),
            self.finetune().validate(),
        ];
        for c in checks {
            c.map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
