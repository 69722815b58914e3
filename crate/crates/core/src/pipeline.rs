//! The end-to-end run over a working directory. Every stage reads only
//! files written by earlier stages and records its outputs with content
//! hashes in a manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    delta_breakdown, emit_delta_html, eval_bpb, grounded_analysis, BpbResult, BreakdownTable, BuiltinTagger, DeltaToken,
    GroundedReport, SpanTagger,
};
use crate::config::{read_kv, value};
use crate::corpus::{
    content, read_jsonl, write_jsonl, Article, ContextWindow, SyntheticCorpus, TokenId, Triplet, Vocabulary, NUM_SPECIAL,
};
use crate::dataset::{counterfactual_qa, DataConfig, Dataset, LmCase, QaCase};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{overlap_ok, Embedder, EmbedderConfig, RetrievalTriple, DEFAULT_OVERLAP_THRESHOLD};
use crate::store::{bench_latency, store_build, EncodingStore};
use crate::training::{eval_lm, finetune_qa, qa_exact_match, train_lm, train_retriever, EvalStats, TrainConfig, TrainHistory};
use crate::training::qa::QaHistory;
use crate::training::QaItem;
use crate::utility::{estimate_table, proxy_utility, select_triplets, token_deltas, Candidate, UtilityTable, DEFAULT_MIN_COUNT};

pub const CORPUS: &str = "corpus.jsonl";
pub const QA: &str = "qa.jsonl";
pub const PASSAGES: &str = "passages.jsonl";
pub const HELDOUT: &str = "heldout.json";
pub const VOCAB: &str = "vocab.txt";
pub const WINDOWS: &str = "windows.jsonl";
pub const BM25: &str = "bm25.bin";
pub const LM_TRAIN: &str = "lm_train.jsonl";
pub const LM_EVAL: &str = "lm_eval.jsonl";
pub const QA_TRAIN: &str = "qa_train.jsonl";
pub const QA_EVAL: &str = "qa_eval.jsonl";
pub const LM_WITH: &str = "lm_with.ckpt";
pub const LM_WITHOUT: &str = "lm_without.ckpt";
pub const LM_HISTORY: &str = "lm_history.json";
pub const UTILITY: &str = "utility_table.jsonl";
pub const TRIPLES: &str = "retriever_triples.jsonl";
pub const RETRIEVER: &str = "retriever.ckpt";
pub const RETRIEVER_HISTORY: &str = "retriever_history.json";
pub const STORE_DIR: &str = "store";
pub const QA_WITH: &str = "qa_with.ckpt";
pub const QA_WITHOUT: &str = "qa_without.ckpt";
pub const QA_REPORT: &str = "qa_report.json";
pub const LM_REPORT: &str = "lm_report.json";
pub const BPB: &str = "bpb.json";
pub const BREAKDOWN_JSON: &str = "breakdown.json";
pub const BREAKDOWN_TXT: &str = "breakdown.txt";
pub const GROUNDED_JSON: &str = "grounded.json";
pub const GROUNDED_TXT: &str = "grounded.txt";
pub const DELTA_HTML: &str = "delta.html";
pub const BENCH: &str = "bench.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSizes {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSizes,
    pub embedder: EmbedderConfig,
    pub lm: TrainConfig,
    pub qa: TrainConfig,
    pub retriever: TrainConfig,
    /// Answer-swapped rewrites added per QA training question.
    pub qa_copies: usize,
    /// Draws swapped answers from the whole non-held-out vocabulary rather
    /// than from the training answers.
    pub qa_wide_pool: bool,
    /// Rewritten training questions used for QA checkpoint selection.
    pub qa_val: usize,
    /// LM evaluation triplets used by the analyses; 0 means all.
    pub analysis_limit: usize,
    pub html_examples: usize,
    pub min_count: u64,
    pub bench_queries: usize,
    pub bench_k: usize,
    /// Omits wall-clock durations and skips the latency bench.
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut data = DataConfig::default();
        data.synth.n_entities = 1000;
        data.synth.n_filler_articles = 250;
        data.synth.heldout_fraction = 0.1;
        let lm = TrainConfig { adam_eps: 1e-3, eval_every: 1000, freeze_embeddings: true, ..TrainConfig::default() };
        let qa = TrainConfig {
            steps: 2000,
            lr: 1e-3,
            warmup_steps: 50,
            eval_every: 250,
            ..lm.clone()
        };
        let retriever = TrainConfig { steps: 500, lr: 1e-2, warmup_steps: 50, adam_eps: 1e-8, ..TrainConfig::default() };
        PipelineConfig {
            seed: 0,
            data,
            model: ModelSizes { d_model: 64, n_heads: 4, n_enc_layers: 1, n_dec_layers: 2, d_ff: 128 },
            embedder: EmbedderConfig { vocab_size: 0, hidden: 32, dim: 32, max_len: 64, shared: true },
            lm,
            qa,
            retriever,
            qa_copies: 5,
            qa_wide_pool: true,
            qa_val: 100,
            analysis_limit: 400,
            html_examples: 20,
            min_count: DEFAULT_MIN_COUNT,
            bench_queries: 50,
            bench_k: 2,
            deterministic: true,
        }
        .with_seed(0)
    }
}

impl PipelineConfig {
    /// Applies `prefix.key = value` settings; unknown keys are errors.
    pub fn apply(&mut self, key: &str, line: usize, raw: &str) -> Result<()> {
        let (prefix, rest) = key.split_once('.').unwrap_or(("", key));
        let known = match prefix {
            "data" => self.data.apply(rest, line, raw)?,
            "lm" => self.lm.apply(rest, line, raw)?,
            "qa" => self.qa.apply(rest, line, raw)?,
            "retriever" => self.retriever.apply(rest, line, raw)?,
            "model" => {
                let m = &mut self.model;
                match rest {
                    "d_model" => m.d_model = value(key, line, raw)?,
                    "n_heads" => m.n_heads = value(key, line, raw)?,
                    "n_enc_layers" => m.n_enc_layers = value(key, line, raw)?,
                    "n_dec_layers" => m.n_dec_layers = value(key, line, raw)?,
                    "d_ff" => m.d_ff = value(key, line, raw)?,
                    _ => return Err(unknown(key, line)),
                }
                true
            }
            "embedder" => {
                match rest {
                    "hidden" => self.embedder.hidden = value(key, line, raw)?,
                    "dim" => self.embedder.dim = value(key, line, raw)?,
                    _ => return Err(unknown(key, line)),
                }
                true
            }
            "pipeline" => {
                match rest {
                    "seed" => self.seed = value(key, line, raw)?,
                    "qa_copies" => self.qa_copies = value(key, line, raw)?,
                    "qa_wide_pool" => self.qa_wide_pool = value(key, line, raw)?,
                    "qa_val" => self.qa_val = value(key, line, raw)?,
                    "analysis_limit" => self.analysis_limit = value(key, line, raw)?,
                    "html_examples" => self.html_examples = value(key, line, raw)?,
                    "min_count" => self.min_count = value(key, line, raw)?,
                    "bench_queries" => self.bench_queries = value(key, line, raw)?,
                    "bench_k" => self.bench_k = value(key, line, raw)?,
                    "deterministic" => self.deterministic = crate::config::flag(key, line, raw)?,
                    _ => return Err(unknown(key, line)),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key, line))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (k, (line, v)) in read_kv(path)? {
            cfg.apply(&k, line, &v)?;
        }
        Ok(cfg)
    }

    /// Seeds every stochastic stage from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synth.seed = seed;
        self.lm.seed = seed;
        self.qa.seed = seed.wrapping_add(1);
        self.retriever.seed = seed.wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.lm.validate()?;
        self.qa.validate()?;
        self.retriever.validate()?;
        if self.lm.k > self.data.candidates || self.qa.k > self.data.candidates {
            return Err(Error::config("lm.k and qa.k may not exceed data.candidates"));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_enc_layers: self.model.n_enc_layers,
            n_dec_layers: self.model.n_dec_layers,
            d_ff: self.model.d_ff,
            max_ctx_len: self.data.window,
            max_input_len: self.data.input_len,
            max_target_len: self.data.chunk_len,
            k_contexts: self.lm.k.max(self.qa.k),
        }
    }

    pub fn embedder_config(&self, vocab_size: usize) -> EmbedderConfig {
        EmbedderConfig {
            vocab_size,
            max_len: self.data.window.max(self.data.input_len),
            ..self.embedder.clone()
        }
    }
}

fn unknown(key: &str, line: usize) -> Error {
    Error::config(format!("line {line}: unknown key {key}"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub seed: u64,
    pub config_hash: String,
    pub deterministic: bool,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(v)?))
}

fn file_record(root: &Path, rel: &str) -> Result<FileRecord> {
    let bytes = fs::read(root.join(rel))?;
    Ok(FileRecord { path: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

impl PipelineManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    /// Checks that every recorded output exists with its recorded hash and
    /// that every input was produced by an earlier stage.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let mut produced = BTreeSet::new();
        for stage in &self.stages {
            for input in &stage.inputs {
                if !produced.contains(input.as_str()) {
                    return Err(Error::input(format!("stage {} reads {input}, which no earlier stage wrote", stage.name)));
                }
            }
            for out in &stage.outputs {
                let now = file_record(root, &out.path)?;
                if now.sha256 != out.sha256 {
                    return Err(Error::input(format!("{} changed since stage {}", out.path, stage.name)));
                }
                produced.insert(out.path.as_str());
            }
        }
        Ok(())
    }
}

/// A working directory plus the configuration the stages run under.
pub struct Pipeline {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub with_retrieval: EvalStats,
    pub without_retrieval: EvalStats,
    /// (without - with) / without on mean NLL.
    pub relative_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub em_with: f64,
    pub em_without: f64,
    pub train_em_with: f64,
    pub history_with: QaHistory,
    pub history_without: QaHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpbReport {
    pub with_retrieval: BpbResult,
    pub without_retrieval: BpbResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmHistories {
    pub with_retrieval: TrainHistory,
    pub without_retrieval: TrainHistory,
}

pub const STAGES: &[&str] = &["synth", "data", "lm", "utility", "select", "retriever", "store", "qa", "analyze", "bench"];

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Pipeline { root, config })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path(VOCAB))
    }

    pub fn corpus(&self) -> Result<SyntheticCorpus> {
        let articles: Vec<Article> = read_jsonl(&self.path(CORPUS))?;
        let (article_heldout, heldout_values): (Vec<bool>, BTreeSet<String>) = read_json(&self.path(HELDOUT))?;
        Ok(SyntheticCorpus {
            articles,
            article_heldout,
            qa: read_jsonl(&self.path(QA))?,
            passages: read_jsonl(&self.path(PASSAGES))?,
            heldout_values,
        })
    }

    pub fn windows(&self) -> Result<Vec<ContextWindow>> {
        read_jsonl(&self.path(WINDOWS))
    }

    pub fn lm_cases(&self, eval: bool) -> Result<Vec<LmCase>> {
        read_jsonl(&self.path(if eval { LM_EVAL } else { LM_TRAIN }))
    }

    pub fn qa_cases(&self, eval: bool) -> Result<Vec<QaCase>> {
        read_jsonl(&self.path(if eval { QA_EVAL } else { QA_TRAIN }))
    }

    /// QA fine-tuning triplets (originals plus answer-swapped rewrites)
    /// and the rewritten validation items used for checkpoint selection.
    pub fn qa_training_sets(&self, train_cases: &[QaCase], vocab: &Vocabulary) -> Result<(Vec<Triplet>, Vec<QaItem>)> {
        let cfg = &self.config;
        let (_, heldout): (Vec<bool>, BTreeSet<String>) = read_json(&self.path(HELDOUT))?;
        let wide: Vec<TokenId> =
            (NUM_SPECIAL as TokenId..vocab.size() as TokenId).filter(|&t| !heldout.contains(vocab.token(t))).collect();
        let pool = cfg.qa_wide_pool.then_some(&wide[..]);
        let train = counterfactual_qa(train_cases, vocab, cfg.qa_copies, cfg.qa.seed, true, pool)
            .into_iter()
            .map(|i| i.triplet)
            .collect();
        let n_val = cfg.qa_val.min(train_cases.len());
        let val = counterfactual_qa(&train_cases[..n_val], vocab, 1, cfg.qa.seed ^ 0x7a1, false, pool);
        Ok((train, val))
    }

    fn analysis_triplets(&self) -> Result<Vec<Triplet>> {
        let all: Vec<Triplet> = self.lm_cases(true)?.into_iter().map(|c| c.triplet).collect();
        let n = self.config.analysis_limit;
        if n == 0 || all.len() <= n {
            return Ok(all);
        }
        // evenly spaced, so fact and filler articles are both represented
        Ok((0..n).map(|i| all[i * all.len() / n].clone()).collect())
    }

    /// Runs one stage and returns its manifest record.
    pub fn run_stage(&self, name: &str) -> Result<StageRecord> {
        let t0 = Instant::now();
        let cfg = &self.config;
        let (inputs, outputs, config_hash): (&[&str], Vec<String>, String) = match name {
            "synth" => {
                let corpus = crate::corpus::gen_synthetic_corpus(&cfg.data.synth)?;
                write_jsonl(&self.path(CORPUS), &corpus.articles)?;
                write_jsonl(&self.path(QA), &corpus.qa)?;
                write_jsonl(&self.path(PASSAGES), &corpus.passages)?;
                write_json(&self.path(HELDOUT), &(&corpus.article_heldout, &corpus.heldout_values))?;
                Vocabulary::build(&crate::dataset::vocabulary_texts(&corpus))?.save(&self.path(VOCAB))?;
                (&[], strings(&[CORPUS, QA, PASSAGES, HELDOUT, VOCAB]), hash_json(&cfg.data.synth)?)
            }
            "data" => {
                let d = Dataset::from_corpus(cfg.data.clone(), self.corpus()?)?;
                if d.vocab != self.vocab()? {
                    return Err(Error::input("vocabulary file does not match the corpus"));
                }
                write_jsonl(&self.path(WINDOWS), &d.windows)?;
                d.window_index.save(&self.path(BM25))?;
                write_jsonl(&self.path(LM_TRAIN), &d.lm_train)?;
                write_jsonl(&self.path(LM_EVAL), &d.lm_eval)?;
                write_jsonl(&self.path(QA_TRAIN), &d.qa_train)?;
                write_jsonl(&self.path(QA_EVAL), &d.qa_eval)?;
                (
                    &[CORPUS, QA, PASSAGES, HELDOUT, VOCAB],
                    strings(&[WINDOWS, BM25, LM_TRAIN, LM_EVAL, QA_TRAIN, QA_EVAL]),
                    hash_json(&cfg.data)?,
                )
            }
            "lm" => {
                let vocab = self.vocab()?;
                let train: Vec<Triplet> = self.lm_cases(false)?.into_iter().map(|c| c.triplet).collect();
                let eval = self.analysis_triplets()?;
                let mc = cfg.model_config(vocab.size());
                let (with, h_with) = train_lm(Model::<f32>::init(mc.clone(), cfg.seed)?, &cfg.lm, &train, &eval, true, None)?;
                let (without, h_without) = train_lm(Model::<f32>::init(mc, cfg.seed)?, &cfg.lm, &train, &eval, false, None)?;
                with.save(&self.path(LM_WITH))?;
                without.save(&self.path(LM_WITHOUT))?;
                write_json(&self.path(LM_HISTORY), &LmHistories { with_retrieval: h_with, without_retrieval: h_without })?;
                (&[VOCAB, LM_TRAIN, LM_EVAL], strings(&[LM_WITH, LM_WITHOUT, LM_HISTORY]), hash_json(&(&cfg.model, &cfg.lm))?)
            }
            "utility" => {
                let with = Model::<f32>::load(&self.path(LM_WITH))?;
                let without = Model::<f32>::load(&self.path(LM_WITHOUT))?;
                let table = estimate_table(&with, Some(&without), &self.analysis_triplets()?, cfg.min_count)?;
                table.save(&self.path(UTILITY))?;
                (&[LM_WITH, LM_WITHOUT, LM_EVAL], strings(&[UTILITY]), hash_json(&(cfg.min_count, cfg.analysis_limit))?)
            }
            "select" => {
                let table = UtilityTable::load(&self.path(UTILITY))?;
                let windows = self.windows()?;
                let triples = retriever_triples(&self.lm_cases(false)?, &windows, &table);
                if triples.is_empty() {
                    return Err(Error::input("no training example has a valid retrieval candidate"));
                }
                write_jsonl(&self.path(TRIPLES), &triples)?;
                (&[UTILITY, WINDOWS, LM_TRAIN], strings(&[TRIPLES]), hash_json(&DEFAULT_OVERLAP_THRESHOLD)?)
            }
            "retriever" => {
                let vocab = self.vocab()?;
                let triples: Vec<RetrievalTriple> = read_jsonl(&self.path(TRIPLES))?;
                let init = Embedder::<f32>::init(cfg.embedder_config(vocab.size()), cfg.retriever.seed)?;
                let (emb, losses) = train_retriever(init, &cfg.retriever, &triples)?;
                emb.save(&self.path(RETRIEVER))?;
                write_json(&self.path(RETRIEVER_HISTORY), &losses)?;
                (&[VOCAB, TRIPLES], strings(&[RETRIEVER, RETRIEVER_HISTORY]), hash_json(&(&cfg.embedder, &cfg.retriever))?)
            }
            "store" => {
                let emb = Embedder::<f32>::load(&self.path(RETRIEVER))?;
                let model = Model::<f32>::load(&self.path(LM_WITH))?;
                let contexts: Vec<Vec<u32>> = self.windows()?.into_iter().map(|w| w.tokens).collect();
                store_build(&self.path(STORE_DIR), &emb, &model, &contexts)?;
                let keys = format!("{STORE_DIR}/{}", crate::store::KEY_FILE);
                let values = format!("{STORE_DIR}/{}", crate::store::VALUE_FILE);
                (&[RETRIEVER, LM_WITH, WINDOWS], vec![keys, values], hash_json(&"store-v1")?)
            }
            "qa" => {
                let vocab = self.vocab()?;
                let train_cases = self.qa_cases(false)?;
                let eval_items: Vec<_> = self.qa_cases(true)?.into_iter().map(|c| c.item).collect();
                let (train, val) = self.qa_training_sets(&train_cases, &vocab)?;
                let (qa_with, h_with) =
                    finetune_qa(Model::<f32>::load(&self.path(LM_WITH))?, &cfg.qa, &train, &val, &vocab, true)?;
                let (qa_without, h_without) =
                    finetune_qa(Model::<f32>::load(&self.path(LM_WITHOUT))?, &cfg.qa, &train, &val, &vocab, false)?;
                let train_items: Vec<_> = train_cases.iter().take(cfg.qa_val.max(1)).map(|c| c.item.clone()).collect();
                let report = QaReport {
                    em_with: qa_exact_match(&qa_with, &eval_items, &vocab, true)?,
                    em_without: qa_exact_match(&qa_without, &eval_items, &vocab, false)?,
                    train_em_with: qa_exact_match(&qa_with, &train_items, &vocab, true)?,
                    history_with: h_with,
                    history_without: h_without,
                };
                qa_with.save(&self.path(QA_WITH))?;
                qa_without.save(&self.path(QA_WITHOUT))?;
                write_json(&self.path(QA_REPORT), &report)?;
                (
                    &[VOCAB, HELDOUT, QA_TRAIN, QA_EVAL, LM_WITH, LM_WITHOUT],
                    strings(&[QA_WITH, QA_WITHOUT, QA_REPORT]),
                    hash_json(&(&cfg.qa, cfg.qa_copies, cfg.qa_wide_pool, cfg.qa_val))?,
                )
            }
            "analyze" => {
                self.analyze_lm()?;
                self.analyze_breakdown(&BuiltinTagger)?;
                self.analyze_grounded()?;
                self.analyze_delta_html(&self.path(DELTA_HTML))?;
                (
                    &[VOCAB, LM_EVAL, QA_EVAL, LM_WITH, LM_WITHOUT, QA_WITH],
                    strings(&[LM_REPORT, BPB, BREAKDOWN_JSON, BREAKDOWN_TXT, GROUNDED_JSON, GROUNDED_TXT, DELTA_HTML]),
                    hash_json(&(cfg.analysis_limit, cfg.html_examples, cfg.qa.k))?,
                )
            }
            "bench" => {
                let store = EncodingStore::open(&self.path(STORE_DIR))?;
                let emb = Embedder::<f32>::load(&self.path(RETRIEVER))?;
                let model = Model::<f32>::load(&self.path(LM_WITH))?;
                let contexts: Vec<Vec<u32>> = self.windows()?.into_iter().map(|w| w.tokens).collect();
                let queries: Vec<Vec<u32>> =
                    self.lm_cases(true)?.into_iter().take(cfg.bench_queries).map(|c| c.triplet.input).collect();
                let report = bench_latency(&store, &model, &emb, &contexts, &queries, cfg.bench_k, 5.min(queries.len() / 2))?;
                write_json(&self.path(BENCH), &report)?;
                let keys = format!("{STORE_DIR}/{}", crate::store::KEY_FILE);
                let values = format!("{STORE_DIR}/{}", crate::store::VALUE_FILE);
                let inputs: &[&str] = &[RETRIEVER, LM_WITH, WINDOWS, LM_EVAL];
                let mut all: Vec<String> = strings(inputs);
                all.extend([keys, values]);
                return Ok(StageRecord {
                    name: name.to_string(),
                    config_hash: hash_json(&(cfg.bench_queries, cfg.bench_k))?,
                    seed: cfg.seed,
                    inputs: all,
                    outputs: vec![file_record(&self.root, BENCH)?],
                    duration_ms: Some(t0.elapsed().as_millis() as u64),
                });
            }
            other => return Err(Error::input(format!("unknown stage `{other}`"))),
        };
        Ok(StageRecord {
            name: name.to_string(),
            config_hash,
            seed: cfg.seed,
            inputs: strings(inputs),
            outputs: outputs.iter().map(|p| file_record(&self.root, p)).collect::<Result<_>>()?,
            duration_ms: (!cfg.deterministic).then(|| t0.elapsed().as_millis() as u64),
        })
    }

    /// Eval NLL of both LMs and their bits per byte under the overlap filter.
    pub fn analyze_lm(&self) -> Result<(LmReport, BpbReport)> {
        let vocab = self.vocab()?;
        let with = Model::<f32>::load(&self.path(LM_WITH))?;
        let without = Model::<f32>::load(&self.path(LM_WITHOUT))?;
        let eval = self.analysis_triplets()?;
        let ev_with = eval_lm(&with, &eval, true)?;
        let ev_without = eval_lm(&without, &eval, false)?;
        let relative_margin = (ev_without.loss - ev_with.loss) / ev_without.loss;
        let lm = LmReport { with_retrieval: ev_with, without_retrieval: ev_without, relative_margin };
        write_json(&self.path(LM_REPORT), &lm)?;
        let bpb = BpbReport {
            with_retrieval: eval_bpb(&with, &eval, &vocab, Some(DEFAULT_OVERLAP_THRESHOLD), true)?,
            without_retrieval: eval_bpb(&without, &eval, &vocab, Some(DEFAULT_OVERLAP_THRESHOLD), false)?,
        };
        write_json(&self.path(BPB), &bpb)?;
        Ok((lm, bpb))
    }

    pub fn analyze_breakdown(&self, tagger: &dyn SpanTagger) -> Result<BreakdownTable> {
        let vocab = self.vocab()?;
        let with = Model::<f32>::load(&self.path(LM_WITH))?;
        let without = Model::<f32>::load(&self.path(LM_WITHOUT))?;
        let (table, _) = delta_breakdown(&with, Some(&without), &self.analysis_triplets()?, &vocab, tagger)?;
        write_json(&self.path(BREAKDOWN_JSON), &table)?;
        fs::write(self.path(BREAKDOWN_TXT), table.to_text())?;
        Ok(table)
    }

    pub fn analyze_grounded(&self) -> Result<GroundedReport> {
        let qa_with = Model::<f32>::load(&self.path(QA_WITH))?;
        let report = grounded_analysis(&qa_with, &self.qa_cases(true)?, &self.vocab()?, self.config.qa.k)?;
        write_json(&self.path(GROUNDED_JSON), &report)?;
        fs::write(self.path(GROUNDED_TXT), report.to_text())?;
        Ok(report)
    }

    pub fn analyze_delta_html(&self, out: &Path) -> Result<()> {
        let with = Model::<f32>::load(&self.path(LM_WITH))?;
        let without = Model::<f32>::load(&self.path(LM_WITHOUT))?;
        let eval = self.analysis_triplets()?;
        let seqs = delta_sequences(&with, &without, &eval[..self.config.html_examples.min(eval.len())], &self.vocab()?)?;
        emit_delta_html(&seqs, out)
    }

    /// Runs every stage in order (the bench only outside deterministic
    /// mode) and writes the manifest.
    pub fn run_all(&self) -> Result<PipelineManifest> {
        let mut manifest = PipelineManifest {
            seed: self.config.seed,
            config_hash: hash_json(&self.config)?,
            deterministic: self.config.deterministic,
            stages: Vec::new(),
        };
        for &stage in STAGES {
            if stage == "bench" && self.config.deterministic {
                continue;
            }
            manifest.stages.push(self.run_stage(stage)?);
        }
        manifest.save(&self.path(MANIFEST))?;
        Ok(manifest)
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// For every training example, scores its BM25 candidates with `Û`, marks
/// those failing the overlap filter, and keeps the selected positive and
/// hard negative.
pub fn retriever_triples(cases: &[LmCase], windows: &[ContextWindow], table: &UtilityTable) -> Vec<RetrievalTriple> {
    let mut out = Vec::new();
    for case in cases {
        let t = &case.triplet;
        let cands: Vec<Candidate> = case
            .candidates
            .iter()
            .map(|&id| {
                let c = &windows[id as usize].tokens;
                Candidate {
                    id,
                    utility: proxy_utility(table, &t.input, &t.target, c),
                    valid: content(c).next().is_some() && overlap_ok(&t.target, c, DEFAULT_OVERLAP_THRESHOLD),
                }
            })
            .collect();
        if let Some(sel) = select_triplets(&cands) {
            out.push(RetrievalTriple {
                query: t.input.clone(),
                positive: windows[sel.positive as usize].tokens.clone(),
                hard_negative: sel.hard_negative.map(|h| windows[h as usize].tokens.clone()),
            });
        }
    }
    out
}

/// Per-token deltas of the target tokens, ready for the HTML report.
pub fn delta_sequences(
    with: &Model<f32>,
    without: &Model<f32>,
    triplets: &[Triplet],
    vocab: &Vocabulary,
) -> Result<Vec<Vec<DeltaToken>>> {
    triplets
        .iter()
        .map(|t| {
            Ok(token_deltas(with, Some(without), t)?
                .into_iter()
                .map(|d| DeltaToken {
                    text: vocab.token(d.token).to_string(),
                    delta: d.delta(),
                    in_input: d.in_input,
                    in_context: d.in_context,
                })
                .collect())
        })
        .collect()
}
