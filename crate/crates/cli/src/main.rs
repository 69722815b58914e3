use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxlm::analysis::{BuiltinTagger, LexiconTagger, SpanTagger};
use ctxlm::corpus::{content_vec, TokenId};
use ctxlm::pipeline::{self, Pipeline, PipelineConfig, PipelineManifest, StageRecord};
use ctxlm::retrieval::{Bm25Index, Role, VectorIndex};
use ctxlm::store::{bench_latency, serve_query, EncodingStore};
use ctxlm::utility::{proxy_utility, UtilityTable};
use ctxlm::{Embedder, Error, Model, Result};
use serde::Serialize;

/// Decoupled encoder-decoder retrieval-augmented language modeling.
#[derive(Parser)]
#[command(name = "ctxlm", version)]
struct Cli {
    /// Root directory for every input and output file.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Seed for every stochastic stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, QA pairs and vocabulary.
    Synth,
    /// BM25 and dense indexes over the context windows.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Context utility tables and retriever triplets.
    #[command(subcommand)]
    Utility(UtilityCmd),
    /// Train the LM with and without retrieved contexts.
    #[command(subcommand)]
    Lm(TrainCmd),
    /// Train the dense retriever on selected triplets.
    #[command(subcommand)]
    Retriever(TrainCmd),
    /// Fine-tune both LMs for question answering.
    #[command(subcommand)]
    Qa(TrainCmd),
    /// Precompute context encodings.
    #[command(subcommand)]
    Encode(EncodeCmd),
    /// Inspect the encoding store.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Answer queries from the encoding store.
    #[command(subcommand)]
    Serve(ServeCmd),
    /// Evaluation reports.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Run or verify the whole experiment.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Sparse term index.
    #[command(subcommand)]
    Bm25(IndexOp),
    /// Exact inner-product index over retriever keys.
    #[command(subcommand)]
    Ann(IndexOp),
}

#[derive(Subcommand)]
enum IndexOp {
    /// Build the index over the context windows.
    Build,
    /// Rank context windows for a text query.
    Query(QueryArgs),
}

#[derive(Args)]
struct QueryArgs {
    /// Query text.
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Subcommand)]
enum UtilityCmd {
    /// Estimate the condition table from the with/without LM pair.
    EstimateTable,
    /// Print the proxy utility of every candidate of one training example.
    Score {
        #[arg(long)]
        example: usize,
    },
    /// Select positives and hard negatives for retriever training.
    SelectTriplets,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Run the stage with the configured settings.
    Train,
}

#[derive(Subcommand)]
enum EncodeCmd {
    #[command(subcommand)]
    Store(StoreBuild),
}

#[derive(Subcommand)]
enum StoreBuild {
    /// Precompute keys and encoder outputs for every context window.
    Build,
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Print one stored record.
    Lookup {
        #[arg(long)]
        id: u64,
    },
}

#[derive(Subcommand)]
enum ServeCmd {
    /// Retrieve cached encodings for a query and decode a continuation.
    Query(QueryArgs),
    /// Compare cached lookup against encoding at inference time.
    Bench {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Eval NLL and bits per byte for both LMs.
    Bpb,
    /// Per-token improvement by token class and membership condition.
    Breakdown {
        /// `word TAG` lexicon replacing the built-in tagger.
        #[arg(long)]
        tags: Option<PathBuf>,
    },
    /// Grounded context transfer on the held-out QA questions.
    Grounded,
    /// Per-token delta log-likelihood as HTML.
    DeltaHtml {
        #[arg(long, default_value = pipeline::DELTA_HTML)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage and write the manifest.
    All,
    /// Check every manifest entry against the files on disk.
    Verify,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs one stage and records it in the manifest, replacing an earlier
/// record of the same stage.
fn stage(p: &Pipeline, name: &str) -> Result<StageRecord> {
    let rec = p.run_stage(name)?;
    let path = p.path(pipeline::MANIFEST);
    let mut m = if path.exists() { PipelineManifest::load(&path)? } else { PipelineManifest::default() };
    m.seed = p.config.seed;
    m.deterministic = p.config.deterministic;
    m.stages.retain(|s| s.name != name);
    m.stages.push(rec.clone());
    m.save(&path)?;
    Ok(rec)
}

fn query_tokens(p: &Pipeline, text: &str) -> Result<Vec<TokenId>> {
    let mut t = p.vocab()?.tokenize(text);
    let n = p.config.data.input_len;
    if t.len() > n {
        t.drain(..t.len() - n);
    }
    Ok(t)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let p = Pipeline::new(&cli.workdir, cfg)?;
    match cli.command {
        Command::Synth => print_json(&stage(&p, "synth")?),
        Command::Index(IndexCmd::Bm25(IndexOp::Build)) => print_json(&stage(&p, "data")?),
        Command::Index(IndexCmd::Bm25(IndexOp::Query(q))) => {
            let idx = Bm25Index::load(&p.path(pipeline::BM25))?;
            print_json(&idx.topk(&p.vocab()?.tokenize(&q.text), q.k))
        }
        Command::Index(IndexCmd::Ann(IndexOp::Build)) => {
            let emb = Embedder::<f32>::load(&p.path(pipeline::RETRIEVER))?;
            let windows: Vec<Vec<TokenId>> = p.windows()?.into_iter().map(|w| w.tokens).collect();
            let idx = VectorIndex::new(emb.embed_all(&windows, Role::Document)?)?;
            idx.save(&p.path("ann.bin"))?;
            println!("{} vectors of dimension {}", idx.len(), idx.dim());
            Ok(())
        }
        Command::Index(IndexCmd::Ann(IndexOp::Query(q))) => {
            let emb = Embedder::<f32>::load(&p.path(pipeline::RETRIEVER))?;
            let idx = VectorIndex::<f32>::load(&p.path("ann.bin"))?;
            let qv = emb.embed(&query_tokens(&p, &q.text)?, Role::Query)?;
            print_json(&idx.topk(qv.view(), q.k, &Default::default()))
        }
        Command::Utility(UtilityCmd::EstimateTable) => print_json(&stage(&p, "utility")?),
        Command::Utility(UtilityCmd::SelectTriplets) => print_json(&stage(&p, "select")?),
        Command::Utility(UtilityCmd::Score { example }) => {
            let table = UtilityTable::load(&p.path(pipeline::UTILITY))?;
            let cases = p.lm_cases(false)?;
            let case = cases
                .get(example)
                .ok_or_else(|| Error::OutOfRange(format!("example {example} of {}", cases.len())))?;
            let windows = p.windows()?;
            let scores: Vec<(u64, f64)> = case
                .candidates
                .iter()
                .map(|&id| (id, proxy_utility(&table, &case.triplet.input, &case.triplet.target, &windows[id as usize].tokens)))
                .collect();
            print_json(&scores)
        }
        Command::Lm(TrainCmd::Train) => print_json(&stage(&p, "lm")?),
        Command::Retriever(TrainCmd::Train) => print_json(&stage(&p, "retriever")?),
        Command::Qa(TrainCmd::Train) => print_json(&stage(&p, "qa")?),
        Command::Encode(EncodeCmd::Store(StoreBuild::Build)) => print_json(&stage(&p, "store")?),
        Command::Store(StoreCmd::Lookup { id }) => {
            let store = EncodingStore::open(&p.path(pipeline::STORE_DIR))?;
            let e = store.lookup(id)?;
            let first: Vec<f32> = e.states.row(0).to_vec();
            print_json(&serde_json::json!({
                "context_id": e.context_id,
                "content_len": e.content_len,
                "shape": [e.states.nrows(), e.states.ncols()],
                "first_row": first,
            }))
        }
        Command::Serve(ServeCmd::Query(q)) => {
            let store = EncodingStore::open(&p.path(pipeline::STORE_DIR))?;
            let emb = Embedder::<f32>::load(&p.path(pipeline::RETRIEVER))?;
            let model = Model::<f32>::load(&p.path(pipeline::LM_WITH))?;
            let x = query_tokens(&p, &q.text)?;
            let res = serve_query(&store, &emb, &x, q.k.min(model.config.k_contexts))?;
            let out = model.greedy_decode(&x, &res.encodings(), model.config.max_target_len)?;
            print_json(&serde_json::json!({
                "contexts": res.hits.iter().map(|h| (h.0, h.1)).collect::<Vec<_>>(),
                "truncated": res.truncated,
                "continuation": p.vocab()?.detokenize(&out),
            }))
        }
        Command::Serve(ServeCmd::Bench { k, queries, warmup }) => {
            let store = EncodingStore::open(&p.path(pipeline::STORE_DIR))?;
            let emb = Embedder::<f32>::load(&p.path(pipeline::RETRIEVER))?;
            let model = Model::<f32>::load(&p.path(pipeline::LM_WITH))?;
            let contexts: Vec<Vec<TokenId>> = p.windows()?.into_iter().map(|w| w.tokens).collect();
            let qs: Vec<Vec<TokenId>> =
                p.lm_cases(true)?.into_iter().take(queries).map(|c| content_vec(&c.triplet.input)).collect();
            print_json(&bench_latency(&store, &model, &emb, &contexts, &qs, k, warmup)?)
        }
        Command::Analyze(AnalyzeCmd::Bpb) => print_json(&p.analyze_lm()?),
        Command::Analyze(AnalyzeCmd::Breakdown { tags }) => {
            let tagger: Box<dyn SpanTagger> = match tags {
                Some(path) => Box::new(LexiconTagger::load(&path)?),
                None => Box::new(BuiltinTagger),
            };
            print!("{}", p.analyze_breakdown(tagger.as_ref())?.to_text());
            Ok(())
        }
        Command::Analyze(AnalyzeCmd::Grounded) => {
            print!("{}", p.analyze_grounded()?.to_text());
            Ok(())
        }
        Command::Analyze(AnalyzeCmd::DeltaHtml { out }) => {
            let out = if out.is_absolute() { out } else { p.root.join(out) };
            p.analyze_delta_html(&out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Pipeline(PipelineCmd::All) => {
            let m = p.run_all()?;
            println!("{}", pipeline::sha256_hex(&std::fs::read(p.path(pipeline::MANIFEST))?));
            eprintln!("{} stages", m.stages.len());
            Ok(())
        }
        Command::Pipeline(PipelineCmd::Verify) => {
            PipelineManifest::load(&p.path(pipeline::MANIFEST))?.verify(&p.root)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
