//! Tokenization, chunking of articles into LM examples and context windows,
//! and the synthetic entity/attribute/value corpus.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Non-PAD tokens of a sequence, in order.
pub fn content(seq: &[TokenId]) -> impl Iterator<Item = TokenId> + '_ {
    seq.iter().copied().filter(|&t| t != PAD)
}

pub fn content_vec(seq: &[TokenId]) -> Vec<TokenId> {
    content(seq).collect()
}

/// Lowercases and splits text into word pieces: maximal alphanumeric runs,
/// and every other non-whitespace character on its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Ids from 4 upward in descending frequency, ties in lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::input("cannot build a vocabulary from an empty corpus"));
        }
        let mut entries: Vec<(String, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t))
    }

    /// Builds from regular tokens listed in id order (first gets id 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            index.insert(s.to_string(), i as TokenId);
        }
        for t in tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), all.len() as TokenId).is_some() {
                return Err(Error::input(format!("duplicate vocabulary entry {t:?}")));
            }
            all.push(t);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .into_iter()
            .map(|w| match self.index.get(&w) {
                Some(&id) if id as usize >= NUM_SPECIAL => id,
                _ => UNK,
            })
            .collect()
    }

    /// Space-joined token strings; PAD is skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = content(ids).map(|t| self.token(t)).collect();
        words.join(" ")
    }

    /// One regular token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens[NUM_SPECIAL..] {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut toks = Vec::new();
        for line in r.lines() {
            toks.push(line?);
        }
        Self::from_tokens(toks)
    }
}

/// One LM training example: `input` is left-padded to `n`, `target` is
/// right-padded to `s`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmExample {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub article_id: u64,
    pub chunk_index: usize,
}

/// Splits an article into non-overlapping target blocks of at most `s`
/// tokens, each preceded by up to `n` tokens of input.
pub fn chunk_article(tokens: &[TokenId], s: usize, n: usize, article_id: u64) -> Result<Vec<LmExample>> {
    if s == 0 {
        return Err(Error::input("chunk size must be at least 1"));
    }
    let mut out = Vec::new();
    for (k, start) in (0..tokens.len()).step_by(s).enumerate() {
        let end = (start + s).min(tokens.len());
        let mut target = tokens[start..end].to_vec();
        target.resize(s, PAD);
        let ctx = &tokens[start.saturating_sub(n)..start];
        let mut input = vec![PAD; n - ctx.len()];
        input.extend_from_slice(ctx);
        out.push(LmExample { input, target, article_id, chunk_index: k });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub tokens: Vec<TokenId>,
    pub article_id: u64,
    pub start: usize,
}

/// Sliding windows of `w` tokens every `stride` tokens, starting while the
/// start offset is still inside the article.
pub fn build_context_windows(tokens: &[TokenId], w: usize, stride: usize, article_id: u64) -> Result<Vec<ContextWindow>> {
    if stride == 0 || w < stride {
        return Err(Error::input(format!("need w >= stride >= 1, got w={w} stride={stride}")));
    }
    Ok((0..tokens.len())
        .step_by(stride)
        .map(|start| {
            let end = (start + w).min(tokens.len());
            let mut t = tokens[start..end].to_vec();
            t.resize(w, PAD);
            ContextWindow { tokens: t, article_id, start }
        })
        .collect())
}

/// An `(x, y, c)` example: input, target and the retrieved contexts, each
/// context a `w`-token PAD-padded window with its database id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub contexts: Vec<(u64, Vec<TokenId>)>,
}

impl Triplet {
    /// Union of the non-PAD tokens of all contexts.
    pub fn context_tokens(&self) -> BTreeSet<TokenId> {
        self.contexts.iter().flat_map(|(_, c)| content(c)).collect()
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub heldout: bool,
    #[serde(default)]
    pub fact_id: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_pool: Vec<u64>,
}

/// A single retrievable fact passage for question answering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: u64,
    pub title: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_attrs: usize,
    pub n_filler_articles: usize,
    /// Fact articles written per entity, each listing its facts in a fresh order.
    pub articles_per_entity: usize,
    /// Fraction of entities whose facts are held out of training.
    pub heldout_fraction: f64,
    pub filler_len: (usize, usize),
    /// Distinct values per value type available to training facts.
    pub value_pool: usize,
    /// Distinct values per value type reserved for held-out facts.
    pub heldout_value_pool: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_entities: 40,
            n_attrs: 4,
            n_filler_articles: 20,
            articles_per_entity: 3,
            heldout_fraction: 0.25,
            filler_len: (16, 32),
            value_pool: 200,
            heldout_value_pool: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    /// Parallel to `articles`.
    pub article_heldout: Vec<bool>,
    pub qa: Vec<QaExample>,
    /// One passage per fact, id = fact id.
    pub passages: Vec<Passage>,
    /// Every value token assigned to a held-out fact.
    pub heldout_values: BTreeSet<String>,
}

const FUNCTION_FILLER: &[&str] = &[
    "the", "a", "an", "of", "to", "in", "and", "or", "for", "with", "on", "at", "by", "from", "as", "but", "is",
    "was", "it", "that", "this", "be", "are", "not",
];
const CONTENT_FILLER: &[&str] = &[
    "river", "market", "garden", "window", "music", "winter", "stone", "letter", "forest", "engine", "harbor",
    "paper", "silver", "morning", "village", "road", "table", "light", "story", "bridge", "cloud", "field",
    "mountain", "school", "painter", "travel", "kitchen", "season",
];
const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ru", "ze", "vo", "ti", "na", "pe", "qu", "sa", "do", "fi", "gu"];

pub fn entity_name(i: usize) -> String {
    format!("e{i}")
}

pub fn attr_name(j: usize) -> String {
    format!("a{j}")
}

pub fn fact_sentence(entity: usize, attr: usize, value: &str) -> String {
    format!("entity {} attribute {} value {value} .", entity_name(entity), attr_name(attr))
}

pub fn qa_question(entity: usize, attr: usize) -> String {
    format!("what is {} of {}", attr_name(attr), entity_name(entity))
}

/// Deterministic pools of numeric and pseudo-word values; the first
/// `train` entries of each pool are for training facts, the rest held out.
fn value_pools(rng: &mut ChaCha8Rng, size: usize) -> (Vec<String>, Vec<String>) {
    let mut nums: Vec<String> = (100..1000).map(|v| v.to_string()).collect();
    nums.shuffle(rng);
    nums.truncate(size);
    let mut words = BTreeSet::new();
    while words.len() < size {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        words.insert(w);
    }
    let mut words: Vec<String> = words.into_iter().collect();
    words.shuffle(rng);
    (nums, words)
}

/// Generates fact articles, filler articles, per-fact passages and QA pairs.
/// Held-out entities draw their values from a reserved part of the value
/// alphabet, so those tokens occur only in held-out articles and passages.
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.n_entities == 0 || cfg.n_attrs == 0 || cfg.articles_per_entity == 0 {
        return Err(Error::input("synthetic corpus counts must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(Error::input("heldout_fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_heldout = ((cfg.n_entities as f64) * cfg.heldout_fraction).round() as usize;
    let n_train = cfg.n_entities - n_heldout;
    let (pool_train, pool_heldout) = (cfg.value_pool, cfg.heldout_value_pool);
    if pool_train == 0 || pool_heldout == 0 || pool_train + pool_heldout > 900 {
        return Err(Error::input("value pools must be non-empty and hold at most 900 values together"));
    }
    let (nums, words) = value_pools(&mut rng, pool_train + pool_heldout);

    let mut values = vec![vec![String::new(); cfg.n_attrs]; cfg.n_entities];
    let mut heldout_values = BTreeSet::new();
    for (e, row) in values.iter_mut().enumerate() {
        let heldout = e >= n_train;
        let range = if heldout { pool_train..pool_train + pool_heldout } else { 0..pool_train };
        for (a, v) in row.iter_mut().enumerate() {
            let pool = if a % 2 == 0 { &nums } else { &words };
            *v = pool[rng.gen_range(range.clone())].clone();
            if heldout {
                heldout_values.insert(v.clone());
            }
        }
    }

    let mut articles = Vec::new();
    let mut article_heldout = Vec::new();
    for (e, row) in values.iter().enumerate() {
        for _ in 0..cfg.articles_per_entity {
            let mut order: Vec<usize> = (0..cfg.n_attrs).collect();
            order.shuffle(&mut rng);
            let text: Vec<String> = order.iter().map(|&a| fact_sentence(e, a, &row[a])).collect();
            articles.push(Article { id: articles.len() as u64, text: text.join(" "), title: Some(entity_name(e)) });
            article_heldout.push(e >= n_train);
        }
    }
    for _ in 0..cfg.n_filler_articles {
        let len = rng.gen_range(cfg.filler_len.0..=cfg.filler_len.1.max(cfg.filler_len.0));
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    *FUNCTION_FILLER.choose(&mut rng).expect("non-empty")
                } else {
                    *CONTENT_FILLER.choose(&mut rng).expect("non-empty")
                }
            })
            .collect();
        articles.push(Article { id: articles.len() as u64, text: words.join(" ") + " .", title: None });
        article_heldout.push(false);
    }

    let mut qa = Vec::new();
    let mut passages = Vec::new();
    for (e, row) in values.iter().enumerate() {
        for (a, v) in row.iter().enumerate() {
            let fact_id = (e * cfg.n_attrs + a) as u64;
            passages.push(Passage { id: fact_id, title: entity_name(e), source: fact_sentence(e, a, v) });
            qa.push(QaExample {
                question: qa_question(e, a),
                answer: v.clone(),
                heldout: e >= n_train,
                fact_id,
                context_pool: Vec::new(),
            });
        }
    }
    Ok(SyntheticCorpus { articles, article_heldout, qa, passages, heldout_values })
}

/// "Short answer" rule: at most five whitespace-delimited tokens.
pub fn is_short_answer(answer: &str) -> bool {
    answer.split_whitespace().count() <= 5
}

pub fn qa_prompt_text(question: &str) -> String {
    format!("question: {question} \n answer:")
}

pub fn qa_context_text(title: &str, source: &str) -> String {
    format!("title: {title} source: {source}")
}

/// Prompt tokens (no loss) and target tokens (answer followed by EOS).
/// Without an answer the target is empty, which is how evaluation prompts
/// are built.
pub fn format_qa(vocab: &Vocabulary, question: &str, answer: Option<&str>) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    if question.trim().is_empty() {
        return Err(Error::input("empty question"));
    }
    let prompt = vocab.tokenize(&qa_prompt_text(question));
    let target = match answer {
        Some(a) => {
            let mut t = vocab.tokenize(a);
            if t.is_empty() {
                return Err(Error::input("empty answer in training mode"));
            }
            t.push(EOS);
            t
        }
        None => Vec::new(),
    };
    Ok((prompt, target))
}

/// Context passage tokens padded or trimmed to exactly `len`.
pub fn format_qa_context(vocab: &Vocabulary, title: &str, source: &str, len: usize) -> Vec<TokenId> {
    let mut t = vocab.tokenize(&qa_context_text(title, source));
    t.resize(len, PAD);
    t
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let v = Vocabulary::build(&["a b", "b c"]).unwrap();
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(v.size(), 7);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(Vocabulary::build(&[""]).is_err());
        assert!(Vocabulary::build::<&str>(&[]).is_err());
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = ["the cat sat", "on the mat ."];
        assert_eq!(Vocabulary::build(&corpus).unwrap(), Vocabulary::build(&corpus).unwrap());
    }

    #[test]
    fn tokenize_handles_unknowns_and_empty() {
        let v = Vocabulary::build(&["a b"]).unwrap();
        assert_eq!(v.tokenize("a b"), vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(v.tokenize("zzz-unseen"), vec![UNK, UNK, UNK]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn detokenize_inverts_tokenize_up_to_normalization() {
        let text = "Hello, World!  the  END.";
        let v = Vocabulary::build(&[text]).unwrap();
        assert_eq!(v.detokenize(&v.tokenize(text)), "hello , world ! the end .");
    }

    #[test]
    fn chunking_130_tokens() {
        let toks: Vec<TokenId> = (0..130).map(|i| 4 + i as TokenId).collect();
        let ex = chunk_article(&toks, 64, 448, 0).unwrap();
        assert_eq!(ex.len(), 3);
        let tlen: Vec<usize> = ex.iter().map(|e| content(&e.target).count()).collect();
        let ilen: Vec<usize> = ex.iter().map(|e| content(&e.input).count()).collect();
        assert_eq!(tlen, vec![64, 64, 2]);
        assert_eq!(ilen, vec![0, 64, 128]);
        assert!(ex.iter().all(|e| e.input.len() == 448 && e.target.len() == 64));
        // left padding: content sits at the end of the input
        assert_eq!(ex[1].input[447], toks[63]);
        assert_eq!(ex[1].input[448 - 64], toks[0]);
    }

    #[test]
    fn chunking_single_block_and_empty() {
        let toks: Vec<TokenId> = (0..64).map(|i| 4 + i as TokenId).collect();
        let ex = chunk_article(&toks, 64, 448, 0).unwrap();
        assert_eq!(ex.len(), 1);
        assert!(ex[0].input.iter().all(|&t| t == PAD));
        assert!(chunk_article(&[], 64, 448, 0).unwrap().is_empty());
    }

    #[test]
    fn window_starts() {
        let toks: Vec<TokenId> = (0..130).map(|i| 4 + i as TokenId).collect();
        let w = build_context_windows(&toks, 512, 64, 0).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 64, 128]);
        let toks: Vec<TokenId> = vec![9; 512];
        assert_eq!(build_context_windows(&toks, 512, 64, 0).unwrap().len(), 8);
        let w = build_context_windows(&[7], 512, 64, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens.iter().filter(|&&t| t == PAD).count(), 511);
        assert!(build_context_windows(&toks, 32, 64, 0).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_sized() {
        let cfg = SynthConfig { seed: 1, ..Default::default() };
        let a = gen_synthetic_corpus(&cfg).unwrap();
        let b = gen_synthetic_corpus(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let small = gen_synthetic_corpus(&SynthConfig {
            n_entities: 2,
            n_attrs: 2,
            heldout_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(small.qa.len(), 4);
    }

    #[test]
    fn qa_formatting_uses_literal_templates() {
        let v = Vocabulary::build(&["question: who \n answer: x title: t source: s"]).unwrap();
        let (p, t) = format_qa(&v, "who", Some("x")).unwrap();
        assert_eq!(v.detokenize(&p), "question : who answer :");
        assert_eq!(t, vec![v.id("x").unwrap(), EOS]);
        assert_eq!(qa_prompt_text("who"), "question: who \n answer:");
        let c = format_qa_context(&v, "T", "S", 8);
        assert_eq!(c.len(), 8);
        assert_eq!(v.detokenize(&c), "title : t source : s");
        assert!(format_qa(&v, "who", Some("")).is_err());
        assert!(!is_short_answer("one two three four five six"));
        assert!(is_short_answer("one two three four five"));
    }
}
