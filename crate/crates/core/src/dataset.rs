//! Turns a synthetic corpus into language-modeling triplets and QA items.
//!
//! Fact articles of held-out entities, plus every fifth filler article, form
//! the evaluation split; everything else is training data. All article
//! windows form one retrieval database. Language-modeling contexts come from
//! BM25 over the input tokens and never include windows of the example's own
//! article. QA contexts are the top passages for the question.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::value;
use crate::corpus::{
    build_context_windows, chunk_article, content_vec, format_qa, format_qa_context, gen_synthetic_corpus, qa_context_text,
    qa_prompt_text, ContextWindow, EOS, SynthConfig, SyntheticCorpus, TokenId, Triplet, Vocabulary,
};
use crate::error::{Error, Result};
use crate::retrieval::Bm25Index;
use crate::training::QaItem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Target block length `s`.
    pub chunk_len: usize,
    /// Input length `n`.
    pub input_len: usize,
    /// Context window length `w`.
    pub window: usize,
    pub stride: usize,
    /// Contexts per example.
    pub k: usize,
    /// Ranked candidates kept per example for triplet selection and
    /// grounded analysis.
    pub candidates: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            chunk_len: 8,
            input_len: 24,
            window: 32,
            stride: 16,
            k: 2,
            candidates: 8,
        }
    }
}

impl DataConfig {
    pub fn apply(&mut self, key: &str, line: usize, raw: &str) -> Result<bool> {
        match key {
            "chunk_len" => self.chunk_len = value(key, line, raw)?,
            "input_len" => self.input_len = value(key, line, raw)?,
            "window" => self.window = value(key, line, raw)?,
            "stride" => self.stride = value(key, line, raw)?,
            "k" => self.k = value(key, line, raw)?,
            "candidates" => self.candidates = value(key, line, raw)?,
            "n_entities" => self.synth.n_entities = value(key, line, raw)?,
            "n_attrs" => self.synth.n_attrs = value(key, line, raw)?,
            "n_filler_articles" => self.synth.n_filler_articles = value(key, line, raw)?,
            "articles_per_entity" => self.synth.articles_per_entity = value(key, line, raw)?,
            "heldout_fraction" => self.synth.heldout_fraction = value(key, line, raw)?,
            "filler_min" => self.synth.filler_len.0 = value(key, line, raw)?,
            "filler_max" => self.synth.filler_len.1 = value(key, line, raw)?,
            "value_pool" => self.synth.value_pool = value(key, line, raw)?,
            "heldout_value_pool" => self.synth.heldout_value_pool = value(key, line, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.window == 0 || self.k == 0 {
            return Err(Error::config("chunk_len, window and k must be at least 1"));
        }
        if self.candidates <= self.k {
            return Err(Error::config("candidates must exceed k"));
        }
        Ok(())
    }
}

/// A QA item with its full ranked passage list; the item's contexts are the
/// first `k` of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaCase {
    pub item: QaItem,
    pub candidates: Vec<(u64, Vec<TokenId>)>,
}

/// A language-modeling triplet with its ranked candidate windows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmCase {
    pub triplet: Triplet,
    pub article_id: u64,
    pub candidates: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub corpus: SyntheticCorpus,
    pub vocab: Vocabulary,
    pub windows: Vec<ContextWindow>,
    pub window_index: Bm25Index,
    pub lm_train: Vec<LmCase>,
    pub lm_eval: Vec<LmCase>,
    /// Formatted passages, id = position.
    pub passages: Vec<Vec<TokenId>>,
    pub qa_train: Vec<QaCase>,
    /// Questions about held-out entities.
    pub qa_eval: Vec<QaCase>,
}

/// Whether an article belongs to the evaluation split.
pub fn is_eval_article(corpus: &SyntheticCorpus, i: usize) -> bool {
    if corpus.article_heldout[i] {
        return true;
    }
    let first_filler = corpus.articles.iter().position(|a| a.title.is_none()).unwrap_or(corpus.articles.len());
    i >= first_filler && (i - first_filler) % 5 == 4
}

/// Every text the vocabulary must cover.
pub fn vocabulary_texts(corpus: &SyntheticCorpus) -> Vec<String> {
    let mut texts: Vec<String> = corpus.articles.iter().map(|a| a.text.clone()).collect();
    texts.extend(corpus.passages.iter().map(|p| qa_context_text(&p.title, &p.source)));
    texts.extend(corpus.qa.iter().map(|q| qa_prompt_text(&q.question)));
    texts
}

impl Dataset {
    pub fn build(config: DataConfig) -> Result<Self> {
        config.validate()?;
        let corpus = gen_synthetic_corpus(&config.synth)?;
        Self::from_corpus(config, corpus)
    }

    pub fn from_corpus(config: DataConfig, corpus: SyntheticCorpus) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(&vocabulary_texts(&corpus))?;
        let tokens: Vec<Vec<TokenId>> = corpus.articles.iter().map(|a| vocab.tokenize(&a.text)).collect();
        let mut windows = Vec::new();
        for (a, t) in corpus.articles.iter().zip(&tokens) {
            windows.extend(build_context_windows(t, config.window, config.stride, a.id)?);
        }
        let window_index = Bm25Index::build(&windows.iter().map(|w| w.tokens.clone()).collect::<Vec<_>>())?;

        let (mut lm_train, mut lm_eval) = (Vec::new(), Vec::new());
        for (i, (a, t)) in corpus.articles.iter().zip(&tokens).enumerate() {
            for ex in chunk_article(t, config.chunk_len, config.input_len, a.id)? {
                let query = content_vec(&ex.input);
                let ranked: Vec<u64> = window_index
                    .topk_excluding(&query, config.candidates, |d| windows[d].article_id == a.id)
                    .into_iter()
                    .map(|(d, _)| d as u64)
                    .collect();
                let contexts = ranked.iter().take(config.k).map(|&d| (d, windows[d as usize].tokens.clone())).collect();
                let case = LmCase {
                    triplet: Triplet { input: ex.input, target: ex.target, contexts },
                    article_id: a.id,
                    candidates: ranked,
                };
                if is_eval_article(&corpus, i) {
                    lm_eval.push(case);
                } else {
                    lm_train.push(case);
                }
            }
        }

        let passages: Vec<Vec<TokenId>> =
            corpus.passages.iter().map(|p| format_qa_context(&vocab, &p.title, &p.source, config.window)).collect();
        let passage_index = Bm25Index::build(&passages)?;
        let (mut qa_train, mut qa_eval) = (Vec::new(), Vec::new());
        for q in &corpus.qa {
            let (prompt, target) = format_qa(&vocab, &q.question, Some(&q.answer))?;
            let candidates: Vec<(u64, Vec<TokenId>)> = passage_index
                .topk(&vocab.tokenize(&q.question), config.candidates)
                .into_iter()
                .map(|(d, _)| (d as u64, passages[d].clone()))
                .collect();
            let triplet = Triplet { input: prompt, target, contexts: candidates[..config.k.min(candidates.len())].to_vec() };
            let case = QaCase { item: QaItem { triplet, answer: q.answer.clone() }, candidates };
            if q.heldout {
                qa_eval.push(case);
            } else {
                qa_train.push(case);
            }
        }
        Ok(Dataset { config, corpus, vocab, windows, window_index, lm_train, lm_eval, passages, qa_train, qa_eval })
    }

    pub fn lm_train_triplets(&self) -> Vec<Triplet> {
        self.lm_train.iter().map(|c| c.triplet.clone()).collect()
    }

    pub fn lm_eval_triplets(&self) -> Vec<Triplet> {
        self.lm_eval.iter().map(|c| c.triplet.clone()).collect()
    }

    pub fn qa_train_triplets(&self) -> Vec<Triplet> {
        self.qa_train.iter().map(|c| c.item.triplet.clone()).collect()
    }

    pub fn qa_eval_items(&self) -> Vec<QaItem> {
        self.qa_eval.iter().map(|c| c.item.clone()).collect()
    }
}

/// Each case's item (when `keep_original`) followed by `copies` rewrites in
/// which the answer value is swapped, in the target and in every context,
/// for another answer value of the same kind drawn from `cases`. Rewritten
/// answers cannot be recalled from memory and must be read from the
/// contexts. Cases whose answer is not a single token are kept unchanged.
/// When `pool` is given, replacements come from it instead, skipping tokens
/// already present in the input or contexts.
pub fn counterfactual_qa(
    cases: &[QaCase],
    vocab: &Vocabulary,
    copies: usize,
    seed: u64,
    keep_original: bool,
    pool: Option<&[TokenId]>,
) -> Vec<QaItem> {
    let answer = |c: &QaCase| -> Option<TokenId> {
        match content_vec(&c.item.triplet.target)[..] {
            [a, EOS] => Some(a),
            _ => None,
        }
    };
    let is_num = |t: TokenId| vocab.token(t).bytes().all(|b| b.is_ascii_digit());
    let mut pools: [Vec<TokenId>; 2] = Default::default();
    for a in cases.iter().filter_map(answer) {
        pools[is_num(a) as usize].push(a);
    }
    for p in &mut pools {
        p.sort_unstable();
        p.dedup();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len() * (copies + 1));
    for case in cases {
        if keep_original {
            out.push(case.item.clone());
        }
        let Some(a) = answer(case) else { continue };
        let t = &case.item.triplet;
        let present = |b: TokenId| t.input.contains(&b) || t.contexts.iter().any(|(_, c)| c.contains(&b));
        for _ in 0..copies {
            let b = match pool {
                Some(p) if p.iter().any(|&b| !present(b)) => loop {
                    let b = *p.choose(&mut rng).expect("non-empty pool");
                    if !present(b) {
                        break b;
                    }
                },
                _ => *pools[is_num(a) as usize].choose(&mut rng).expect("pool holds the answer itself"),
            };
            let swap = |seq: &Vec<TokenId>| seq.iter().map(|&x| if x == a { b } else { x }).collect::<Vec<_>>();
            let triplet = Triplet {
                input: t.input.clone(),
                target: swap(&t.target),
                contexts: t.contexts.iter().map(|(id, c)| (*id, swap(c))).collect(),
            };
            out.push(QaItem { triplet, answer: vocab.token(b).to_string() });
        }
    }
    out
}
