//! Dual-encoder embedder: mean-pooled token embeddings followed by a linear
//! projection. Query and document towers share weights unless configured
//! otherwise; similarity is the raw inner product.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::corpus::{content_vec, TokenId};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Document,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    /// Output dimensionality.
    pub dim: usize,
    pub max_len: usize,
    pub shared: bool,
}

impl EmbedderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EmbedderConfig { vocab_size, hidden: 64, dim: 32, max_len: 512, shared: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(Error::config("embedder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Tower {
    emb: usize,
    proj: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<T> {
    pub config: EmbedderConfig,
    pub params: ParamSet<T>,
    query: Tower,
    doc: Tower,
}

impl<T: Scalar> Embedder<T> {
    pub fn init(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut tower = |prefix: &str, params: &mut ParamSet<T>| Tower {
            emb: params.push(format!("{prefix}.emb"), uniform(&mut rng, config.vocab_size, config.hidden, 1.0)),
            proj: params.push(
                format!("{prefix}.proj"),
                uniform(&mut rng, config.hidden, config.dim, 1.0 / (config.hidden as f64).sqrt()),
            ),
            bias: params.push(format!("{prefix}.bias"), Array2::zeros((1, config.dim))),
        };
        let query = tower("q", &mut params);
        let doc = if config.shared { query } else { tower("d", &mut params) };
        Ok(Embedder { config, params, query, doc })
    }

    /// Rebuilds an embedder around loaded parameters, checking names and shapes.
    pub fn from_params(config: EmbedderConfig, params: ParamSet<T>) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        if fresh.params.names() != params.names()
            || fresh.params.iter().zip(params.iter()).any(|((_, a), (_, b))| a.dim() != b.dim())
        {
            return Err(Error::input("embedder parameters do not match the configuration"));
        }
        fresh.params = params;
        Ok(fresh)
    }

    fn tower(&self, role: Role) -> Tower {
        match role {
            Role::Query => self.query,
            Role::Document => self.doc,
        }
    }

    fn check(&self, seq: &[TokenId]) -> Result<Vec<usize>> {
        let ids = content_vec(seq);
        if ids.len() > self.config.max_len {
            return Err(Error::input(format!("sequence of {} tokens exceeds embedder max_len {}", ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside vocabulary")));
        }
        Ok(ids.into_iter().map(|t| t as usize).collect())
    }

    /// Records the embedding of `seq` as a `1 × dim` node.
    pub fn embed_node(&self, tape: &mut Tape<'_, T>, seq: &[TokenId], role: Role) -> Result<NodeId> {
        let ids = self.check(seq)?;
        let tw = self.tower(role);
        let pooled = if ids.is_empty() {
            tape.constant(Array2::zeros((1, self.config.hidden)))
        } else {
            let g = tape.gather(tw.emb, &ids);
            tape.mean_rows(g)
        };
        let proj = tape.param(tw.proj);
        let bias = tape.param(tw.bias);
        let h = tape.matmul(pooled, proj);
        Ok(tape.add_row(h, bias))
    }

    pub fn embed(&self, seq: &[TokenId], role: Role) -> Result<Array1<T>> {
        let mut tape = Tape::new(&self.params);
        let n = self.embed_node(&mut tape, seq, role)?;
        Ok(tape.value(n).row(0).to_owned())
    }

    pub fn embed_all(&self, seqs: &[Vec<TokenId>], role: Role) -> Result<Array2<T>> {
        let mut out = Array2::zeros((seqs.len(), self.config.dim));
        for (i, s) in seqs.iter().enumerate() {
            out.row_mut(i).assign(&self.embed(s, role)?);
        }
        Ok(out)
    }
}

/// One retriever training example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTriple {
    pub query: Vec<TokenId>,
    pub positive: Vec<TokenId>,
    pub hard_negative: Option<Vec<TokenId>>,
}

/// Records the in-batch softmax loss: every query scores all positives and
/// all hard negatives in the batch, and the loss is the mean of
/// `-log softmax` at the query's own positive.
pub fn in_batch_softmax_node<T: Scalar>(
    embedder: &Embedder<T>,
    tape: &mut Tape<'_, T>,
    batch: &[RetrievalTriple],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::input("in-batch softmax needs at least one example"));
    }
    let mut queries = Vec::with_capacity(batch.len());
    let mut cands = Vec::with_capacity(batch.len() * 2);
    for ex in batch {
        queries.push(embedder.embed_node(tape, &ex.query, Role::Query)?);
        cands.push(embedder.embed_node(tape, &ex.positive, Role::Document)?);
    }
    for ex in batch {
        if let Some(neg) = &ex.hard_negative {
            cands.push(embedder.embed_node(tape, neg, Role::Document)?);
        }
    }
    let q = tape.concat_rows(&queries);
    let cand = tape.concat_rows(&cands);
    let scores = tape.matmul_t(q, cand);
    let targets: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
    let total = tape.nll(scores, &targets);
    Ok(tape.scale(total, T::one() / c::<T>(batch.len() as f64)))
}

pub fn in_batch_softmax_loss<T: Scalar>(embedder: &Embedder<T>, batch: &[RetrievalTriple]) -> Result<T> {
    let mut tape = Tape::new(&embedder.params);
    let n = in_batch_softmax_node(embedder, &mut tape, batch)?;
    Ok(tape.value(n)[[0, 0]])
}

pub fn in_batch_softmax_grad<T: Scalar>(embedder: &Embedder<T>, batch: &[RetrievalTriple]) -> Result<(T, ParamSet<T>)> {
    let mut tape = Tape::new(&embedder.params);
    let n = in_batch_softmax_node(embedder, &mut tape, batch)?;
    Ok((tape.value(n)[[0, 0]], tape.backward(n)))
}

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| c::<T>(rng.gen_range(-bound..bound)))
}
