//! Toy encoder-decoder transformer.
//!
//! Every retrieved context is encoded on its own (positions restart at zero
//! and attention never crosses contexts). The decoder runs causal
//! self-attention over `BOS ++ x ++ y` and, when encodings are supplied,
//! cross-attends to their row-wise concatenation. PAD rows never enter the
//! computation: only content rows are encoded or attended to, and stored
//! encodings carry zero rows at PAD positions.

pub mod checkpoint;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Mask, NodeId, ParamSet, Tape};
use crate::corpus::{content_vec, TokenId, Triplet, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::retrieval::dense::uniform;
use crate::scalar::{c, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Context window length `w`.
    pub max_ctx_len: usize,
    /// Input length `n`.
    pub max_input_len: usize,
    /// Target length `s`.
    pub max_target_len: usize,
    pub k_contexts: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_ctx_len: 512,
            max_input_len: 448,
            max_target_len: 64,
            k_contexts: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIAL {
            return Err(Error::config("vocabulary too small"));
        }
        if self.d_ff == 0 || self.max_ctx_len == 0 || self.max_input_len == 0 || self.max_target_len == 0 {
            return Err(Error::config("lengths and d_ff must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn max_positions(&self) -> usize {
        self.max_ctx_len.max(1 + self.max_input_len + self.max_target_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Vec<Head>,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Vec<Head>,
    ln_cross: Norm,
    cross_attn: Vec<Head>,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embed: usize,
    out_bias: usize,
    enc: Vec<EncoderLayer>,
    enc_norm: Norm,
    dec: Vec<DecoderLayer>,
    dec_norm: Norm,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Token embedding (tied with the output projection) and output bias.
    Shared,
    Encoder,
    Decoder,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("enc.") {
        ParamGroup::Encoder
    } else if name.starts_with("dec.") {
        ParamGroup::Decoder
    } else {
        ParamGroup::Shared
    }
}

/// Encoder output for one context: `w × d_model`, zero rows past `content_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<T> {
    pub context_id: u64,
    pub states: Array2<T>,
    pub content_len: usize,
}

impl<T: Scalar> Encoding<T> {
    pub fn content(&self) -> ArrayView2<'_, T> {
        self.states.slice(s![..self.content_len, ..])
    }

    pub fn is_fully_masked(&self) -> bool {
        self.content_len == 0
    }

    /// Row `i` is a PAD row.
    pub fn is_masked(&self, row: usize) -> bool {
        row >= self.content_len
    }
}

/// A retrieved context handed to the model as raw tokens.
#[derive(Clone, Copy, Debug)]
pub struct ContextRef<'a> {
    pub id: u64,
    pub tokens: &'a [TokenId],
}

/// One training or scoring example. Loss is taken on the non-PAD tokens of
/// `target` only.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub input: &'a [TokenId],
    pub target: &'a [TokenId],
    pub contexts: Vec<ContextRef<'a>>,
}

impl Triplet {
    pub fn example(&self) -> Example<'_> {
        Example {
            input: &self.input,
            target: &self.target,
            contexts: self.contexts.iter().map(|(id, t)| ContextRef { id: *id, tokens: t }).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layout: Layout,
    positions: Array2<T>,
}

/// Name of the tied token embedding table.
pub const EMBED_PARAM: &str = "embed";

impl<T: Scalar> Model<T> {
    /// Linear maps are uniform in `±1/sqrt(fan_in)`, the token table in
    /// `±sqrt(3/d_model)`, gains are one and biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.d_model;
        let dh = config.head_dim();
        let embed = p.push(EMBED_PARAM, uniform(&mut rng, config.vocab_size, d, (3.0 / d as f64).sqrt()));
        let out_bias = p.push("out.bias", Array2::zeros((1, config.vocab_size)));

        let norm = |p: &mut ParamSet<T>, name: String| Norm {
            gain: p.push(format!("{name}.g"), Array2::ones((1, d))),
            bias: p.push(format!("{name}.b"), Array2::zeros((1, d))),
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut linear = |p: &mut ParamSet<T>, name: String, rows: usize, cols: usize| {
            p.push(name, uniform(&mut rng2, rows, cols, 1.0 / (rows as f64).sqrt()))
        };
        let heads = |p: &mut ParamSet<T>, linear: &mut dyn FnMut(&mut ParamSet<T>, String, usize, usize) -> usize, prefix: String| {
            (0..config.n_heads)
                .map(|h| Head {
                    q: linear(p, format!("{prefix}.h{h}.q"), d, dh),
                    k: linear(p, format!("{prefix}.h{h}.k"), d, dh),
                    v: linear(p, format!("{prefix}.h{h}.v"), d, dh),
                    o: linear(p, format!("{prefix}.h{h}.o"), dh, d),
                })
                .collect::<Vec<_>>()
        };
        let ff = |p: &mut ParamSet<T>, linear: &mut dyn FnMut(&mut ParamSet<T>, String, usize, usize) -> usize, prefix: String| {
            FeedForward {
                w1: linear(p, format!("{prefix}.w1"), d, config.d_ff),
                b1: p.push(format!("{prefix}.b1"), Array2::zeros((1, config.d_ff))),
                w2: linear(p, format!("{prefix}.w2"), config.d_ff, d),
                b2: p.push(format!("{prefix}.b2"), Array2::zeros((1, d))),
            }
        };

        let mut enc = Vec::new();
        for l in 0..config.n_enc_layers {
            let ln_attn = norm(&mut p, format!("enc.{l}.ln_attn"));
            let attn = heads(&mut p, &mut linear, format!("enc.{l}.attn"));
            let ln_ff = norm(&mut p, format!("enc.{l}.ln_ff"));
            let ff = ff(&mut p, &mut linear, format!("enc.{l}.ff"));
            enc.push(EncoderLayer { ln_attn, attn, ln_ff, ff });
        }
        let enc_norm = norm(&mut p, "enc.ln".into());
        let mut dec = Vec::new();
        for l in 0..config.n_dec_layers {
            let ln_self = norm(&mut p, format!("dec.{l}.ln_self"));
            let self_attn = heads(&mut p, &mut linear, format!("dec.{l}.self"));
            let ln_cross = norm(&mut p, format!("dec.{l}.ln_cross"));
            let cross_attn = heads(&mut p, &mut linear, format!("dec.{l}.cross"));
            let ln_ff = norm(&mut p, format!("dec.{l}.ln_ff"));
            let ff = ff(&mut p, &mut linear, format!("dec.{l}.ff"));
            dec.push(DecoderLayer { ln_self, self_attn, ln_cross, cross_attn, ln_ff, ff });
        }
        let dec_norm = norm(&mut p, "dec.ln".into());

        let positions = sinusoid(config.max_positions(), d);
        Ok(Model { config, params: p, layout: Layout { embed, out_bias, enc, enc_norm, dec, dec_norm }, positions })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        if m.params.names() != params.names()
            || m.params.iter().zip(params.iter()).any(|((_, a), (_, b))| a.dim() != b.dim())
        {
            return Err(Error::input("parameters do not match the model configuration"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            positions: self.positions.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0))),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::input(format!("token id {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    fn embed_tokens(&self, tape: &mut Tape<'_, T>, ids: &[usize], positions: &[usize]) -> NodeId {
        let g = tape.gather(self.layout.embed, ids);
        let g = tape.scale(g, c::<T>((self.config.d_model as f64).sqrt()));
        let mut pe = Array2::zeros((ids.len(), self.config.d_model));
        for (r, &p) in positions.iter().enumerate() {
            pe.row_mut(r).assign(&self.positions.row(p));
        }
        let pe = tape.constant(pe);
        tape.add(g, pe)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: NodeId, n: &Norm) -> NodeId {
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape<'_, T>, heads: &[Head], query: NodeId, memory: NodeId, mask: &Mask) -> NodeId {
        let scale = c::<T>(1.0 / (self.config.head_dim() as f64).sqrt());
        let mut out = None;
        for h in heads {
            let wq = tape.param(h.q);
            let wk = tape.param(h.k);
            let wv = tape.param(h.v);
            let wo = tape.param(h.o);
            let q = tape.matmul(query, wq);
            let k = tape.matmul(memory, wk);
            let v = tape.matmul(memory, wv);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, mask);
            let mixed = tape.matmul(probs, v);
            let projected = tape.matmul(mixed, wo);
            out = Some(match out {
                None => projected,
                Some(acc) => tape.add(acc, projected),
            });
        }
        out.expect("at least one head")
    }

    fn feed_forward(&self, tape: &mut Tape<'_, T>, x: NodeId, ff: &FeedForward) -> NodeId {
        let w1 = tape.param(ff.w1);
        let b1 = tape.param(ff.b1);
        let w2 = tape.param(ff.w2);
        let b2 = tape.param(ff.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Encoder over one or more concatenated segments with attention
    /// confined to each segment.
    fn encoder_node(&self, tape: &mut Tape<'_, T>, ids: &[usize], positions: &[usize], mask: &Mask) -> NodeId {
        let mut h = self.embed_tokens(tape, ids, positions);
        for layer in &self.layout.enc {
            let a = self.norm(tape, h, &layer.ln_attn);
            let a = self.attention(tape, &layer.attn, a, a, mask);
            h = tape.add(h, a);
            let f = self.norm(tape, h, &layer.ln_ff);
            let f = self.feed_forward(tape, f, &layer.ff);
            h = tape.add(h, f);
        }
        self.norm(tape, h, &self.layout.enc_norm)
    }

    /// Content length of a context; PAD may only appear as trailing padding.
    fn context_content(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        if tokens.len() != self.config.max_ctx_len {
            return Err(Error::input(format!(
                "context has length {}, expected {}",
                tokens.len(),
                self.config.max_ctx_len
            )));
        }
        self.check_ids(tokens)?;
        let len = tokens.iter().position(|&t| t == PAD).unwrap_or(tokens.len());
        if tokens[len..].iter().any(|&t| t != PAD) {
            return Err(Error::input("context has interior padding"));
        }
        Ok(tokens[..len].iter().map(|&t| t as usize).collect())
    }

    /// Records the content rows of one context's encoding, or `None` for an
    /// all-PAD context.
    pub fn encode_node(&self, tape: &mut Tape<'_, T>, tokens: &[TokenId]) -> Result<Option<NodeId>> {
        let ids = self.context_content(tokens)?;
        if ids.is_empty() {
            return Ok(None);
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        Ok(Some(self.encoder_node(tape, &ids, &positions, &Mask::None)))
    }

    fn to_encoding(&self, context_id: u64, content: ArrayView2<'_, T>) -> Encoding<T> {
        let mut states = Array2::zeros((self.config.max_ctx_len, self.config.d_model));
        states.slice_mut(s![..content.nrows(), ..]).assign(&content);
        Encoding { context_id, states, content_len: content.nrows() }
    }

    pub fn encode_context(&self, tokens: &[TokenId], context_id: u64) -> Result<Encoding<T>> {
        let mut tape = Tape::new(&self.params);
        Ok(match self.encode_node(&mut tape, tokens)? {
            Some(n) => self.to_encoding(context_id, tape.value(n)),
            None => self.to_encoding(context_id, Array2::zeros((0, self.config.d_model)).view()),
        })
    }

    /// Encodes several contexts in one pass over their concatenation with a
    /// block-diagonal attention mask.
    pub fn encode_batched(&self, contexts: &[ContextRef<'_>]) -> Result<Vec<Encoding<T>>> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut lens = Vec::new();
        for (seg, cr) in contexts.iter().enumerate() {
            let content = self.context_content(cr.tokens)?;
            lens.push(content.len());
            positions.extend(0..content.len());
            segments.extend(std::iter::repeat(seg).take(content.len()));
            ids.extend(content);
        }
        if ids.is_empty() {
            return contexts.iter().map(|cr| self.encode_context(cr.tokens, cr.id)).collect();
        }
        let mut tape = Tape::new(&self.params);
        let out = self.encoder_node(&mut tape, &ids, &positions, &Mask::Segments(segments));
        let all = tape.value(out);
        let mut start = 0;
        Ok(contexts
            .iter()
            .zip(lens)
            .map(|(cr, len)| {
                let e = self.to_encoding(cr.id, all.slice(s![start..start + len, ..]));
                start += len;
                e
            })
            .collect())
    }

    /// Records decoder logits for `seq` (already BOS-prefixed), with
    /// optional cross-attention memory.
    fn decoder_node(&self, tape: &mut Tape<'_, T>, seq: &[usize], memory: Option<NodeId>) -> NodeId {
        let positions: Vec<usize> = (0..seq.len()).collect();
        let mut h = self.embed_tokens(tape, seq, &positions);
        for layer in &self.layout.dec {
            let a = self.norm(tape, h, &layer.ln_self);
            let a = self.attention(tape, &layer.self_attn, a, a, &Mask::Causal);
            h = tape.add(h, a);
            if let Some(mem) = memory {
                let a = self.norm(tape, h, &layer.ln_cross);
                let a = self.attention(tape, &layer.cross_attn, a, mem, &Mask::None);
                h = tape.add(h, a);
            }
            let f = self.norm(tape, h, &layer.ln_ff);
            let f = self.feed_forward(tape, f, &layer.ff);
            h = tape.add(h, f);
        }
        let h = self.norm(tape, h, &self.layout.dec_norm);
        let e = tape.param(self.layout.embed);
        let logits = tape.matmul_t(h, e);
        let b = tape.param(self.layout.out_bias);
        tape.add_row(logits, b)
    }

    fn decoder_sequence(&self, x: &[TokenId], y: &[TokenId]) -> Result<(Vec<usize>, usize)> {
        self.check_ids(x)?;
        self.check_ids(y)?;
        let xc = content_vec(x);
        let yc = content_vec(y);
        if xc.len() > self.config.max_input_len {
            return Err(Error::input(format!("input has {} tokens, max {}", xc.len(), self.config.max_input_len)));
        }
        if yc.len() > self.config.max_target_len {
            return Err(Error::input(format!("target has {} tokens, max {}", yc.len(), self.config.max_target_len)));
        }
        let mut seq = Vec::with_capacity(1 + xc.len() + yc.len());
        seq.push(BOS as usize);
        seq.extend(xc.iter().map(|&t| t as usize));
        seq.extend(yc.iter().map(|&t| t as usize));
        Ok((seq, xc.len()))
    }

    /// Concatenates memory parts in ascending context-id order.
    fn memory_node(&self, tape: &mut Tape<'_, T>, mut parts: Vec<(u64, NodeId)>) -> Option<NodeId> {
        if parts.is_empty() {
            return None;
        }
        parts.sort_by_key(|p| p.0);
        let nodes: Vec<NodeId> = parts.into_iter().map(|p| p.1).collect();
        Some(if nodes.len() == 1 { nodes[0] } else { tape.concat_rows(&nodes) })
    }

    fn check_context_count(&self, n: usize) -> Result<()> {
        if n > self.config.k_contexts {
            return Err(Error::input(format!("{n} contexts supplied, model accepts at most {}", self.config.k_contexts)));
        }
        Ok(())
    }

    /// Logits for every position of `BOS ++ x ++ y_prefix` (PAD stripped);
    /// row `i` is the next-token distribution after position `i`. An empty
    /// encoding list runs the decoder without cross-attention.
    pub fn decode_logits(&self, x: &[TokenId], y_prefix: &[TokenId], encodings: &[Encoding<T>]) -> Result<Array2<T>> {
        self.check_context_count(encodings.len())?;
        let (seq, _) = self.decoder_sequence(x, y_prefix)?;
        let mut tape = Tape::new(&self.params);
        let parts: Vec<(u64, NodeId)> = encodings
            .iter()
            .filter(|e| !e.is_fully_masked())
            .map(|e| (e.context_id, tape.constant(e.content().to_owned())))
            .collect();
        let memory = self.memory_node(&mut tape, parts);
        let logits = self.decoder_node(&mut tape, &seq, memory);
        Ok(tape.value(logits).to_owned())
    }

    /// Greedy argmax decoding (ties to the lower id) until EOS or `max_len`
    /// tokens; each step re-runs [`Model::decode_logits`] on the prefix.
    pub fn greedy_decode(&self, x: &[TokenId], encodings: &[Encoding<T>], max_len: usize) -> Result<Vec<TokenId>> {
        let mut out: Vec<TokenId> = Vec::new();
        let max_len = max_len.min(self.config.max_target_len);
        while out.len() < max_len {
            let logits = self.decode_logits(x, &out, encodings)?;
            let next = argmax(logits.row(logits.nrows() - 1).iter().copied()) as TokenId;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Records the summed target NLL of one example and returns it with the
    /// number of scored tokens.
    pub fn example_loss_node(&self, tape: &mut Tape<'_, T>, ex: &Example<'_>, with_contexts: bool) -> Result<(NodeId, usize)> {
        let (seq, x_len) = self.decoder_sequence(ex.input, ex.target)?;
        let memory = if with_contexts {
            self.check_context_count(ex.contexts.len())?;
            let mut parts = Vec::new();
            for cr in &ex.contexts {
                if let Some(n) = self.encode_node(tape, cr.tokens)? {
                    parts.push((cr.id, n));
                }
            }
            self.memory_node(tape, parts)
        } else {
            None
        };
        let logits = self.decoder_node(tape, &seq, memory);
        let targets: Vec<(usize, usize)> = (1 + x_len..seq.len()).map(|p| (p - 1, seq[p])).collect();
        let n = targets.len();
        Ok((tape.nll(logits, &targets), n))
    }

    /// Mean NLL over the non-PAD target tokens of the batch.
    pub fn lm_loss(&self, batch: &[Example<'_>], with_contexts: bool) -> Result<T> {
        let mut total = T::zero();
        let mut count = 0;
        for ex in batch {
            let mut tape = Tape::new(&self.params);
            let (n, k) = self.example_loss_node(&mut tape, ex, with_contexts)?;
            total = total + tape.value(n)[[0, 0]];
            count += k;
        }
        if count == 0 {
            return Err(Error::input("batch has no non-PAD target tokens"));
        }
        Ok(total / c::<T>(count as f64))
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn grad(&self, batch: &[Example<'_>], with_contexts: bool) -> Result<(T, ParamSet<T>)> {
        let count: usize = batch.iter().map(|ex| ex.target.iter().filter(|&&t| t != PAD).count()).sum();
        if batch.is_empty() || count == 0 {
            return Err(Error::input("batch has no non-PAD target tokens"));
        }
        let inv = T::one() / c::<T>(count as f64);
        let mut g = self.params.zeros_like();
        let mut total = T::zero();
        for ex in batch {
            let mut tape = Tape::new(&self.params);
            let (n, _) = self.example_loss_node(&mut tape, ex, with_contexts)?;
            total = total + tape.value(n)[[0, 0]];
            tape.backward_into(n, inv, &mut g);
        }
        Ok((total * inv, g))
    }

    /// Natural-log probability of each non-PAD target token.
    pub fn target_log_probs(&self, x: &[TokenId], y: &[TokenId], encodings: &[Encoding<T>]) -> Result<Vec<T>> {
        let logits = self.decode_logits(x, y, encodings)?;
        let lp = log_softmax_rows(logits.view());
        let x_len = content_vec(x).len();
        Ok(content_vec(y).iter().enumerate().map(|(i, &t)| lp[[x_len + i, t as usize]]).collect())
    }

    /// Encodes raw contexts and scores the target with them.
    pub fn target_log_probs_with(&self, x: &[TokenId], y: &[TokenId], contexts: &[ContextRef<'_>]) -> Result<Vec<T>> {
        let encs = contexts.iter().map(|c| self.encode_context(c.tokens, c.id)).collect::<Result<Vec<_>>>()?;
        self.target_log_probs(x, y, &encs)
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|b| b.0).unwrap_or(0)
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        c::<T>(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests;
