//! Training loops for the language model, the dual-encoder retriever and
//! question answering.

pub mod optim;
pub mod qa;
pub mod retriever;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax_rows;
use crate::config::{flag, value};
use crate::corpus::{content_vec, Triplet};
use crate::error::{Error, Result};
use crate::autodiff::ParamSet;
use crate::model::{argmax, Example, Model, EMBED_PARAM};
use crate::scalar::Scalar;
use crate::utility::{proxy_utility, UtilityTable};

pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use qa::{exact_match, finetune_qa, normalize_answer, qa_exact_match, QaItem};
pub use retriever::train_retriever;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub sqrt_decay: bool,
    pub tail_steps: usize,
    pub tail_lr: f64,
    pub seed: u64,
    pub warm_start_fraction: f64,
    /// Leading steps drawn only from the warm-start subset.
    pub warm_start_steps: usize,
    /// Retrieved contexts per example.
    pub k: usize,
    pub optimizer: OptimizerKind,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Keeps the tied token embeddings at their initial values.
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 500,
            sqrt_decay: true,
            tail_steps: 0,
            tail_lr: 2e-4,
            seed: 0,
            warm_start_fraction: 0.1,
            warm_start_steps: 0,
            k: 2,
            optimizer: OptimizerKind::Adam,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 500,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "batch_size",
        "lr",
        "warmup_steps",
        "sqrt_decay",
        "tail_steps",
        "tail_lr",
        "seed",
        "warm_start_fraction",
        "warm_start_steps",
        "k",
        "optimizer",
        "adam_eps",
        "grad_clip",
        "eval_every",
        "freeze_embeddings",
    ];

    /// Sets one field from its config-file spelling; `false` for unknown keys.
    pub fn apply(&mut self, key: &str, line: usize, raw: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = value(key, line, raw)?,
            "batch_size" => self.batch_size = value(key, line, raw)?,
            "lr" => self.lr = value(key, line, raw)?,
            "warmup_steps" => self.warmup_steps = value(key, line, raw)?,
            "sqrt_decay" => self.sqrt_decay = flag(key, line, raw)?,
            "tail_steps" => self.tail_steps = value(key, line, raw)?,
            "tail_lr" => self.tail_lr = value(key, line, raw)?,
            "seed" => self.seed = value(key, line, raw)?,
            "warm_start_fraction" => self.warm_start_fraction = value(key, line, raw)?,
            "warm_start_steps" => self.warm_start_steps = value(key, line, raw)?,
            "k" => self.k = value(key, line, raw)?,
            "optimizer" => self.optimizer = raw.parse()?,
            "adam_eps" => self.adam_eps = value(key, line, raw)?,
            "grad_clip" => self.grad_clip = value(key, line, raw)?,
            "eval_every" => self.eval_every = value(key, line, raw)?,
            "freeze_embeddings" => self.freeze_embeddings = flag(key, line, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || (self.tail_steps > 0 && !(self.tail_lr > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.warm_start_fraction > 0.0 && self.warm_start_fraction <= 1.0) {
            return Err(Error::config("warm_start_fraction must lie in (0, 1]"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup: self.warmup_steps,
            sqrt_decay: self.sqrt_decay,
            total: self.steps,
            tail_steps: self.tail_steps,
            tail_lr: self.tail_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

/// Deterministic batch order: shuffled passes over a fixed index pool.
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        BatchSampler { order: Vec::new(), pos: 0, pool, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean NLL in nats per target token.
    pub loss: f64,
    /// Teacher-forced argmax accuracy.
    pub accuracy: f64,
    pub tokens: usize,
}

/// Mean target NLL and token accuracy; contexts are used only when
/// `with_retrieval` is set.
pub fn eval_lm<T: Scalar>(model: &Model<T>, triplets: &[Triplet], with_retrieval: bool) -> Result<EvalStats> {
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for t in triplets {
        let encs = if with_retrieval {
            t.contexts.iter().map(|(id, c)| model.encode_context(c, *id)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let logits = model.decode_logits(&t.input, &t.target, &encs)?;
        let lp = log_softmax_rows(logits.view());
        let x_len = content_vec(&t.input).len();
        for (i, tok) in content_vec(&t.target).into_iter().enumerate() {
            let row = lp.row(x_len + i);
            nll -= row[tok as usize].to_f64().unwrap_or(f64::NAN);
            correct += (argmax(row.iter().copied()) == tok as usize) as usize;
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::input("evaluation set has no target tokens"));
    }
    Ok(EvalStats { loss: nll / tokens as f64, accuracy: correct as f64 / tokens as f64, tokens })
}

/// Zeroes the gradient of every parameter the config holds fixed.
pub(crate) fn mask_frozen<T: Scalar>(cfg: &TrainConfig, grads: &mut ParamSet<T>) {
    if cfg.freeze_embeddings {
        if let Some(i) = grads.find(EMBED_PARAM) {
            grads.get_mut(i).fill(T::zero());
        }
    }
}

/// Indices of the `⌈fraction·N⌉` triplets whose contexts, taken together,
/// have the highest proxy utility; ties to the lower index, ascending.
pub fn warm_start_subset(triplets: &[Triplet], table: &UtilityTable, fraction: f64) -> Result<Vec<usize>> {
    let scores: Vec<f64> = triplets
        .iter()
        .map(|t| {
            let c: Vec<_> = t.contexts.iter().flat_map(|(_, c)| c.iter().copied()).collect();
            proxy_utility(table, &t.input, &t.target, &c)
        })
        .collect();
    top_fraction(&scores, fraction)
}

/// The `⌈fraction·N⌉` highest scores, ties to the lower index, ascending.
pub fn top_fraction(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction must lie in (0, 1]"));
    }
    let n = ((fraction * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| scores[i] + 0.0;
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx)
}

pub(crate) fn check_triplets(triplets: &[Triplet], with_retrieval: bool, k: usize) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::input("no training triplets"));
    }
    if with_retrieval {
        if let Some(i) = triplets.iter().position(|t| t.contexts.len() < k) {
            return Err(Error::input(format!("triplet {i} has {} contexts, expected {k}", triplets[i].contexts.len())));
        }
    }
    Ok(())
}

pub(crate) fn batch_examples<'a>(triplets: &'a [Triplet], idx: &[usize], k: usize) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| {
            let mut ex = triplets[i].example();
            ex.contexts.truncate(k);
            ex
        })
        .collect()
}

/// Trains `model` on the triplets, evaluating on `eval` every
/// `eval_every` steps and at the end. The first `warm_start_steps` steps
/// draw only from `warm` when given.
pub fn train_lm<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    train: &[Triplet],
    eval: &[Triplet],
    with_retrieval: bool,
    warm: Option<&[usize]>,
) -> Result<(Model<T>, TrainHistory)> {
    cfg.validate()?;
    check_triplets(train, with_retrieval, cfg.k)?;
    let eval: Vec<Triplet> = eval
        .iter()
        .map(|t| Triplet { contexts: t.contexts.iter().take(cfg.k).cloned().collect(), ..t.clone() })
        .collect();
    let schedule = cfg.schedule();
    let mut opt = Optimizer::with_eps(cfg.optimizer, &model.params, cfg.adam_eps);
    let mut main = BatchSampler::new((0..train.len()).collect(), cfg.seed);
    let mut warm_sampler = warm.filter(|w| !w.is_empty()).map(|w| BatchSampler::new(w.to_vec(), cfg.seed ^ 0x5eed));
    let mut history = TrainHistory::default();
    let (mut running, mut running_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let idx = match warm_sampler.as_mut() {
            Some(s) if step <= cfg.warm_start_steps => s.next_batch(cfg.batch_size),
            _ => main.next_batch(cfg.batch_size),
        };
        let batch = batch_examples(train, &idx, cfg.k);
        let (loss, mut g) = model.grad(&batch, with_retrieval)?;
        mask_frozen(cfg, &mut g);
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("step {step}: training loss is {loss}")));
        }
        opt.step(&mut model.params, &mut g, schedule.lr_at(step), cfg.grad_clip)?;
        running += loss;
        running_n += 1;
        if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let (eval_loss, eval_accuracy) = if eval.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let s = eval_lm(&model, &eval, with_retrieval)?;
                (s.loss, s.accuracy)
            };
            history.records.push(HistoryRecord { step, train_loss: running / running_n as f64, eval_loss, eval_accuracy });
            running = 0.0;
            running_n = 0;
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged("parameters became non-finite".into()));
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests;
