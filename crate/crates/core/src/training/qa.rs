use serde::{Deserialize, Serialize};

use crate::corpus::{Triplet, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

use super::{batch_examples, check_triplets, BatchSampler, Optimizer, TrainConfig};

/// A formatted question with its retrieved passages and gold answer text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub triplet: Triplet,
    pub answer: String,
}

/// Lowercases, drops punctuation and the articles a/an/the, and collapses
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower: String = s.to_lowercase().chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).collect();
    lower.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

pub fn qa_predict<T: Scalar>(model: &Model<T>, item: &QaItem, vocab: &Vocabulary, with_retrieval: bool) -> Result<String> {
    let encs = if with_retrieval {
        let k = model.config.k_contexts.min(item.triplet.contexts.len());
        item.triplet.contexts[..k].iter().map(|(id, c)| model.encode_context(c, *id)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let out = model.greedy_decode(&item.triplet.input, &encs, model.config.max_target_len)?;
    Ok(vocab.detokenize(&out))
}

/// Fraction of items whose greedy answer matches the gold answer.
pub fn qa_exact_match<T: Scalar>(model: &Model<T>, items: &[QaItem], vocab: &Vocabulary, with_retrieval: bool) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::input("no QA items to score"));
    }
    let mut hits = 0;
    for it in items {
        hits += exact_match(&qa_predict(model, it, vocab, with_retrieval)?, &it.answer) as usize;
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_em: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaHistory {
    pub records: Vec<QaRecord>,
    /// Step of the returned checkpoint.
    pub best_step: usize,
}

/// Fine-tunes on prompt/answer triplets (loss on answer tokens and EOS
/// only) and returns the evaluated checkpoint with the best validation
/// exact match, the earliest on ties.
pub fn finetune_qa<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    train: &[Triplet],
    val: &[QaItem],
    vocab: &Vocabulary,
    with_retrieval: bool,
) -> Result<(Model<T>, QaHistory)> {
    cfg.validate()?;
    check_triplets(train, with_retrieval, cfg.k)?;
    let schedule = cfg.schedule();
    let mut opt = Optimizer::with_eps(cfg.optimizer, &model.params, cfg.adam_eps);
    let mut sampler = BatchSampler::new((0..train.len()).collect(), cfg.seed);
    let mut history = QaHistory::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let (mut running, mut running_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch = batch_examples(train, &idx, cfg.k);
        let (loss, mut g) = model.grad(&batch, with_retrieval)?;
        super::mask_frozen(cfg, &mut g);
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("qa step {step}: training loss is {loss}")));
        }
        opt.step(&mut model.params, &mut g, schedule.lr_at(step), cfg.grad_clip)?;
        running += loss;
        running_n += 1;
        if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let val_em = if val.is_empty() { 0.0 } else { qa_exact_match(&model, val, vocab, with_retrieval)? };
            history.records.push(QaRecord { step, train_loss: running / running_n as f64, val_em });
            running = 0.0;
            running_n = 0;
            if best.as_ref().map_or(true, |(b, _)| val_em > *b) {
                history.best_step = step;
                best = Some((val_em, model.clone()));
            }
        }
    }
    Ok((best.map(|b| b.1).unwrap_or(model), history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squad_style_normalization() {
        assert_eq!(normalize_answer("The  Eiffel Tower!"), "eiffel tower");
        assert!(exact_match("an apple.", "Apple"));
        assert!(!exact_match("apples", "apple"));
        assert_eq!(normalize_answer(""), "");
    }
}
