use crate::error::{Error, Result};
use crate::retrieval::dense::{in_batch_softmax_grad, Embedder, RetrievalTriple};
use crate::scalar::Scalar;

use super::{BatchSampler, Optimizer, TrainConfig};

/// Minimizes the in-batch softmax loss; returns the embedder and the loss
/// of every step.
pub fn train_retriever<T: Scalar>(
    mut embedder: Embedder<T>,
    cfg: &TrainConfig,
    triples: &[RetrievalTriple],
) -> Result<(Embedder<T>, Vec<f64>)> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::input("no retriever training triples"));
    }
    let schedule = cfg.schedule();
    let mut opt = Optimizer::with_eps(cfg.optimizer, &embedder.params, cfg.adam_eps);
    let mut sampler = BatchSampler::new((0..triples.len()).collect(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<RetrievalTriple> = sampler
            .next_batch(cfg.batch_size.min(triples.len()))
            .into_iter()
            .map(|i| triples[i].clone())
            .collect();
        let (loss, mut g) = in_batch_softmax_grad(&embedder, &batch)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("retriever step {step}: loss is {loss}")));
        }
        opt.step(&mut embedder.params, &mut g, schedule.lr_at(step), cfg.grad_clip)?;
        losses.push(loss);
    }
    Ok((embedder, losses))
}
