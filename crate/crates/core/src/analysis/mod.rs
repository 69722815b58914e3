//! Evaluation and diagnostics: bits per byte, the per-token improvement
//! breakdown, grounded context transfer and the delta HTML report.

pub mod breakdown;
pub mod grounded;
pub mod html;
pub mod tagger;

use serde::{Deserialize, Serialize};

use crate::corpus::{content, Triplet, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::overlap_ok;
use crate::scalar::Scalar;

pub use breakdown::{delta_breakdown, BreakdownCell, BreakdownTable};
pub use grounded::{grounded_analysis, GroundedOutcome, GroundedReport};
pub use html::{emit_delta_html, render_delta_html, DeltaToken};
pub use tagger::{BuiltinTagger, LexiconTagger, SpanTagger};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpbResult {
    pub total_bits: f64,
    pub total_bytes: u64,
    pub bpb: f64,
    pub evaluated: usize,
    pub filtered: usize,
}

/// UTF-8 length of the non-PAD target, counted token by token without
/// separators.
pub fn target_bytes(vocab: &Vocabulary, target: &[crate::corpus::TokenId]) -> u64 {
    content(target).map(|t| vocab.token(t).len() as u64).sum()
}

/// Whether every context passes the overlap filter against the target.
/// `None` disables filtering.
pub fn passes_filter(t: &Triplet, threshold: Option<usize>) -> bool {
    match threshold {
        None => true,
        Some(th) => t.contexts.iter().all(|(_, c)| overlap_ok(&t.target, c, th)),
    }
}

/// Bits per byte over the triplets that pass the overlap filter. The filter
/// looks at the retrieved contexts whether or not the model uses them, so
/// both conditions are scored on the same chunks.
pub fn eval_bpb<T: Scalar>(
    model: &Model<T>,
    triplets: &[Triplet],
    vocab: &Vocabulary,
    threshold: Option<usize>,
    with_retrieval: bool,
) -> Result<BpbResult> {
    let (mut nats, mut bytes, mut evaluated, mut filtered) = (0.0, 0u64, 0, 0);
    for t in triplets {
        if !passes_filter(t, threshold) {
            filtered += 1;
            continue;
        }
        let ex = t.example();
        let ctx = if with_retrieval { &ex.contexts[..] } else { &[] };
        let lp = model.target_log_probs_with(&t.input, &t.target, ctx)?;
        nats -= lp.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
        bytes += target_bytes(vocab, &t.target);
        evaluated += 1;
    }
    if bytes == 0 {
        return Err(Error::input("no evaluable target bytes"));
    }
    let total_bits = nats / std::f64::consts::LN_2;
    Ok(BpbResult { total_bits, total_bytes: bytes, bpb: total_bits / bytes as f64, evaluated, filtered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use crate::model::ModelConfig;

    fn byte_vocab() -> Vocabulary {
        // printable ASCII first, so ids 4..98 are one byte each
        let ascii = (0x21u8..0x7f).map(|b| (b as char).to_string());
        Vocabulary::from_tokens(ascii.chain((94..252).map(|i| format!("w{i}")))).unwrap()
    }

    fn uniform_model(v: usize) -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: v,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 8,
            max_ctx_len: 12,
            max_input_len: 4,
            max_target_len: 4,
            k_contexts: 1,
        };
        let mut m = Model::init(cfg, 0).unwrap();
        let e = m.params.find("embed").unwrap();
        m.params.get_mut(e).fill(0.0);
        m
    }

    #[test]
    fn uniform_byte_model_gives_eight_bits() {
        let vocab = byte_vocab();
        assert_eq!(vocab.size(), 256);
        let m = uniform_model(256);
        let t = |x: Vec<u32>, y: Vec<u32>| Triplet { input: x, target: y, contexts: vec![] };
        let data = vec![t(vec![5, 6], vec![7, 8, 9, PAD]), t(vec![], vec![50, 51, 52, 53])];
        let r = eval_bpb(&m, &data, &vocab, Some(8), true).unwrap();
        assert_eq!(r.total_bytes, 7);
        assert!((r.bpb - 8.0).abs() < 1e-9);
        assert_eq!((r.evaluated, r.filtered), (2, 0));
    }

    #[test]
    fn overlap_filter_threshold_is_inclusive_of_eight() {
        let vocab = byte_vocab();
        let m = Model::<f64>::init(ModelConfig { max_target_len: 10, ..uniform_model(256).config }, 1).unwrap();
        let run: Vec<u32> = (10..19).collect();
        let mut ctx9 = run.clone();
        ctx9.extend([40, 41, 42]);
        let mut ctx8 = run[..8].to_vec();
        ctx8.extend([40, 41, 42, 43]);
        let copy9 = Triplet { input: vec![4], target: run.clone(), contexts: vec![(0, ctx9)] };
        let copy8 = Triplet { input: vec![4], target: run.clone(), contexts: vec![(1, ctx8)] };
        let r = eval_bpb(&m, &[copy9.clone(), copy8.clone()], &vocab, Some(8), true).unwrap();
        assert_eq!((r.evaluated, r.filtered), (1, 1));
        let all = eval_bpb(&m, &[copy9, copy8], &vocab, None, true).unwrap();
        assert_eq!((all.evaluated, all.filtered), (2, 0));
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let m = uniform_model(256);
        let t = Triplet { input: vec![4], target: vec![PAD], contexts: vec![] };
        assert!(eval_bpb(&m, &[t], &byte_vocab(), None, false).is_err());
    }
}
