//! Grounded context transfer: decode, drop every context that contains the
//! original output, decode again and see where the new output comes from.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary};
use crate::dataset::QaCase;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::training::qa::{exact_match, normalize_answer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundedOutcome {
    OutOfContext,
    ChangedInContext,
    ChangedOutOfContext,
    Unchanged,
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedRecord {
    pub original: String,
    pub second: Option<String>,
    pub outcome: GroundedOutcome,
    pub original_correct: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundedReport {
    pub questions: usize,
    pub in_context: usize,
    pub out_of_context: usize,
    pub changed_in_context: usize,
    pub changed_out_of_context: usize,
    pub unchanged: usize,
    pub excluded: usize,
    /// changed_in_context / (in_context - excluded).
    pub rate: Option<f64>,
    /// Exact match of the original output inside the changed-in-context bucket.
    pub grounded_accuracy: Option<f64>,
    /// Exact match of the original output over every other question.
    pub rest_accuracy: Option<f64>,
    pub records: Vec<GroundedRecord>,
}

/// Word-boundary containment on normalized text. An empty needle is never
/// contained.
pub fn contains_answer(haystack: &str, needle: &str) -> bool {
    let (h, n) = (normalize_answer(haystack), normalize_answer(needle));
    !n.is_empty() && format!(" {h} ").contains(&format!(" {n} "))
}

impl GroundedReport {
    fn from_records(records: Vec<GroundedRecord>) -> Self {
        let count = |o| records.iter().filter(|r| r.outcome == o).count();
        let out_of_context = count(GroundedOutcome::OutOfContext);
        let changed_in_context = count(GroundedOutcome::ChangedInContext);
        let excluded = count(GroundedOutcome::Excluded);
        let in_context = records.len() - out_of_context;
        let acc = |grounded: bool| {
            let sel: Vec<_> =
                records.iter().filter(|r| (r.outcome == GroundedOutcome::ChangedInContext) == grounded).collect();
            (!sel.is_empty()).then(|| sel.iter().filter(|r| r.original_correct).count() as f64 / sel.len() as f64)
        };
        let denom = in_context - excluded;
        GroundedReport {
            questions: records.len(),
            in_context,
            out_of_context,
            changed_in_context,
            changed_out_of_context: count(GroundedOutcome::ChangedOutOfContext),
            unchanged: count(GroundedOutcome::Unchanged),
            excluded,
            rate: (denom > 0).then(|| changed_in_context as f64 / denom as f64),
            grounded_accuracy: acc(true),
            rest_accuracy: acc(false),
            records,
        }
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let mut out = String::new();
        let rows = [
            ("questions", self.questions.to_string()),
            ("original out of context", self.out_of_context.to_string()),
            ("original in context", self.in_context.to_string()),
            ("  changed, still in context", self.changed_in_context.to_string()),
            ("  changed, out of context", self.changed_out_of_context.to_string()),
            ("  unchanged", self.unchanged.to_string()),
            ("  excluded", self.excluded.to_string()),
            ("grounded transfer rate", pct(self.rate)),
            ("accuracy, grounded", pct(self.grounded_accuracy)),
            ("accuracy, rest", pct(self.rest_accuracy)),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<30} {v:>10}");
        }
        out
    }
}

/// Runs the procedure with an arbitrary decoder from a context list to an
/// output string. Each case's original contexts are its first `k`
/// candidates.
pub fn grounded_with(
    cases: &[QaCase],
    vocab: &Vocabulary,
    k: usize,
    mut decode: impl FnMut(&QaCase, &[(u64, Vec<TokenId>)]) -> Result<String>,
) -> Result<GroundedReport> {
    if k == 0 {
        return Err(Error::input("grounded analysis needs k >= 1"));
    }
    let mut records = Vec::with_capacity(cases.len());
    for case in cases {
        let texts: Vec<String> = case.candidates.iter().map(|(_, c)| vocab.detokenize(c)).collect();
        let first = &case.candidates[..k.min(case.candidates.len())];
        let original = decode(case, first)?;
        let original_correct = exact_match(&original, &case.item.answer);
        let in_ctx = |s: &str, idx: &[usize]| idx.iter().any(|&i| contains_answer(&texts[i], s));
        let (second, outcome) = if !in_ctx(&original, &(0..first.len()).collect::<Vec<_>>()) {
            (None, GroundedOutcome::OutOfContext)
        } else {
            let remaining: Vec<usize> =
                (0..case.candidates.len()).filter(|&i| !contains_answer(&texts[i], &original)).take(k).collect();
            if remaining.len() < k {
                (None, GroundedOutcome::Excluded)
            } else {
                let ctxs: Vec<(u64, Vec<TokenId>)> = remaining.iter().map(|&i| case.candidates[i].clone()).collect();
                let second = decode(case, &ctxs)?;
                let outcome = if normalize_answer(&second) == normalize_answer(&original) {
                    GroundedOutcome::Unchanged
                } else if in_ctx(&second, &remaining) {
                    GroundedOutcome::ChangedInContext
                } else {
                    GroundedOutcome::ChangedOutOfContext
                };
                (Some(second), outcome)
            }
        };
        records.push(GroundedRecord { original, second, outcome, original_correct });
    }
    Ok(GroundedReport::from_records(records))
}

/// Greedy-decodes every question with its top `k` passages and again after
/// removing all passages that contain the original output.
pub fn grounded_analysis<T: Scalar>(model: &Model<T>, cases: &[QaCase], vocab: &Vocabulary, k: usize) -> Result<GroundedReport> {
    if k > model.config.k_contexts {
        return Err(Error::input(format!("k = {k} exceeds the model's {} contexts", model.config.k_contexts)));
    }
    grounded_with(cases, vocab, k, |case, ctxs| {
        let encs = ctxs.iter().map(|(id, c)| model.encode_context(c, *id)).collect::<Result<Vec<_>>>()?;
        let out = model.greedy_decode(&case.item.triplet.input, &encs, model.config.max_target_len)?;
        Ok(vocab.detokenize(&out))
    })
}
