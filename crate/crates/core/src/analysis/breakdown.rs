//! Improvement of per-token log-likelihood from retrieval, split by token
//! class and by membership of the token in the input and the contexts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{content, Triplet, Vocabulary};
use crate::error::Result;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::utility::{token_deltas, Condition, TokenDelta};

use super::tagger::{tag_tokens, SpanTagger};

pub const IMPROVEMENT_FORMULA: &str =
    "improvement % = 100 * (mean log p with context - mean log p without) / |mean log p without|";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub count: u64,
    pub mean_with: f64,
    pub mean_without: f64,
    pub improvement_pct: f64,
}

#[derive(Default)]
struct Acc {
    n: u64,
    with: f64,
    without: f64,
}

impl Acc {
    fn add(&mut self, d: &TokenDelta) {
        self.n += 1;
        self.with += d.log_prob_with;
        self.without += d.log_prob_without;
    }

    fn cell(&self) -> BreakdownCell {
        if self.n == 0 {
            return BreakdownCell::default();
        }
        let (w, wo) = (self.with / self.n as f64, self.without / self.n as f64);
        let pct = if wo == 0.0 { 0.0 } else { 100.0 * (w - wo) / wo.abs() };
        BreakdownCell { count: self.n, mean_with: w, mean_without: wo, improvement_pct: pct }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub formula: String,
    /// Class -> cells in [`Condition::ALL`] order.
    pub cells: BTreeMap<String, [BreakdownCell; 4]>,
    /// Per class over all conditions.
    pub by_class: BTreeMap<String, BreakdownCell>,
    /// Per condition over all classes.
    pub by_condition: [BreakdownCell; 4],
    pub total: BreakdownCell,
}

impl BreakdownTable {
    pub fn from_tagged(tokens: &[(String, TokenDelta)]) -> Self {
        let mut cells: BTreeMap<String, [Acc; 4]> = BTreeMap::new();
        let mut by_class: BTreeMap<String, Acc> = BTreeMap::new();
        let mut by_condition: [Acc; 4] = Default::default();
        let mut total = Acc::default();
        for (class, d) in tokens {
            let i = d.condition().index();
            cells.entry(class.clone()).or_default()[i].add(d);
            by_class.entry(class.clone()).or_default().add(d);
            by_condition[i].add(d);
            total.add(d);
        }
        BreakdownTable {
            formula: IMPROVEMENT_FORMULA.to_string(),
            cells: cells.into_iter().map(|(k, a)| (k, std::array::from_fn(|i| a[i].cell()))).collect(),
            by_class: by_class.into_iter().map(|(k, a)| (k, a.cell())).collect(),
            by_condition: std::array::from_fn(|i| by_condition[i].cell()),
            total: total.cell(),
        }
    }

    pub fn condition(&self, c: Condition) -> &BreakdownCell {
        &self.by_condition[c.index()]
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.formula);
        let _ = write!(out, "{:<10}", "class");
        for c in Condition::ALL {
            let _ = write!(out, " {:>30}", c.label());
        }
        let _ = writeln!(out, " {:>12} {:>10}", "all", "occurrence");
        let row = |out: &mut String, name: &str, cells: &[BreakdownCell; 4], all: &BreakdownCell| {
            let _ = write!(out, "{name:<10}");
            for cell in cells {
                let _ = write!(out, " {:>22.2}% {:>6}", cell.improvement_pct, cell.count);
            }
            let _ = writeln!(out, " {:>11.2}% {:>10}", all.improvement_pct, all.count);
        };
        for (class, cells) in &self.cells {
            row(&mut out, class, cells, &self.by_class[class]);
        }
        row(&mut out, "ALL", &self.by_condition, &self.total);
        out
    }
}

/// Scores every target token with and without contexts, tags it and
/// aggregates. `model_without` defaults to `model_with` run without
/// contexts.
pub fn delta_breakdown<T: Scalar>(
    model_with: &Model<T>,
    model_without: Option<&Model<T>>,
    triplets: &[Triplet],
    vocab: &Vocabulary,
    tagger: &dyn SpanTagger,
) -> Result<(BreakdownTable, Vec<(String, TokenDelta)>)> {
    let mut tagged = Vec::new();
    for t in triplets {
        let deltas = token_deltas(model_with, model_without, t)?;
        let words: Vec<&str> = content(&t.target).map(|id| vocab.token(id)).collect();
        tagged.extend(tag_tokens(tagger, &words).into_iter().zip(deltas));
    }
    Ok((BreakdownTable::from_tagged(&tagged), tagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(in_input: bool, in_context: bool, w: f64, wo: f64) -> TokenDelta {
        TokenDelta { token: 5, in_input, in_context, log_prob_with: w, log_prob_without: wo }
    }

    #[test]
    fn hand_built_six_token_fixture() {
        let toks = vec![
            ("NUMBER".to_string(), d(false, true, -1.0, -4.0)),
            ("NUMBER".to_string(), d(false, true, -0.5, -3.5)),
            ("CONTENT".to_string(), d(false, true, -2.0, -2.0)),
            ("CONTENT".to_string(), d(true, true, -1.0, -2.0)),
            ("FUNCTION".to_string(), d(false, false, -1.5, -1.0)),
            ("FUNCTION".to_string(), d(true, false, -1.0, -1.0)),
        ];
        let t = BreakdownTable::from_tagged(&toks);
        let num = t.cells["NUMBER"][Condition::InContextNotInInput.index()];
        assert_eq!(num.count, 2);
        assert_eq!((num.mean_with, num.mean_without), (-0.75, -3.75));
        assert!((num.improvement_pct - 80.0).abs() < 1e-12);
        let f = t.cells["FUNCTION"][Condition::NotInContextNotInInput.index()];
        assert!((f.improvement_pct + 50.0).abs() < 1e-12);
        assert_eq!(t.cells["CONTENT"][Condition::InContextInInput.index()].improvement_pct, 50.0);
        let cin = t.condition(Condition::InContextNotInInput);
        assert_eq!(cin.count, 3);
        assert!((cin.improvement_pct - 100.0 * (-3.5 / 3.0 + 9.5 / 3.0) / (9.5 / 3.0)).abs() < 1e-9);
        let occ: u64 = t.by_condition.iter().map(|c| c.count).sum();
        assert_eq!(occ, 6);
        assert_eq!(t.total.count, 6);
        assert!(t.to_text().contains("in context, not in input"));
    }

    #[test]
    fn identical_models_give_zero_everywhere() {
        let toks: Vec<_> = (0..4).map(|i| ("CONTENT".to_string(), d(i % 2 == 0, i < 2, -1.3, -1.3))).collect();
        let t = BreakdownTable::from_tagged(&toks);
        assert!(t.by_condition.iter().all(|c| c.improvement_pct == 0.0));
    }

    #[test]
    fn order_does_not_change_cells() {
        let mut toks = vec![
            ("A".to_string(), d(false, true, -1.0, -2.0)),
            ("A".to_string(), d(false, true, -0.25, -2.5)),
            ("B".to_string(), d(true, false, -3.0, -1.0)),
        ];
        let a = BreakdownTable::from_tagged(&toks);
        toks.reverse();
        assert_eq!(a, BreakdownTable::from_tagged(&toks));
    }
}
