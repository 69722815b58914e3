//! Context utility: the exact log-likelihood improvement `U`, the
//! per-condition table of expected improvements, the proxy `Û` built from
//! it, and positive / hard-negative selection for retriever training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{content, TokenId, Triplet};
use crate::error::{Error, Result};
use crate::model::{ContextRef, Model};
use crate::scalar::Scalar;

pub const DEFAULT_MIN_COUNT: u64 = 50;
pub const HARD_NEGATIVE_RATIO: f64 = 0.8;

/// Membership of a target token in the input and in the retrieved contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NotInContextNotInInput,
    NotInContextInInput,
    InContextNotInInput,
    InContextInInput,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::NotInContextNotInInput,
        Condition::NotInContextInInput,
        Condition::InContextNotInInput,
        Condition::InContextInInput,
    ];

    pub fn of(in_input: bool, in_context: bool) -> Self {
        match (in_context, in_input) {
            (false, false) => Condition::NotInContextNotInInput,
            (false, true) => Condition::NotInContextInInput,
            (true, false) => Condition::InContextNotInInput,
            (true, true) => Condition::InContextInInput,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::NotInContextNotInInput => "not in context, not in input",
            Condition::NotInContextInInput => "not in context, in input",
            Condition::InContextNotInInput => "in context, not in input",
            Condition::InContextInInput => "in context, in input",
        }
    }
}

/// A scored target token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDelta {
    pub token: TokenId,
    pub in_input: bool,
    pub in_context: bool,
    pub log_prob_with: f64,
    pub log_prob_without: f64,
}

impl TokenDelta {
    pub fn delta(&self) -> f64 {
        self.log_prob_with - self.log_prob_without
    }

    pub fn condition(&self) -> Condition {
        Condition::of(self.in_input, self.in_context)
    }
}

/// One side of a utility comparison: a model and the contexts it sees.
#[derive(Clone, Copy, Debug)]
pub struct Side<'a, T> {
    pub model: &'a Model<T>,
    pub contexts: &'a [ContextRef<'a>],
}

/// `Σ_i log P_a(y_i | ...) − log P_b(y_i | ...)` over the non-PAD target.
pub fn utility_between<T: Scalar>(a: Side<'_, T>, b: Side<'_, T>, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    if a.model.config.vocab_size != b.model.config.vocab_size {
        return Err(Error::input("models disagree on vocabulary size"));
    }
    let la = a.model.target_log_probs_with(x, y, a.contexts)?;
    let lb = b.model.target_log_probs_with(x, y, b.contexts)?;
    Ok(la.iter().zip(&lb).map(|(p, q)| (*p - *q).to_f64().unwrap_or(f64::NAN)).sum())
}

/// Exact utility of contexts `c`: the with-context pass of `model_with`
/// against the empty-encodings pass of `model_without` (the same model when
/// `None`).
pub fn exact_utility<T: Scalar>(
    model_with: &Model<T>,
    model_without: Option<&Model<T>>,
    x: &[TokenId],
    y: &[TokenId],
    contexts: &[ContextRef<'_>],
) -> Result<f64> {
    let without = model_without.unwrap_or(model_with);
    utility_between(Side { model: model_with, contexts }, Side { model: without, contexts: &[] }, x, y)
}

/// Per-token log-probabilities with and without the triplet's contexts.
pub fn token_deltas<T: Scalar>(model_with: &Model<T>, model_without: Option<&Model<T>>, t: &Triplet) -> Result<Vec<TokenDelta>> {
    let ex = t.example();
    let with = model_with.target_log_probs_with(&t.input, &t.target, &ex.contexts)?;
    let without = model_without.unwrap_or(model_with).target_log_probs_with(&t.input, &t.target, &[])?;
    let in_x: BTreeSet<TokenId> = content(&t.input).collect();
    let in_c = t.context_tokens();
    Ok(content(&t.target)
        .zip(with.iter().zip(&without))
        .map(|(tok, (w, wo))| TokenDelta {
            token: tok,
            in_input: in_x.contains(&tok),
            in_context: in_c.contains(&tok),
            log_prob_with: w.to_f64().unwrap_or(f64::NAN),
            log_prob_without: wo.to_f64().unwrap_or(f64::NAN),
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub count: u64,
    /// Token id to (mean, count).
    pub per_token: BTreeMap<TokenId, (f64, u64)>,
}

/// Expected log-likelihood improvement per membership condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub cells: [Cell; 4],
    pub min_count: u64,
}

impl Default for UtilityTable {
    fn default() -> Self {
        UtilityTable { cells: Default::default(), min_count: DEFAULT_MIN_COUNT }
    }
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    condition: Condition,
    /// Token id, or "*" for the cell's global mean.
    token: serde_json::Value,
    mean: f64,
    count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_count: Option<u64>,
}

impl UtilityTable {
    /// Builds a table from scored tokens. Empty cells have mean 0 and count 0.
    pub fn from_deltas<'a>(deltas: impl IntoIterator<Item = &'a TokenDelta>, min_count: u64) -> Result<Self> {
        let mut sums = [(0.0f64, 0u64); 4];
        let mut per: [BTreeMap<TokenId, (f64, u64)>; 4] = Default::default();
        for d in deltas {
            let v = d.delta();
            if !v.is_finite() {
                return Err(Error::Diverged(format!("non-finite delta for token {}", d.token)));
            }
            let i = d.condition().index();
            sums[i].0 += v;
            sums[i].1 += 1;
            let e = per[i].entry(d.token).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let mut cells: [Cell; 4] = Default::default();
        for i in 0..4 {
            let (s, n) = sums[i];
            cells[i] = Cell {
                mean: if n == 0 { 0.0 } else { s / n as f64 },
                count: n,
                per_token: std::mem::take(&mut per[i]).into_iter().map(|(t, (s, n))| (t, (s / n as f64, n))).collect(),
            };
        }
        Ok(UtilityTable { cells, min_count })
    }

    pub fn cell(&self, cond: Condition) -> &Cell {
        &self.cells[cond.index()]
    }

    /// Per-token mean when seen at least `min_count` times, else the cell mean.
    pub fn value(&self, cond: Condition, token: TokenId) -> f64 {
        let cell = self.cell(cond);
        match cell.per_token.get(&token) {
            Some(&(m, n)) if n >= self.min_count => m,
            _ => cell.mean,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for cond in Condition::ALL {
            let cell = self.cell(cond);
            let head = TableLine {
                condition: cond,
                token: "*".into(),
                mean: cell.mean,
                count: cell.count,
                min_count: Some(self.min_count),
            };
            serde_json::to_writer(&mut w, &head)?;
            w.write_all(b"\n")?;
            for (&tok, &(mean, count)) in &cell.per_token {
                let line = TableLine { condition: cond, token: tok.into(), mean, count, min_count: None };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut table = UtilityTable::default();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: TableLine =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if !l.mean.is_finite() {
                return Err(Error::Parse(format!("{}:{}: non-finite mean", path.display(), i + 1)));
            }
            let cell = &mut table.cells[l.condition.index()];
            match &l.token {
                serde_json::Value::String(s) if s == "*" => {
                    cell.mean = l.mean;
                    cell.count = l.count;
                    if let Some(m) = l.min_count {
                        table.min_count = m;
                    }
                }
                serde_json::Value::Number(n) => {
                    let tok = n
                        .as_u64()
                        .and_then(|v| TokenId::try_from(v).ok())
                        .ok_or_else(|| Error::Parse(format!("{}:{}: bad token id", path.display(), i + 1)))?;
                    cell.per_token.insert(tok, (l.mean, l.count));
                }
                _ => return Err(Error::Parse(format!("{}:{}: token must be an id or \"*\"", path.display(), i + 1))),
            }
        }
        Ok(table)
    }
}

/// Estimates the table from with- and without-context passes over the
/// triplets, accumulated in triplet order.
pub fn estimate_table<T: Scalar>(
    model_with: &Model<T>,
    model_without: Option<&Model<T>>,
    triplets: &[Triplet],
    min_count: u64,
) -> Result<UtilityTable> {
    if triplets.is_empty() {
        return Err(Error::input("estimate_table needs at least one triplet"));
    }
    let mut all = Vec::new();
    for t in triplets {
        all.extend(token_deltas(model_with, model_without, t)?);
    }
    UtilityTable::from_deltas(&all, min_count)
}

/// `Û(x, y, c)`: sum over target tokens present in `c` of the in-context
/// cell value, split by whether the token also occurs in `x`. Membership
/// uses sets, so repeated tokens in `c` count once.
pub fn proxy_utility(table: &UtilityTable, x: &[TokenId], y: &[TokenId], c: &[TokenId]) -> f64 {
    let in_x: BTreeSet<TokenId> = content(x).collect();
    let in_c: BTreeSet<TokenId> = content(c).collect();
    content(y)
        .filter(|t| in_c.contains(t))
        .map(|t| table.value(Condition::of(in_x.contains(&t), true), t))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub utility: f64,
    /// Passes the overlap filter and is non-empty.
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub positive: u64,
    pub hard_negative: Option<u64>,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    a.utility > b.utility || (a.utility == b.utility && a.id < b.id)
}

/// Positive = valid candidate with the highest `Û`; hard negative = best
/// valid candidate below 80% of it. `None` when nothing is valid.
pub fn select_triplets(candidates: &[Candidate]) -> Option<Selection> {
    let mut pos: Option<&Candidate> = None;
    for c in candidates.iter().filter(|c| c.valid) {
        if pos.map_or(true, |p| better(c, p)) {
            pos = Some(c);
        }
    }
    let pos = pos?;
    let bound = HARD_NEGATIVE_RATIO * pos.utility;
    let mut neg: Option<&Candidate> = None;
    for c in candidates.iter().filter(|c| c.valid && c.id != pos.id && c.utility < bound) {
        if neg.map_or(true, |n| better(c, n)) {
            neg = Some(c);
        }
    }
    Some(Selection { positive: pos.id, hard_negative: neg.map(|n| n.id) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn table_with(in_x: f64, not_x: f64) -> UtilityTable {
        let mut t = UtilityTable::default();
        t.cells[Condition::InContextInInput.index()].mean = in_x;
        t.cells[Condition::InContextNotInInput.index()].mean = not_x;
        t
    }

    #[test]
    fn proxy_example() {
        let t = table_with(0.25, 1.0);
        let (a, b, z) = (10, 11, 12);
        assert_eq!(proxy_utility(&t, &[a, 20], &[a, b, z], &[a, b, 30]), 1.25);
        assert_eq!(proxy_utility(&t, &[a], &[a, b, z], &[40, 41]), 0.0);
        assert_eq!(proxy_utility(&t, &[a], &[a, b, z, PAD], &[a, a, b, b, PAD]), 1.25);
    }

    #[test]
    fn per_token_values_need_min_count() {
        let mk = |tok, d| TokenDelta { token: tok, in_input: false, in_context: true, log_prob_with: d, log_prob_without: 0.0 };
        let mut ds: Vec<TokenDelta> = (0..3).map(|_| mk(7, 2.0)).collect();
        ds.push(mk(8, -1.0));
        let t = UtilityTable::from_deltas(&ds, 3).unwrap();
        let cell = t.cell(Condition::InContextNotInInput);
        assert_eq!(cell.count, 4);
        assert_eq!(cell.mean, 1.25);
        assert_eq!(t.value(Condition::InContextNotInInput, 7), 2.0);
        assert_eq!(t.value(Condition::InContextNotInInput, 8), 1.25);
        assert_eq!(t.cell(Condition::NotInContextInInput).count, 0);
        assert_eq!(t.cell(Condition::NotInContextInInput).mean, 0.0);
    }

    #[test]
    fn selection_follows_the_eighty_percent_rule() {
        let c = |id, u| Candidate { id, utility: u, valid: true };
        let s = select_triplets(&[c(0, 10.0), c(1, 9.0), c(2, 7.0)]).unwrap();
        assert_eq!(s, Selection { positive: 0, hard_negative: Some(2) });
        assert_eq!(select_triplets(&[c(4, 1.0)]).unwrap().hard_negative, None);
        let invalid = Candidate { id: 0, utility: 5.0, valid: false };
        assert_eq!(select_triplets(&[invalid]), None);
        let s = select_triplets(&[invalid, c(3, 2.0), c(1, 2.0)]).unwrap();
        assert_eq!(s.positive, 1);
    }

    #[test]
    fn table_round_trips_through_jsonl() {
        let mk = |tok, x, c, d| TokenDelta { token: tok, in_input: x, in_context: c, log_prob_with: d, log_prob_without: -1.0 };
        let ds = vec![mk(5, true, true, 0.5), mk(6, false, true, 2.0), mk(5, false, false, -3.0)];
        let t = UtilityTable::from_deltas(&ds, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("table.jsonl");
        t.save(&p).unwrap();
        assert_eq!(UtilityTable::load(&p).unwrap(), t);
        std::fs::write(&p, "{\"condition\":\"in_context_in_input\",\"token\":[1],\"mean\":0,\"count\":0}\n").unwrap();
        assert!(matches!(UtilityTable::load(&p), Err(Error::Parse(_))));
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 8,
            max_ctx_len: 6,
            max_input_len: 6,
            max_target_len: 4,
            k_contexts: 2,
        }
    }

    #[test]
    fn exact_utility_matches_manual_sum() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        let c0 = vec![5, 6, 7, PAD, PAD, PAD];
        let ctx = [ContextRef { id: 0, tokens: &c0 }];
        let (x, y) = ([PAD, 8, 9], [10, 11, PAD]);
        let u = exact_utility(&m, None, &x, &y, &ctx).unwrap();
        let enc = m.encode_context(&c0, 0).unwrap();
        let with = crate::autodiff::log_softmax_rows(m.decode_logits(&x, &y, &[enc]).unwrap().view());
        let without = crate::autodiff::log_softmax_rows(m.decode_logits(&x, &y, &[]).unwrap().view());
        // rows 2 and 3 predict the two target tokens
        let manual = (with[[2, 10]] - without[[2, 10]]) + (with[[3, 11]] - without[[3, 11]]);
        assert!((u - manual).abs() < 1e-12);
        assert_eq!(exact_utility(&m, None, &x, &y, &[]).unwrap(), 0.0);
        let single = exact_utility(&m, None, &x, &[10], &ctx).unwrap();
        assert!((single - (with[[2, 10]] - without[[2, 10]])).abs() < 1e-12);
    }

    #[test]
    fn utility_is_antisymmetric_and_table_counts_partition() {
        let a = Model::<f64>::init(tiny(), 2).unwrap();
        let b = Model::<f64>::init(tiny(), 3).unwrap();
        let c0 = vec![5, 6, 9, 12, 0, 0];
        let ctx = [ContextRef { id: 0, tokens: &c0 }];
        let (x, y) = ([8, 9], [9, 12, 13]);
        let ab = utility_between(Side { model: &a, contexts: &ctx }, Side { model: &b, contexts: &[] }, &x, &y).unwrap();
        let ba = utility_between(Side { model: &b, contexts: &[] }, Side { model: &a, contexts: &ctx }, &x, &y).unwrap();
        assert_eq!(ab, -ba);
        let trip = Triplet { input: x.to_vec(), target: y.to_vec(), contexts: vec![(0, c0.clone())] };
        let table = estimate_table(&a, Some(&b), &[trip.clone(), trip], 50).unwrap();
        assert_eq!(table.total_count(), 6);
        assert_eq!(table.cell(Condition::InContextInInput).count, 2);
        assert_eq!(table.cell(Condition::InContextNotInInput).count, 2);
        assert_eq!(table.cell(Condition::NotInContextNotInInput).count, 2);
    }

    #[test]
    fn pad_is_never_a_member() {
        let m = Model::<f64>::init(tiny(), 4).unwrap();
        let trip = Triplet { input: vec![PAD, 5], target: vec![6, PAD], contexts: vec![(0, vec![PAD; 6])] };
        let d = token_deltas(&m, None, &trip).unwrap();
        assert_eq!(d.len(), 1);
        assert!(!d[0].in_input && !d[0].in_context);
    }

    proptest! {
        #[test]
        fn proxy_is_monotone_in_context_additions(
            in_x in 0.0f64..5.0, not_x in 0.0f64..5.0,
            x in proptest::collection::vec(4u32..12, 0..6),
            y in proptest::collection::vec(4u32..12, 1..6),
            c in proptest::collection::vec(4u32..12, 0..6),
            pick in 0usize..6,
        ) {
            let t = table_with(in_x, not_x);
            let before = proxy_utility(&t, &x, &y, &c);
            let mut c2 = c.clone();
            c2.push(y[pick % y.len()]);
            prop_assert!(proxy_utility(&t, &x, &y, &c2) >= before);
            let mut c3 = c.clone();
            c3.extend(c.iter().copied());
            prop_assert_eq!(proxy_utility(&t, &x, &y, &c3), before);
        }

        #[test]
        fn positive_is_always_valid(us in proptest::collection::vec((-3.0f64..10.0, any::<bool>()), 0..8)) {
            let cands: Vec<Candidate> = us.iter().enumerate().map(|(i, &(u, v))| Candidate { id: i as u64, utility: u, valid: v }).collect();
            match select_triplets(&cands) {
                None => prop_assert!(cands.iter().all(|c| !c.valid)),
                Some(s) => {
                    let p = cands[s.positive as usize];
                    prop_assert!(p.valid);
                    if let Some(n) = s.hard_negative {
                        prop_assert!(cands[n as usize].valid && cands[n as usize].utility < 0.8 * p.utility);
                    }
                }
            }
        }
    }
}
