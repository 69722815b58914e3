//! Okapi BM25 with the `ln(1 + (N - df + 0.5) / (df + 0.5))` idf.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::store::StoreHeader;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    /// term -> number of documents containing it
    pub doc_freq: BTreeMap<TokenId, u32>,
    /// term -> (doc id, term frequency), doc ids ascending
    postings: BTreeMap<TokenId, Vec<(u32, u32)>>,
    pub doc_len: Vec<u32>,
    pub avg_len: f64,
}

impl Bm25Index {
    pub fn build(docs: &[Vec<TokenId>]) -> Result<Self> {
        Self::build_with(docs, Bm25Params::default())
    }

    pub fn build_with(docs: &[Vec<TokenId>], params: Bm25Params) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::input("bm25: no documents"));
        }
        let mut postings: BTreeMap<TokenId, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in doc.iter().filter(|&&t| t != PAD) {
                *tf.entry(t).or_default() += 1;
            }
            let len: u32 = tf.values().sum();
            if len == 0 {
                return Err(Error::input(format!("bm25: document {d} has zero length")));
            }
            doc_len.push(len);
            for (t, f) in tf {
                postings.entry(t).or_default().push((d as u32, f));
            }
        }
        let doc_freq = postings.iter().map(|(&t, p)| (t, p.len() as u32)).collect();
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64;
        Ok(Bm25Index { params, doc_freq, postings, doc_len, avg_len })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq.get(&term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn term_freq(&self, term: TokenId, doc: usize) -> u32 {
        self.postings
            .get(&term)
            .and_then(|p| p.binary_search_by_key(&(doc as u32), |&(d, _)| d).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    fn term_score(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * self.doc_len[doc] as f64 / self.avg_len;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Query terms are deduplicated; PAD is ignored.
    pub fn query_terms(query: &[TokenId]) -> BTreeSet<TokenId> {
        query.iter().copied().filter(|&t| t != PAD).collect()
    }

    pub fn score(&self, query: &[TokenId], doc: usize) -> Result<f64> {
        if doc >= self.num_docs() {
            return Err(Error::OutOfRange(format!("bm25: doc {doc} of {}", self.num_docs())));
        }
        Ok(Self::query_terms(query)
            .into_iter()
            .map(|t| match self.term_freq(t, doc) {
                0 => 0.0,
                tf => self.term_score(self.idf(t), tf, doc),
            })
            .sum())
    }

    /// Scores of every document, accumulated term by term via postings.
    pub fn score_all(&self, query: &[TokenId]) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for t in Self::query_terms(query) {
            let Some(plist) = self.postings.get(&t) else { continue };
            let idf = self.idf(t);
            for &(d, tf) in plist {
                scores[d as usize] += self.term_score(idf, tf, d as usize);
            }
        }
        scores
    }

    /// `k` best documents, score descending, ties to the lower id.
    pub fn topk(&self, query: &[TokenId], k: usize) -> Vec<(usize, f64)> {
        rank_scores(&self.score_all(query), k, |_| false)
    }

    /// As [`Bm25Index::topk`], skipping documents for which `excluded` holds.
    pub fn topk_excluding(&self, query: &[TokenId], k: usize, excluded: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
        rank_scores(&self.score_all(query), k, excluded)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::CorruptStore("bm25: truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::CorruptStore("bm25: truncated file".into()))?;
    Ok(f64::from_le_bytes(b))
}

impl Bm25Index {
    /// Header (record count = documents), `k1` and `b` as f64, document
    /// lengths as u32, a u32 posting count and `(term, doc, tf)` u32
    /// triples in term then doc order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        StoreHeader { record_count: self.num_docs() as u64, key_dim: 0, value_rows: 0, value_cols: 0 }.write_to(&mut w)?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        for &l in &self.doc_len {
            w.write_all(&l.to_le_bytes())?;
        }
        let n: usize = self.postings.values().map(Vec::len).sum();
        w.write_all(&(n as u32).to_le_bytes())?;
        for (&t, plist) in &self.postings {
            for &(d, tf) in plist {
                for v in [t, d, tf] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header = StoreHeader::read_from(&mut r)?;
        let params = Bm25Params { k1: read_f64(&mut r)?, b: read_f64(&mut r)? };
        let n_docs = header.record_count as usize;
        let doc_len = (0..n_docs).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        if n_docs == 0 || doc_len.contains(&0) {
            return Err(Error::CorruptStore("bm25: empty document".into()));
        }
        let mut postings: BTreeMap<TokenId, Vec<(u32, u32)>> = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let (t, d, tf) = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
            if d as usize >= n_docs {
                return Err(Error::CorruptStore(format!("bm25: posting for doc {d} of {n_docs}")));
            }
            postings.entry(t).or_default().push((d, tf));
        }
        let doc_freq = postings.iter().map(|(&t, p)| (t, p.len() as u32)).collect();
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / n_docs as f64;
        Ok(Bm25Index { params, doc_freq, postings, doc_len, avg_len })
    }
}

/// Selects the `k` highest scores among ids not excluded; ties go to the
/// lower id.
pub(crate) fn rank_scores(scores: &[f64], k: usize, excluded: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    // adding zero folds -0.0 into 0.0 so signed zeros tie
    let key = |i: usize| scores[i] + 0.0;
    let cmp = |a: &usize, b: &usize| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids.into_iter().map(|i| (i, scores[i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_zeros_tie_by_id() {
        let got = rank_scores(&[-0.0, 0.0, 1.0], 3, |_| false);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![2, 0, 1]);
    }

    #[test]
    fn counts_document_frequency() {
        let idx = Bm25Index::build(&[vec![5, 6], vec![6, 7]]).unwrap();
        assert_eq!(idx.doc_freq[&5], 1);
        assert_eq!(idx.doc_freq[&6], 2);
        assert_eq!(idx.num_docs(), 2);
    }

    #[test]
    fn hand_evaluated_score_is_ln2() {
        // N=2, df=1, tf=1, both docs length 2 so len == avglen
        let idx = Bm25Index::build(&[vec![5, 6], vec![7, 8]]).unwrap();
        let s = idx.score(&[5], 0).unwrap();
        assert!((s - 2f64.ln()).abs() < 1e-12, "{s}");
        assert_eq!(idx.score(&[5], 1).unwrap(), 0.0);
        assert_eq!(idx.score(&[], 0).unwrap(), 0.0);
        assert!(idx.score(&[5], 2).is_err());
    }

    #[test]
    fn duplicate_query_terms_count_once() {
        let idx = Bm25Index::build(&[vec![5, 6], vec![7, 8]]).unwrap();
        assert_eq!(idx.score(&[5, 5, 5], 0).unwrap(), idx.score(&[5], 0).unwrap());
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(Bm25Index::build(&[]).is_err());
        assert!(Bm25Index::build(&[vec![5], vec![PAD, PAD]]).is_err());
    }

    #[test]
    fn rebuild_is_identical() {
        let docs = vec![vec![5, 6, 6, PAD], vec![6, 7]];
        assert_eq!(Bm25Index::build(&docs).unwrap(), Bm25Index::build(&docs).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let idx = Bm25Index::build(&[vec![5, 6, 6, PAD], vec![6, 7], vec![9]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bm25.bin");
        idx.save(&p).unwrap();
        assert_eq!(Bm25Index::load(&p).unwrap(), idx);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(Bm25Index::load(&p).is_err());
    }

    #[test]
    fn ties_prefer_lower_ids_and_k_covers_all() {
        let idx = Bm25Index::build(&[vec![9], vec![5], vec![5], vec![8]]).unwrap();
        let top = idx.topk(&[5], 4);
        assert_eq!(top.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        assert_eq!(idx.topk(&[5], 10).len(), 4);
    }
}
