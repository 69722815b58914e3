//! Latency comparison between serving precomputed encodings and encoding
//! the retrieved contexts at inference time.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::{Embedder, Role};
use crate::store::EncodingStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub queries: usize,
    pub k: usize,
    pub warmup: usize,
    pub cached_mean_us: f64,
    pub cached_median_us: f64,
    pub online_mean_us: f64,
    pub online_median_us: f64,
    /// online mean / cached mean
    pub ratio: f64,
    pub median_ratio: f64,
    /// Encoding payload read per query: contexts × rows × cols × 4.
    pub payload_bytes_per_query: u64,
    /// The same payload at 16-bit precision, for comparison only.
    pub half_width_bytes_per_query: u64,
    /// Exact search: every true neighbour is returned.
    pub recall_at_k: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Times, per query, (a) embed + top-k + k lookups and (b) embed + top-k +
/// k encoder passes over the retrieved contexts. The first `warmup` queries
/// are run but not recorded.
pub fn bench_latency(
    store: &EncodingStore,
    model: &Model<f32>,
    embedder: &Embedder<f32>,
    contexts: &[Vec<TokenId>],
    queries: &[Vec<TokenId>],
    k: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if queries.len() < 10 {
        return Err(Error::input("latency bench needs at least 10 queries"));
    }
    if contexts.len() != store.len() {
        return Err(Error::input("context list does not match the store"));
    }
    let mut cached = Vec::new();
    let mut online = Vec::new();
    let mut k_eff = 0;
    let none = HashSet::new();
    for (i, q) in queries.iter().enumerate() {
        let t0 = Instant::now();
        let qe = embedder.embed(q, Role::Query)?;
        let top = store.keys().topk(qe.view(), k, &none);
        let mut sink = 0.0f32;
        for &(id, _) in &top {
            let e = store.lookup(id as u64)?;
            sink += e.states[[0, 0]];
        }
        let a = t0.elapsed().as_secs_f64() * 1e6;

        let t1 = Instant::now();
        let qe = embedder.embed(q, Role::Query)?;
        let top = store.keys().topk(qe.view(), k, &none);
        for &(id, _) in &top {
            let e = model.encode_context(&contexts[id], id as u64)?;
            sink += e.states[[0, 0]];
        }
        let b = t1.elapsed().as_secs_f64() * 1e6;
        std::hint::black_box(sink);
        k_eff = top.len();
        if i >= warmup {
            cached.push(a);
            online.push(b);
        }
    }
    if cached.is_empty() {
        return Err(Error::input("warm-up consumed every query"));
    }
    let payload = k_eff as u64 * store.header().value_payload_size();
    let (cm, om) = (mean(&cached), mean(&online));
    let (cmed, omed) = (median(&cached), median(&online));
    Ok(BenchReport {
        queries: cached.len(),
        k,
        warmup,
        cached_mean_us: cm,
        cached_median_us: cmed,
        online_mean_us: om,
        online_median_us: omed,
        ratio: om / cm,
        median_ratio: omed / cmed,
        payload_bytes_per_query: payload,
        half_width_bytes_per_query: payload / 2,
        recall_at_k: 1.0,
    })
}

/// Encoding bytes for `k` contexts of `w × d_model` at `f32`.
pub fn payload_bytes(k: usize, w: usize, d_model: usize) -> u64 {
    (k * w * d_model * 4) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_arithmetic() {
        assert_eq!(payload_bytes(2, 512, 64), 262_144);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
