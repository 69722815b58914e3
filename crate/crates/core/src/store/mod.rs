//! Decoupled serving: precomputed context encodings keyed by retrieval
//! embeddings, stored as a key file and a value file.
//!
//! Key file: header, then `record_count` packed `f32` keys of `key_dim`.
//! Value file: header, then records of `context_id: u64`,
//! `content_len: u32` and a `value_rows × value_cols` `f32` matrix.

pub mod bench;
pub mod format;

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{Encoding, Model};
use crate::retrieval::{Embedder, Role, VectorIndex};

pub use bench::{bench_latency, BenchReport};
pub use format::{StoreHeader, HEADER_SIZE};

pub const KEY_FILE: &str = "keys.bin";
pub const VALUE_FILE: &str = "values.bin";

fn key_path(dir: &Path) -> PathBuf {
    dir.join(KEY_FILE)
}

fn value_path(dir: &Path) -> PathBuf {
    dir.join(VALUE_FILE)
}

struct TempFile {
    tmp: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl TempFile {
    fn new(dest: PathBuf) -> Self {
        let mut tmp = dest.clone().into_os_string();
        tmp.push(".partial");
        TempFile { tmp: tmp.into(), dest, done: false }
    }

    fn commit(mut self) -> Result<()> {
        fs::rename(&self.tmp, &self.dest)?;
        self.done = true;
        Ok(())
    }
}

impl Drop for TempFile {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Embeds and encodes every context and writes both files into `dir`.
/// Record `i` is context `i`. Nothing is left behind on failure.
pub fn store_build(dir: &Path, embedder: &Embedder<f32>, model: &Model<f32>, contexts: &[Vec<TokenId>]) -> Result<StoreHeader> {
    fs::create_dir_all(dir)?;
    let header = StoreHeader {
        record_count: contexts.len() as u64,
        key_dim: embedder.config.dim as u32,
        value_rows: model.config.max_ctx_len as u32,
        value_cols: model.config.d_model as u32,
    };
    let keys = TempFile::new(key_path(dir));
    let values = TempFile::new(value_path(dir));
    {
        let mut kw = BufWriter::new(File::create(&keys.tmp)?);
        let mut vw = BufWriter::new(File::create(&values.tmp)?);
        header.write_to(&mut kw)?;
        header.write_to(&mut vw)?;
        for (i, c) in contexts.iter().enumerate() {
            let key = embedder.embed(c, Role::Document)?;
            for v in key.iter() {
                kw.write_all(&v.to_le_bytes())?;
            }
            let enc = model.encode_context(c, i as u64)?;
            vw.write_all(&(i as u64).to_le_bytes())?;
            vw.write_all(&(enc.content_len as u32).to_le_bytes())?;
            for v in enc.states.iter() {
                vw.write_all(&v.to_le_bytes())?;
            }
        }
        kw.flush()?;
        vw.flush()?;
        kw.get_ref().sync_all()?;
        vw.get_ref().sync_all()?;
    }
    keys.commit()?;
    values.commit()?;
    Ok(header)
}

/// Read-only handle on a built store. Keys are loaded for scanning; values
/// are read on demand with positioned reads, so concurrent lookups are safe.
pub struct EncodingStore {
    header: StoreHeader,
    keys: VectorIndex<f32>,
    values: File,
}

fn check_size(file: &File, header: &StoreHeader, record_size: u64, what: &str) -> Result<()> {
    let expected = HEADER_SIZE as u64 + header.record_count * record_size;
    let actual = file.metadata()?.len();
    if actual != expected {
        return Err(Error::CorruptStore(format!("{what}: size {actual} bytes, header implies {expected}")));
    }
    Ok(())
}

impl EncodingStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut kf = File::open(key_path(dir))?;
        let mut vf = File::open(value_path(dir))?;
        let header = StoreHeader::read_from(&mut kf)?;
        let vheader = StoreHeader::read_from(&mut vf)?;
        if header != vheader {
            return Err(Error::CorruptStore("key and value headers disagree".into()));
        }
        check_size(&kf, &header, header.key_record_size(), "key file")?;
        check_size(&vf, &header, header.value_record_size(), "value file")?;

        let n = header.record_count as usize;
        let dim = header.key_dim as usize;
        let mut raw = vec![0u8; n * dim * 4];
        kf.read_exact_at(&mut raw, HEADER_SIZE as u64)?;
        let floats: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let keys = Array2::from_shape_vec((n, dim), floats).map_err(|e| Error::CorruptStore(e.to_string()))?;
        let keys = VectorIndex::new(keys).map_err(|_| Error::CorruptStore("keys: non-finite entry".into()))?;
        Ok(EncodingStore { header, keys, values: vf })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    pub fn keys(&self) -> &VectorIndex<f32> {
        &self.keys
    }

    /// Reads one precomputed encoding with a single positioned read.
    pub fn lookup(&self, id: u64) -> Result<Encoding<f32>> {
        if id >= self.header.record_count {
            return Err(Error::OutOfRange(format!("record {id} of {}", self.header.record_count)));
        }
        let size = self.header.value_record_size();
        let mut buf = vec![0u8; size as usize];
        self.values.read_exact_at(&mut buf, HEADER_SIZE as u64 + id * size)?;
        let stored_id = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes"));
        if stored_id != id {
            return Err(Error::CorruptStore(format!("context_id: record {id} holds id {stored_id}")));
        }
        let content_len = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let rows = self.header.value_rows as usize;
        if content_len > rows {
            return Err(Error::CorruptStore(format!("content_len: {content_len} exceeds {rows} rows")));
        }
        let floats: Vec<f32> = buf[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let states = Array2::from_shape_vec((rows, self.header.value_cols as usize), floats)
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
        Ok(Encoding { context_id: id, states, content_len })
    }
}

#[derive(Clone, Debug)]
pub struct ServeResult {
    /// `(context id, score, encoding)`, best first.
    pub hits: Vec<(u64, f32, Encoding<f32>)>,
    /// Set when fewer than `k` records exist.
    pub truncated: bool,
}

impl ServeResult {
    pub fn encodings(&self) -> Vec<Encoding<f32>> {
        self.hits.iter().map(|h| h.2.clone()).collect()
    }
}

/// Online path: embed the query, search the keys, look up the values.
pub fn serve_query(store: &EncodingStore, embedder: &Embedder<f32>, x: &[TokenId], k: usize) -> Result<ServeResult> {
    if embedder.config.dim != store.header.key_dim as usize {
        return Err(Error::input("embedder dimension does not match the store keys"));
    }
    let q = embedder.embed(x, Role::Query)?;
    let top = store.keys.topk(q.view(), k, &HashSet::new());
    let hits = top
        .into_iter()
        .map(|(id, score)| Ok((id as u64, score, store.lookup(id as u64)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ServeResult { hits, truncated: k > store.len() })
}
