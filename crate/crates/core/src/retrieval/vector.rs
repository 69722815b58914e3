use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::store::StoreHeader;

/// Document embeddings, one row per context.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex<T> {
    rows: Array2<T>,
}

impl<T: Scalar> VectorIndex<T> {
    pub fn new(rows: Array2<T>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("vector index rows must be finite"));
        }
        Ok(VectorIndex { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    /// Exact top-`k` by raw inner product, skipping `exclusions`; ties go
    /// to the lower id.
    pub fn topk(&self, query: ArrayView1<'_, T>, k: usize, exclusions: &HashSet<usize>) -> Vec<(usize, T)> {
        let scores: Vec<T> = self.rows.rows().into_iter().map(|r| r.dot(&query)).collect();
        let as_f64: Vec<f64> = scores.iter().map(|s| s.to_f64().unwrap_or(f64::NAN)).collect();
        crate::retrieval::bm25::rank_scores(&as_f64, k, |i| exclusions.contains(&i))
            .into_iter()
            .map(|(i, _)| (i, scores[i]))
            .collect()
    }
}

impl<T: Scalar> VectorIndex<T> {
    /// Header (record count = rows, key dim = columns), then rows as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        StoreHeader { record_count: self.len() as u64, key_dim: self.dim() as u32, value_rows: 0, value_cols: 0 }
            .write_to(&mut w)?;
        for v in self.rows.iter() {
            w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let h = StoreHeader::read_from(&mut r)?;
        let (n, e) = (h.record_count as usize, h.key_dim as usize);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != n * e * 4 {
            return Err(Error::CorruptStore(format!("vector index: expected {} payload bytes, found {}", n * e * 4, buf.len())));
        }
        let vals: Vec<T> = buf.chunks_exact(4).map(|b| c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
        Self::new(Array2::from_shape_vec((n, e), vals).expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_inner_products() {
        let idx = VectorIndex::new(array![[0.0f32, 1.0], [2.0, 0.0], [1.0, 1.0]]).unwrap();
        let top = idx.topk(array![1.0f32, 0.0].view(), 1, &HashSet::new());
        assert_eq!(top, vec![(1, 2.0)]);
        let ex: HashSet<usize> = [1].into_iter().collect();
        let top = idx.topk(array![1.0f32, 0.0].view(), 2, &ex);
        assert_eq!(top.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 0]);
    }

    #[test]
    fn scaled_query_row_wins() {
        let idx = VectorIndex::new(array![[0.3f64, -0.2], [0.9, 0.1], [0.6, -0.4]]).unwrap();
        let q = array![1.5f64, -1.0];
        assert_eq!(idx.topk(q.view(), 1, &HashSet::new())[0].0, 2);
    }

    #[test]
    fn save_load_round_trip() {
        let idx = VectorIndex::new(array![[0.25f32, -1.5], [3.0, 0.125]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        idx.save(&p).unwrap();
        assert_eq!(VectorIndex::<f32>::load(&p).unwrap(), idx);
        std::fs::write(&p, &std::fs::read(&p).unwrap()[..40]).unwrap();
        assert!(VectorIndex::<f32>::load(&p).is_err());
    }

    #[test]
    fn rejects_non_finite_rows() {
        assert!(VectorIndex::new(array![[f32::NAN, 0.0]]).is_err());
    }
}
