//! Bootstrap BM25 retrieval, the copy-leakage overlap filter, the dual
//! encoder and exact inner-product search.

pub mod bm25;
pub mod dense;
pub mod overlap;
pub mod vector;

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::{in_batch_softmax_grad, in_batch_softmax_loss, Embedder, EmbedderConfig, RetrievalTriple, Role};
pub use overlap::{lcs_tokens, overlap_ok, DEFAULT_OVERLAP_THRESHOLD};
pub use vector::VectorIndex;
