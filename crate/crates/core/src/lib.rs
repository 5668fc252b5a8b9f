//! Dynamic hierarchical sparse attention.
//!
//! A sequence is cut into variable-length chunks, chunk pairs are scored
//! with length-normalized mean queries and keys, and each query row keeps
//! the best-scoring keys of the best-scoring chunks up to a fixed budget.
//! Chunk boundaries come from a small learned predictor trained on labels
//! derived from attention matrices.
//!
//! Module map:
//! - [`tensor`]: matrices, softmax, causal attention, tensor files
//! - [`chunking`]: boundary sets, fixed-size chunks, NMS, decode extension
//! - [`chunk_repr`]: chunk representations and chunk-pair scores
//! - [`mask`]: upsampling, TopK, prefill/decode masks, cost counters
//! - [`labeling`]: attention-mass ratios, hard and soft boundary labels
//! - [`predictor`]: boundary predictor, focal loss, training, gradient check
//! - [`harness`]: planted corpora and mask-quality comparisons

pub mod chunk_repr;
pub mod chunking;
pub mod error;
pub mod harness;
pub mod labeling;
pub mod mask;
pub mod par;
pub mod predictor;
pub mod tensor;

pub use chunking::BoundarySet;
pub use error::{Error, Result};
pub use mask::{Budget, SparsityMask};
pub use par::Exec;
pub use tensor::{Matrix, TokenSequence};
