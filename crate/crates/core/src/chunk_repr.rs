//! Length-normalized chunk representations and the chunk-pair score matrix.

use serde::{Deserialize, Serialize};

use crate::chunking::BoundarySet;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, TokenSequence};

/// Running sum of token vectors; `finish` yields `√n · mean`. Summation is
/// in insertion order, so building a chunk incrementally and in one pass
/// give identical bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl ChunkAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], count: 0 }
    }

    pub fn single(v: &[f64]) -> Self {
        let mut acc = Self::new(v.len());
        acc.push(v);
        acc
    }

    pub fn push(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.sum.len());
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Vec<f64>> {
        finish_sum(&self.sum, self.count)
    }
}

fn finish_sum(sum: &[f64], count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::EmptyChunk);
    }
    let n = count as f64;
    let scale = n.sqrt();
    Ok(sum.iter().map(|s| s / n * scale).collect())
}

/// `√|C| · mean(tokens)`.
pub fn aggregate_chunk(tokens: &[&[f64]]) -> Result<Vec<f64>> {
    let first = tokens.first().ok_or(Error::EmptyChunk)?;
    let mut acc = ChunkAccumulator::new(first.len());
    for t in tokens {
        if t.len() != first.len() {
            return Err(Error::Shape("chunk tokens differ in length".into()));
        }
        acc.push(t);
    }
    acc.finish()
}

/// Aggregates a zero-padded chunk using its true token count, so padding
/// rows never dilute the mean.
pub fn aggregate_padded(padded: &[&[f64]], true_count: usize) -> Result<Vec<f64>> {
    if true_count > padded.len() {
        return Err(Error::InvalidArgument("true count exceeds padded length".into()));
    }
    let dim = padded.first().map_or(0, |t| t.len());
    let mut sum = vec![0.0; dim];
    for t in padded {
        for (s, x) in sum.iter_mut().zip(*t) {
            *s += x;
        }
    }
    finish_sum(&sum, true_count)
}

/// Aggregates rows `range` of `m`.
pub fn aggregate_rows(m: &Matrix, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let mut acc = ChunkAccumulator::new(m.cols());
    for i in range {
        acc.push(m.row(i));
    }
    acc.finish()
}

fn aggregate_all(m: &Matrix, bounds: &BoundarySet) -> Result<Matrix> {
    let mut out = Matrix::zeros(bounds.num_chunks(), m.cols());
    for (k, r) in bounds.chunks().enumerate() {
        out.row_mut(k).copy_from_slice(&aggregate_rows(m, r)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkReps {
    pub queries: Matrix,
    pub keys: Matrix,
    pub lengths: Vec<usize>,
}

impl ChunkReps {
    pub fn num_chunks(&self) -> usize {
        self.lengths.len()
    }
}

fn check_bounds(len: usize, bounds: &BoundarySet) -> Result<()> {
    if bounds.seq_len() != len {
        return Err(Error::Shape(format!(
            "boundaries cover {} tokens, sequence has {len}",
            bounds.seq_len()
        )));
    }
    Ok(())
}

pub fn build_chunk_reps(seq: &TokenSequence, bounds: &BoundarySet) -> Result<ChunkReps> {
    check_bounds(seq.len(), bounds)?;
    Ok(ChunkReps {
        queries: aggregate_all(&seq.queries, bounds)?,
        keys: aggregate_all(&seq.keys, bounds)?,
        lengths: bounds.chunk_lengths(),
    })
}

/// Chunk keys only, as cached for decoding.
pub fn build_chunk_keys(keys: &Matrix, bounds: &BoundarySet) -> Result<Matrix> {
    check_bounds(keys.rows(), bounds)?;
    aggregate_all(keys, bounds)
}

/// `Q_c K_cᵀ` with no scaling and no softmax.
pub fn chunk_similarity(reps: &ChunkReps) -> Result<Matrix> {
    reps.queries.matmul_t(&reps.keys)
}

/// How per-head chunk scores are merged before token selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Max,
    Mean,
}

pub fn aggregate_heads(per_head: &[Matrix], how: HeadAggregation) -> Result<Matrix> {
    let first = per_head.first().ok_or_else(|| Error::InvalidArgument("no heads".into()))?;
    if per_head.iter().any(|m| m.rows() != first.rows() || m.cols() != first.cols()) {
        return Err(Error::Shape("per-head score matrices differ in shape".into()));
    }
    if per_head.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = first.clone();
    for m in &per_head[1..] {
        for (o, x) in out.data_mut().iter_mut().zip(m.data()) {
            match how {
                HeadAggregation::Max => *o = o.max(*x),
                HeadAggregation::Mean => *o += x,
            }
        }
    }
    if how == HeadAggregation::Mean {
        let h = per_head.len() as f64;
        out.data_mut().iter_mut().for_each(|x| *x /= h);
    }
    Ok(out)
}
