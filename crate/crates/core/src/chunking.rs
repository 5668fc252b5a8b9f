//! Chunk boundaries: fixed-size partitions, NMS over predictor scores, and
//! the two extra chunks appended during decoding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing boundary indices `[0, b_1, ..., L]`. Index `b_k` is
/// the exclusive end of chunk `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BoundarySet(Vec<usize>);

impl BoundarySet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidBoundaries("need at least [0, L]".into()));
        }
        if indices[0] != 0 {
            return Err(Error::InvalidBoundaries(format!("first boundary is {}, not 0", indices[0])));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidBoundaries(format!("{} is followed by {}", w[0], w[1])));
        }
        Ok(Self(indices))
    }

    /// The single chunk `[0, L)`.
    pub fn whole(len: usize) -> Result<Self> {
        Self::new(vec![0, len])
    }

    /// Boundaries from "last token of a chunk" positions. Positions outside
    /// `[0, L-1)` are ignored and duplicates collapse.
    pub fn from_end_positions(len: usize, positions: &[usize]) -> Result<Self> {
        let mut idx: Vec<usize> = positions.iter().filter(|&&p| p + 1 < len).map(|&p| p + 1).collect();
        idx.push(0);
        idx.push(len);
        idx.sort_unstable();
        idx.dedup();
        Self::new(idx)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn seq_len(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }

    pub fn num_chunks(&self) -> usize {
        self.0.len() - 1
    }

    pub fn chunk(&self, k: usize) -> Range<usize> {
        self.0[k]..self.0[k + 1]
    }

    pub fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.0.windows(2).map(|w| w[0]..w[1])
    }

    pub fn chunk_lengths(&self) -> Vec<usize> {
        self.chunks().map(|r| r.len()).collect()
    }

    /// Index of the chunk containing token `t`.
    pub fn chunk_of(&self, t: usize) -> usize {
        debug_assert!(t < self.seq_len());
        self.0.partition_point(|&b| b <= t) - 1
    }

    /// Interior boundaries expressed as chunk-end token positions.
    pub fn end_positions(&self) -> Vec<usize> {
        self.0[1..self.0.len() - 1].iter().map(|b| b - 1).collect()
    }

    /// Adds explicit chunk-end positions, e.g. newline tokens found by a
    /// tokenizer, on top of the existing boundaries.
    pub fn augment(&self, end_positions: &[usize]) -> Result<Self> {
        let mut all = self.end_positions();
        all.extend_from_slice(end_positions);
        Self::from_end_positions(self.seq_len(), &all)
    }
}

impl TryFrom<Vec<usize>> for BoundarySet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BoundarySet> for Vec<usize> {
    fn from(b: BoundarySet) -> Self {
        b.0
    }
}

pub fn static_boundaries(len: usize, chunk_size: usize) -> Result<BoundarySet> {
    if len == 0 || chunk_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "static chunking needs L >= 1 and size >= 1 (got L={len}, size={chunk_size})"
        )));
    }
    let mut idx: Vec<usize> = (0..len).step_by(chunk_size).collect();
    idx.push(len);
    BoundarySet::new(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub min_conf: f64,
    pub window: usize,
    pub max_chunks: usize,
}

impl NmsConfig {
    pub const DEFAULT_MIN_CONF: f64 = 0.1;
    pub const DEFAULT_WINDOW: usize = 8;

    pub fn with_max_chunks(max_chunks: usize) -> Self {
        Self { min_conf: Self::DEFAULT_MIN_CONF, window: Self::DEFAULT_WINDOW, max_chunks }
    }
}

/// Greedy 1-D non-maximum suppression; returns accepted chunk-end positions
/// in acceptance order. Position `L-1` may be accepted (it suppresses its
/// neighbours) but is not returned and does not use up the chunk allowance.
pub fn nms_positions(scores: &[f64], cfg: &NmsConfig) -> Result<Vec<usize>> {
    if cfg.window == 0 || cfg.max_chunks == 0 {
        return Err(Error::InvalidArgument("nms window and max_chunks must be >= 1".into()));
    }
    let len = scores.len();
    let mut cand: Vec<usize> = (0..len).filter(|&i| scores[i] > cfg.min_conf).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; len];
    let mut out = Vec::new();
    for i in cand {
        if out.len() + 1 >= cfg.max_chunks {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let lo = i.saturating_sub(cfg.window);
        let hi = (i + cfg.window).min(len - 1);
        suppressed[lo..=hi].iter_mut().for_each(|s| *s = true);
        if i + 1 < len {
            out.push(i);
        }
    }
    Ok(out)
}

pub fn nms_boundaries(scores: &[f64], cfg: &NmsConfig) -> Result<BoundarySet> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("nms over an empty score vector".into()));
    }
    BoundarySet::from_end_positions(scores.len(), &nms_positions(scores, cfg)?)
}

/// Boundaries for decoding the token at position `total_len - 1`: prompt
/// chunks, then the generated tokens so far, then the current token alone.
/// The generated chunk is omitted while it is still empty.
pub fn extend_for_decode(prompt: &BoundarySet, total_len: usize) -> Result<BoundarySet> {
    let l = prompt.seq_len();
    if total_len <= l {
        return Err(Error::InvalidArgument(format!(
            "decode length {total_len} must exceed the prompt length {l}"
        )));
    }
    let mut idx = prompt.0.clone();
    if total_len - 1 > l {
        idx.push(total_len - 1);
    }
    idx.push(total_len);
    BoundarySet::new(idx)
}
