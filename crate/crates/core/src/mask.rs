//! Token-level sparsity masks: upsampling chunk scores, causal TopK with a
//! forced self index, the prefill and decode mask builders, mask files, and
//! cost counters.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::chunk_repr::{build_chunk_reps, chunk_similarity, ChunkAccumulator};
use crate::chunking::{extend_for_decode, BoundarySet};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{dot, Matrix, TokenSequence};

/// Per-query key budget, at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Budget(usize);

impl Budget {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Number of keys row `row` keeps.
    pub fn row_size(self, row: usize) -> usize {
        self.0.min(row + 1)
    }
}

impl TryFrom<usize> for Budget {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Self::new(n)
    }
}

impl From<Budget> for usize {
    fn from(b: Budget) -> usize {
        b.0
    }
}

/// Causal mask stored as ascending key-index lists per query row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    #[serde(rename = "L")]
    len: usize,
    rows: Vec<Vec<usize>>,
}

impl SparsityMask {
    /// Validates causality, self inclusion, ordering and row count.
    pub fn new(len: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != len {
            return Err(Error::Shape(format!("{} rows for L={len}", rows.len())));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("row {i} is not strictly ascending")));
            }
            if r.last() != Some(&i) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} must be causal and contain its own index"
                )));
            }
        }
        Ok(Self { len, rows })
    }

    pub fn full_causal(len: usize) -> Self {
        Self { len, rows: (0..len).map(|i| (0..=i).collect()).collect() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn attended_pairs(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: SparsityMask = serde_json::from_str(s)?;
        Self::new(raw.len, raw.rows)
    }

    /// `DHSAMSK1`, u64-LE `L`, then one `ceil(L/8)`-byte bitset per row with
    /// key `j` at bit `j % 8` of byte `j / 8`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&(self.len as u64).to_le_bytes())?;
        let stride = self.len.div_ceil(8);
        let mut buf = vec![0u8; stride];
        for r in &self.rows {
            buf.iter_mut().for_each(|b| *b = 0);
            for &j in r {
                buf[j / 8] |= 1 << (j % 8);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Format("not a DHSAMSK1 mask (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Format("mask length overflows".into()))?;
        let stride = len.div_ceil(8);
        let mut buf = vec![0u8; stride];
        let mut rows = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            rows.push((0..len).filter(|&j| buf[j / 8] >> (j % 8) & 1 == 1).collect());
        }
        Self::new(len, rows)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

pub const MASK_MAGIC: &[u8; 8] = b"DHSAMSK1";

/// Broadcasts each chunk-pair score over the token block it covers.
pub fn upsample(chunk_scores: &Matrix, bounds: &BoundarySet) -> Result<Matrix> {
    let n = bounds.num_chunks();
    if chunk_scores.rows() != n || chunk_scores.cols() != n {
        return Err(Error::Shape(format!(
            "{}x{} chunk scores for {n} chunks",
            chunk_scores.rows(),
            chunk_scores.cols()
        )));
    }
    let l = bounds.seq_len();
    let mut out = Matrix::zeros(l, l);
    for (a, rows) in bounds.chunks().enumerate() {
        for i in rows {
            let row = out.row_mut(i);
            for (b, cols) in bounds.chunks().enumerate() {
                row[cols].fill(chunk_scores.get(a, b));
            }
        }
    }
    Ok(out)
}

fn score_order(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// The `min(N_b, row+1)` highest-scoring causal keys of `row`, with `row`
/// itself always kept and ties going to the lower index. Ascending output.
pub fn topk_row(scores: &[f64], row: usize, budget: Budget) -> Vec<usize> {
    let k = budget.row_size(row);
    let mut cand: Vec<usize> = (0..row).collect();
    cand.sort_by(|&a, &b| score_order(scores[a], scores[b]).then(a.cmp(&b)));
    let mut out: Vec<usize> = cand.into_iter().take(k - 1).collect();
    out.push(row);
    out.sort_unstable();
    out
}

/// TopK for row `i` straight from chunk scores, without materializing the
/// upsampled row. `order` lists causal chunks `0..=chunk_of(i)` sorted by
/// descending score then ascending position, which reproduces the token-level
/// ordering because chunks are contiguous and disjoint.
fn select_from_chunks(order: &[usize], bounds: &BoundarySet, i: usize, budget: Budget) -> Vec<usize> {
    let mut need = budget.row_size(i) - 1;
    let mut out = Vec::with_capacity(need + 1);
    for &c in order {
        if need == 0 {
            break;
        }
        let r = bounds.chunk(c);
        let end = r.end.min(i);
        let take = end.saturating_sub(r.start).min(need);
        out.extend(r.start..r.start + take);
        need -= take;
    }
    out.push(i);
    out.sort_unstable();
    out
}

fn chunk_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_order(scores[a], scores[b]).then(a.cmp(&b)));
    order
}

/// Prefill mask from precomputed chunk scores.
pub fn mask_from_chunk_scores(
    chunk_scores: &Matrix,
    bounds: &BoundarySet,
    budget: Budget,
    exec: Exec,
) -> Result<SparsityMask> {
    let n = bounds.num_chunks();
    if chunk_scores.rows() != n || chunk_scores.cols() != n {
        return Err(Error::Shape(format!(
            "{}x{} chunk scores for {n} chunks",
            chunk_scores.rows(),
            chunk_scores.cols()
        )));
    }
    let per_chunk: Vec<Vec<Vec<usize>>> = exec.map(n, |a| {
        let order = chunk_order(&chunk_scores.row(a)[..=a]);
        bounds.chunk(a).map(|i| select_from_chunks(&order, bounds, i, budget)).collect()
    });
    let len = bounds.seq_len();
    Ok(SparsityMask { len, rows: per_chunk.into_iter().flatten().collect() })
}

/// Prefill mask: chunk reps, chunk similarity, upsampling and per-row TopK.
pub fn prefill_mask(seq: &TokenSequence, bounds: &BoundarySet, budget: Budget) -> Result<SparsityMask> {
    prefill_mask_with(seq, bounds, budget, Exec::default())
}

pub fn prefill_mask_with(
    seq: &TokenSequence,
    bounds: &BoundarySet,
    budget: Budget,
    exec: Exec,
) -> Result<SparsityMask> {
    let reps = build_chunk_reps(seq, bounds)?;
    mask_from_chunk_scores(&chunk_similarity(&reps)?, bounds, budget, exec)
}

/// The same composition evaluated literally: the full `L x L` upsampled
/// matrix, then `topk_row` on every row. Quadratic; kept as a reference.
pub fn prefill_mask_reference(seq: &TokenSequence, bounds: &BoundarySet, budget: Budget) -> Result<SparsityMask> {
    let reps = build_chunk_reps(seq, bounds)?;
    let st = upsample(&chunk_similarity(&reps)?, bounds)?;
    let rows = (0..seq.len()).map(|i| topk_row(st.row(i), i, budget)).collect();
    SparsityMask::new(seq.len(), rows)
}

fn decode_row(
    extended: &BoundarySet,
    chunk_keys: &[&[f64]],
    query: &[f64],
    budget: Budget,
) -> Vec<usize> {
    let scores: Vec<f64> = chunk_keys.iter().map(|k| dot(query, k)).collect();
    let order = chunk_order(&scores);
    select_from_chunks(&order, extended, extended.seq_len() - 1, budget)
}

/// Mask row for the token at position `total_len - 1` during decoding.
///
/// `generated_keys` holds the keys of positions `L..total_len`, the last
/// being the current token. Prompt chunk keys come from the cache; the
/// generated-token chunk is rebuilt from its rows each call.
pub fn decode_mask_row(
    prompt_bounds: &BoundarySet,
    cached_chunk_keys: &Matrix,
    generated_keys: &Matrix,
    current_query: &[f64],
    total_len: usize,
    budget: Budget,
) -> Result<Vec<usize>> {
    let l = prompt_bounds.seq_len();
    if cached_chunk_keys.rows() != prompt_bounds.num_chunks() {
        return Err(Error::Shape("cached chunk keys do not match prompt boundaries".into()));
    }
    if total_len <= l || generated_keys.rows() != total_len - l {
        return Err(Error::Shape(format!(
            "{} generated keys for prompt length {l} and total length {total_len}",
            generated_keys.rows()
        )));
    }
    let d = cached_chunk_keys.cols();
    if generated_keys.cols() != d || current_query.len() != d {
        return Err(Error::Shape("key/query width mismatch".into()));
    }
    let extended = extend_for_decode(prompt_bounds, total_len)?;
    let mut acc = ChunkAccumulator::new(d);
    for t in 0..generated_keys.rows() - 1 {
        acc.push(generated_keys.row(t));
    }
    let current = ChunkAccumulator::single(generated_keys.row(generated_keys.rows() - 1)).finish()?;
    let gen = if acc.count() > 0 { Some(acc.finish()?) } else { None };
    let mut keys: Vec<&[f64]> = cached_chunk_keys.iter_rows().collect();
    keys.extend(gen.as_deref());
    keys.push(&current);
    Ok(decode_row(&extended, &keys, current_query, budget))
}

/// Incremental decoder state: cached prompt chunk keys plus a running sum
/// for the generated-token chunk. One session per sequence.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    prompt_bounds: BoundarySet,
    prompt_chunk_keys: Matrix,
    generated: ChunkAccumulator,
    budget: Budget,
}

impl DecodeSession {
    pub fn new(prompt_bounds: BoundarySet, prompt_chunk_keys: Matrix, budget: Budget) -> Result<Self> {
        if prompt_chunk_keys.rows() != prompt_bounds.num_chunks() {
            return Err(Error::Shape("cached chunk keys do not match prompt boundaries".into()));
        }
        let d = prompt_chunk_keys.cols();
        Ok(Self { prompt_bounds, prompt_chunk_keys, generated: ChunkAccumulator::new(d), budget })
    }

    /// Position of the next token to be decoded.
    pub fn position(&self) -> usize {
        self.prompt_bounds.seq_len() + self.generated.count()
    }

    /// Mask row for a new token, which then joins the generated chunk.
    pub fn step(&mut self, key: &[f64], query: &[f64]) -> Result<Vec<usize>> {
        let d = self.prompt_chunk_keys.cols();
        if key.len() != d || query.len() != d {
            return Err(Error::Shape("key/query width mismatch".into()));
        }
        let total = self.position() + 1;
        let extended = extend_for_decode(&self.prompt_bounds, total)?;
        let gen = if self.generated.count() > 0 { Some(self.generated.finish()?) } else { None };
        let current = ChunkAccumulator::single(key).finish()?;
        let mut keys: Vec<&[f64]> = self.prompt_chunk_keys.iter_rows().collect();
        keys.extend(gen.as_deref());
        keys.push(&current);
        let row = decode_row(&extended, &keys, query, self.budget);
        self.generated.push(key);
        Ok(row)
    }
}

/// Work spent choosing and applying a mask. `score_ops` counts vector
/// products and candidate evaluations made before attention (chunk-pair
/// scores, per-row chunk candidates, predictor positions); dense attention
/// spends none. `attended_pairs` counts query-key pairs attended.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub score_ops: u64,
    pub attended_pairs: u64,
}

impl CostCounters {
    pub fn dense(len: usize) -> Self {
        let l = len as u64;
        Self { score_ops: 0, attended_pairs: l * (l + 1) / 2 }
    }

    /// Chunked selection under `bounds`; attended pairs follow from the
    /// exact row cardinality `min(N_b, i+1)`.
    pub fn chunked(bounds: &BoundarySet, budget: Budget) -> Self {
        let n = bounds.num_chunks() as u64;
        let pair_scores = n * (n + 1) / 2;
        let candidates: u64 = bounds.chunks().enumerate().map(|(c, r)| (c as u64 + 1) * r.len() as u64).sum();
        let attended = (0..bounds.seq_len()).map(|i| budget.row_size(i) as u64).sum();
        Self { score_ops: pair_scores + candidates, attended_pairs: attended }
    }

    pub fn with_predictor_positions(mut self, positions: usize) -> Self {
        self.score_ops += positions as u64;
        self
    }

    pub fn total(&self) -> u64 {
        self.score_ops + self.attended_pairs
    }
}
