//! Dense row-major matrices and the scaled dot-product attention every other
//! module builds on. Storage and accumulation are both `f64`; the on-disk
//! tensor format narrows to `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SparsityMask;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite entry at flat index {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t: {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One head's queries, keys and values for `L` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

impl TokenSequence {
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix) -> Result<Self> {
        let (l, d) = (queries.rows(), queries.cols());
        if l == 0 {
            return Err(Error::InvalidArgument("token sequence must be non-empty".into()));
        }
        for (name, m) in [("keys", &keys), ("values", &values)] {
            if m.rows() != l || m.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, queries are {l}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self { queries, keys, values })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.queries.cols()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`. A zero-norm operand yields 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax over the entries flagged in `valid`; invalid
/// entries come back as exactly 0.
pub fn softmax_row(scores: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != valid.len() {
        return Err(Error::Shape("scores and validity flags differ in length".into()));
    }
    let max = scores
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionRow);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(valid)
        .map(|(&s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

/// Attention output of query row `i` over the key indices `keys`
/// (ascending), written into `out`.
fn attend_row(seq: &TokenSequence, i: usize, keys: &[usize], out: &mut [f64]) {
    let scale = 1.0 / (seq.head_dim() as f64).sqrt();
    let q = seq.queries.row(i);
    let mut w: Vec<f64> = keys.iter().map(|&j| dot(q, seq.keys.row(j)) * scale).collect();
    softmax_in_place(&mut w);
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&j, &p) in keys.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(seq.values.row(j)) {
            *o += p * v;
        }
    }
}

/// Causal scaled dot-product attention, optionally restricted to a sparsity
/// mask. Both routes share one row kernel, so the full causal mask and
/// `None` give bitwise-identical outputs.
pub fn dense_attention(seq: &TokenSequence, mask: Option<&SparsityMask>) -> Result<Matrix> {
    let l = seq.len();
    if let Some(m) = mask {
        if m.len() != l {
            return Err(Error::Shape(format!("mask is for L={}, sequence has L={l}", m.len())));
        }
    }
    let mut out = Matrix::zeros(l, seq.head_dim());
    let mut causal = Vec::with_capacity(l);
    for i in 0..l {
        let keys: &[usize] = match mask {
            Some(m) => {
                let row = m.row(i);
                if row.is_empty() {
                    return Err(Error::EmptyAttentionRow);
                }
                if row.iter().any(|&j| j > i) {
                    return Err(Error::InvalidArgument(format!("mask row {i} is not causal")));
                }
                row
            }
            None => {
                causal.push(i);
                &causal
            }
        };
        attend_row(seq, i, keys, out.row_mut(i));
    }
    Ok(out)
}

pub const DHT_MAGIC: &[u8; 8] = b"DHSATEN1";

#[derive(Serialize, Deserialize)]
struct DhtHeader {
    rows: usize,
    cols: usize,
    dtype: String,
}

/// Writes `m` in the DHT1 layout: magic, u32-LE header length, JSON header,
/// then row-major little-endian `f32` values.
pub fn write_dht<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&DhtHeader { rows: m.rows, cols: m.cols, dtype: "f32".into() })?;
    w.write_all(DHT_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(m.data.len() * 4);
    for &x in &m.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dht<R: Read>(mut r: R) -> Result<Matrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DHT_MAGIC {
        return Err(Error::Format("not a DHT1 tensor (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: DhtHeader = serde_json::from_slice(&header)?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let n = header.rows * header.cols;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(header.rows, header.cols, data)
}

pub fn to_dht_bytes(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dht(m, &mut buf).expect("writing to a Vec cannot fail");
    buf
}
