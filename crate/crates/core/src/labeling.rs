//! Boundary labels derived from an attention matrix: windowed past/future
//! attention mass, their ratio, hard top-N boundaries and sigmoid soft
//! labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Row-stochastic causal attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Matrix);

impl AttentionMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::Shape(format!("attention matrix is {}x{}", a.rows(), a.cols())));
        }
        for u in 0..a.rows() {
            let row = a.row(u);
            if row[u + 1..].iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidArgument(format!("row {u} attends to the future")));
            }
            if row.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArgument(format!("row {u} has negative mass")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("row {u} sums to {s}")));
            }
        }
        Ok(Self(a))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.0.get(u, v)
    }
}

/// True when position `i` has full windows on both sides and at least one
/// later row to sum over.
pub fn is_candidate(len: usize, i: usize, w: usize) -> bool {
    w >= 1 && i + 1 >= w && i + w + 2 <= len
}

fn window_mass(a: &AttentionMatrix, i: usize, w: usize, cols: std::ops::Range<usize>) -> Option<f64> {
    let l = a.len();
    if !is_candidate(l, i, w) {
        return None;
    }
    let norm = (l - 1 - i - w) as f64;
    let mut s = 0.0;
    for u in i + w + 1..l {
        s += a.0.row(u)[cols.clone()].iter().sum::<f64>();
    }
    Some(s / norm)
}

/// Mean mass later rows put on the window ending at `i`.
pub fn past_mass(a: &AttentionMatrix, i: usize, w: usize) -> Option<f64> {
    window_mass(a, i, w, (i + 1).saturating_sub(w)..i + 1)
}

/// Mean mass later rows put on the window starting at `i + 1`.
pub fn future_mass(a: &AttentionMatrix, i: usize, w: usize) -> Option<f64> {
    window_mass(a, i, w, i + 1..i + 1 + w)
}

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// `(max + ε) / (min + ε)`; symmetric and at least 1.
pub fn attention_ratio(a_fut: f64, a_past: f64, epsilon: f64) -> f64 {
    (a_fut.max(a_past) + epsilon) / (a_fut.min(a_past) + epsilon)
}

/// Up to `max_chunks - 1` positions with ratio above `theta`, highest
/// first, ties to the lower index; returned ascending.
pub fn hard_boundaries(ratios: &[f64], max_chunks: usize, theta: f64) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..ratios.len()).filter(|&i| ratios[i] > theta).collect();
    cand.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]).then(a.cmp(&b)));
    cand.truncate(max_chunks.saturating_sub(1));
    cand.sort_unstable();
    cand
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    E,
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::E => x.ln(),
            LogBase::Ten => x.log10(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelParams {
    pub alpha: f64,
    pub zeta: f64,
    /// Base for both the logarithm and the offset `β = log(2)`.
    pub base: LogBase,
}

impl Default for SoftLabelParams {
    fn default() -> Self {
        Self { alpha: 2.0, zeta: 1e-6, base: LogBase::E }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(α · (log(r + ζ) − log 2))`.
pub fn soft_label(r: f64, p: &SoftLabelParams) -> f64 {
    sigmoid(p.alpha * (p.base.log(r + p.zeta) - p.base.log(2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub window: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub max_chunks: usize,
    pub soft: SoftLabelParams,
}

impl LabelConfig {
    pub fn with_max_chunks(max_chunks: usize) -> Self {
        Self { window: 4, epsilon: DEFAULT_EPSILON, theta: 1.1, max_chunks, soft: SoftLabelParams::default() }
    }
}

/// Labels for one sequence. `positions` are the candidate positions;
/// `ratios` and `soft` are aligned with them. Non-candidates are implicitly
/// soft 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub len: usize,
    pub positions: Vec<usize>,
    pub ratios: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<usize>,
}

impl LabelSet {
    /// Soft label for every position, 0 at non-candidates.
    pub fn dense_soft(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (&p, &s) in self.positions.iter().zip(&self.soft) {
            out[p] = s;
        }
        out
    }
}

/// Past and future masses for every candidate position in one O(L²) pass,
/// keeping a running column sum over the rows below the current window.
fn all_masses(a: &AttentionMatrix, w: usize) -> Vec<(usize, f64, f64)> {
    let l = a.len();
    let mut col = vec![0.0; l];
    let mut next_row = l;
    let mut out = Vec::new();
    for i in (0..l).rev() {
        if !is_candidate(l, i, w) {
            continue;
        }
        while next_row > i + w + 1 {
            next_row -= 1;
            for (c, x) in col.iter_mut().zip(a.0.row(next_row)) {
                *c += x;
            }
        }
        let norm = (l - 1 - i - w) as f64;
        let past: f64 = col[i + 1 - w..=i].iter().sum::<f64>() / norm;
        let fut: f64 = col[i + 1..=i + w].iter().sum::<f64>() / norm;
        out.push((i, past, fut));
    }
    out.reverse();
    out
}

pub fn label_sequence(a: &AttentionMatrix, cfg: &LabelConfig) -> Result<LabelSet> {
    let l = a.len();
    let w = cfg.window;
    if w == 0 {
        return Err(Error::InvalidArgument("label window must be >= 1".into()));
    }
    if l <= 2 * w + 2 {
        return Err(Error::SequenceTooShort { len: l, needed: 2 * w + 2 });
    }
    let masses = all_masses(a, w);
    let positions: Vec<usize> = masses.iter().map(|m| m.0).collect();
    let ratios: Vec<f64> = masses.iter().map(|&(_, p, f)| attention_ratio(f, p, cfg.epsilon)).collect();
    let soft = ratios.iter().map(|&r| soft_label(r, &cfg.soft)).collect();
    let mut full = vec![0.0; l];
    for (&p, &r) in positions.iter().zip(&ratios) {
        full[p] = r;
    }
    let hard = hard_boundaries(&full, cfg.max_chunks, cfg.theta);
    Ok(LabelSet { len: l, positions, ratios, soft, hard })
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub sequence_id: usize,
    pub layer: usize,
    pub len: usize,
    pub positions: Vec<usize>,
    pub soft: Vec<f64>,
    pub hard: Vec<usize>,
}

impl LabelRecord {
    pub fn new(sequence_id: usize, layer: usize, labels: &LabelSet) -> Self {
        Self {
            sequence_id,
            layer,
            len: labels.len,
            positions: labels.positions.clone(),
            soft: labels.soft.clone(),
            hard: labels.hard.clone(),
        }
    }

    pub fn dense_soft(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (&p, &s) in self.positions.iter().zip(&self.soft) {
            out[p] = s;
        }
        out
    }
}

pub fn write_label_file<W: std::io::Write>(records: &[LabelRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_label_file<R: std::io::BufRead>(r: R) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_causal(l: usize) -> AttentionMatrix {
        let mut m = Matrix::zeros(l, l);
        for u in 0..l {
            for v in 0..=u {
                m.set(u, v, 1.0 / (u + 1) as f64);
            }
        }
        AttentionMatrix::new(m).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(attention_ratio(0.3, 0.3, DEFAULT_EPSILON), 1.0);
        assert_abs_diff_eq!(attention_ratio(0.2, 0.1, DEFAULT_EPSILON), 0.201 / 0.101, epsilon = 1e-12);
        assert_abs_diff_eq!(attention_ratio(0.2, 0.1, DEFAULT_EPSILON), 1.9901, epsilon = 1e-4);
        assert_eq!(attention_ratio(0.0, 0.0, DEFAULT_EPSILON), 1.0);
        assert_eq!(attention_ratio(0.1, 0.2, DEFAULT_EPSILON), attention_ratio(0.2, 0.1, DEFAULT_EPSILON));
    }

    #[test]
    fn soft_label_examples() {
        let p = SoftLabelParams::default();
        assert_abs_diff_eq!(soft_label(2.0, &p), 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(soft_label(1.0, &p), 0.2, epsilon = 1e-4);
        assert!(soft_label(1e12, &p) > 0.999_999);
        let ten = SoftLabelParams { base: LogBase::Ten, ..p };
        assert_abs_diff_eq!(soft_label(2.0, &ten), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn hard_examples() {
        assert!(hard_boundaries(&[1.0; 6], 4, 1.1).is_empty());
        assert_eq!(hard_boundaries(&[1.0, 5.0, 1.2, 3.0], 3, 1.1), vec![1, 3]);
        assert!(hard_boundaries(&[1.0, 5.0, 1.2, 3.0], 1, 1.1).is_empty());
        assert_eq!(hard_boundaries(&[2.0, 2.0, 2.0], 3, 1.1), vec![0, 1]);
    }

    #[test]
    fn masses_by_hand() {
        // w = 1, L = 4, i = 1: one later row (u = 3), normalizer 1.
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.2, 0.3, 0.5, 0.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ])
        .unwrap();
        let a = AttentionMatrix::new(a).unwrap();
        assert_abs_diff_eq!(past_mass(&a, 1, 1).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(future_mass(&a, 1, 1).unwrap(), 0.3, epsilon = 1e-15);
        assert!(past_mass(&a, 2, 1).is_none());
    }

    #[test]
    fn sink_token_indicator() {
        let l = 16;
        let mut m = Matrix::zeros(l, l);
        for u in 0..l {
            m.set(u, 0, 1.0);
        }
        let a = AttentionMatrix::new(m).unwrap();
        for i in 3..l - 5 {
            let p = past_mass(&a, i, 4).unwrap();
            assert_eq!(p, if i < 4 { 1.0 } else { 0.0 }, "i={i}");
        }
    }

    #[test]
    fn uniform_has_no_boundaries() {
        let labels = label_sequence(&uniform_causal(40), &LabelConfig::with_max_chunks(4)).unwrap();
        assert!(labels.hard.is_empty());
        assert!(labels.ratios.iter().all(|&r| r < 1.1));
    }

    #[test]
    fn single_planted_block_boundary() {
        let (l, k) = (30, 13);
        let mut m = Matrix::zeros(l, l);
        for u in 0..l {
            let start = if u < k { 0 } else { k };
            for v in start..=u {
                m.set(u, v, 1.0 / (u + 1 - start) as f64);
            }
        }
        let labels = label_sequence(&AttentionMatrix::new(m).unwrap(), &LabelConfig::with_max_chunks(2)).unwrap();
        assert_eq!(labels.hard, vec![k - 1]);
    }

    #[test]
    fn short_sequence_rejected() {
        let err = label_sequence(&uniform_causal(10), &LabelConfig::with_max_chunks(2)).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { .. }));
    }

    #[test]
    fn rejects_non_stochastic() {
        let m = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(AttentionMatrix::new(m).is_err());
    }
}
