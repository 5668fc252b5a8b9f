//! Brute-force reference implementations. Plain nested loops over indices,
//! written from the definitions and sharing no code with the library's
//! kernels. Included by path from other test targets.

#![allow(dead_code, clippy::needless_range_loop)]

use dhsa::predictor::PredictorParams;
use dhsa::{BoundarySet, Matrix};

/// Causal softmax attention where `allowed(i, j)` picks the keys of row `i`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let (l, d) = (q.rows(), q.cols());
    let mut out = vec![vec![0.0; v.cols()]; l];
    for i in 0..l {
        let mut scores = Vec::new();
        for j in 0..=i {
            if allowed(i, j) {
                let mut s = 0.0;
                for t in 0..d {
                    s += q.get(i, t) * k.get(j, t);
                }
                scores.push((j, s / (d as f64).sqrt()));
            }
        }
        let mut max = f64::NEG_INFINITY;
        for &(_, s) in &scores {
            if s > max {
                max = s;
            }
        }
        let mut z = 0.0;
        for &(_, s) in &scores {
            z += (s - max).exp();
        }
        for &(j, s) in &scores {
            let p = (s - max).exp() / z;
            for t in 0..v.cols() {
                out[i][t] += p * v.get(j, t);
            }
        }
    }
    out
}

/// Window encoder: per-head scaled attention over the window, output
/// projection, then the mean over window positions.
pub fn encode_window(p: &PredictorParams, keys: &[Vec<f64>]) -> Vec<f64> {
    let c = *p.config();
    let lay = p.layout().clone();
    let (w, d, nh) = (c.window, c.dim, c.heads);
    let dh = d / nh;
    let wq = p.block(&lay.wq);
    let wk = p.block(&lay.wk);
    let wv = p.block(&lay.wv);
    let wo = p.block(&lay.wo);
    let pos = p.block(&lay.pos);
    let mut x = vec![vec![0.0; d]; w];
    for a in 0..w {
        for t in 0..d {
            x[a][t] = keys[a][t] + if c.positional { pos[a * d + t] } else { 0.0 };
        }
    }
    let proj = |m: &[f64], xa: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; d];
        for o in 0..d {
            for t in 0..d {
                y[o] += m[o * d + t] * xa[t];
            }
        }
        y
    };
    let q: Vec<Vec<f64>> = x.iter().map(|xa| proj(wq, xa)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|xa| proj(wk, xa)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|xa| proj(wv, xa)).collect();
    let mut z = vec![vec![0.0; d]; w];
    for h in 0..nh {
        for a in 0..w {
            let mut s = vec![0.0; w];
            for b in 0..w {
                for t in h * dh..(h + 1) * dh {
                    s[b] += q[a][t] * k[b][t];
                }
                s[b] /= (dh as f64).sqrt();
            }
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = s.iter().map(|x| (x - max).exp()).sum();
            for b in 0..w {
                let pab = (s[b] - max).exp() / den;
                for t in h * dh..(h + 1) * dh {
                    z[a][t] += pab * v[b][t];
                }
            }
        }
    }
    let mut out = vec![0.0; d];
    for za in &z {
        let o = proj(wo, za);
        for t in 0..d {
            out[t] += o[t] / w as f64;
        }
    }
    out
}

/// `Σ x / √n` per chunk, which equals `√n · mean`.
pub fn chunk_reps(m: &Matrix, bounds: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in 0..bounds.len() - 1 {
        let n = (bounds[c + 1] - bounds[c]) as f64;
        let mut r = vec![0.0; m.cols()];
        for i in bounds[c]..bounds[c + 1] {
            for t in 0..m.cols() {
                r[t] += m.get(i, t);
            }
        }
        out.push(r.into_iter().map(|x| x / n.sqrt()).collect());
    }
    out
}

fn chunk_index(bounds: &[usize], t: usize) -> usize {
    let mut c = 0;
    while bounds[c + 1] <= t {
        c += 1;
    }
    c
}

pub fn upsample(scores: &Matrix, bounds: &[usize]) -> Vec<Vec<f64>> {
    let l = *bounds.last().unwrap();
    let mut out = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            out[i][j] = scores.get(chunk_index(bounds, i), chunk_index(bounds, j));
        }
    }
    out
}

/// Repeated arg-max selection over causal keys: self first, then the
/// highest remaining score, lower index on ties.
pub fn topk_row(scores: &[f64], row: usize, budget: usize) -> Vec<usize> {
    let k = budget.min(row + 1);
    let mut picked = vec![row];
    while picked.len() < k {
        let mut best: Option<usize> = None;
        for j in 0..row {
            if picked.contains(&j) {
                continue;
            }
            best = match best {
                Some(b) if scores[b] >= scores[j] => Some(b),
                _ => Some(j),
            };
        }
        picked.push(best.unwrap());
    }
    picked.sort();
    picked
}

/// NMS by exhaustive search. Greedy suppression returns the separated
/// candidate set that is best under this order: compare confidence ranks
/// position by position, and a set that extends another is better. Positions
/// at distance `<= window` conflict; at most `max_chunks - 1` accepted
/// positions other than `L-1` are allowed, and `L-1` is dropped from the
/// output.
pub fn nms_boundaries(scores: &[f64], min_conf: f64, window: usize, max_chunks: usize) -> Vec<usize> {
    let l = scores.len();
    let mut cand: Vec<usize> = (0..l).filter(|&i| scores[i] > min_conf).collect();
    cand.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let n = cand.len();
    assert!(n <= 16, "oracle is exponential in candidates");
    let mut best: Vec<usize> = Vec::new();
    for mask in 0u32..(1 << n) {
        let ranks: Vec<usize> = (0..n).filter(|r| mask >> r & 1 == 1).collect();
        let pos: Vec<usize> = ranks.iter().map(|&r| cand[r]).collect();
        let separated = pos.iter().all(|&a| pos.iter().all(|&b| a == b || a.abs_diff(b) > window));
        let interior = pos.iter().filter(|&&p| p != l - 1).count();
        if !separated || interior > max_chunks - 1 {
            continue;
        }
        if better(&ranks, &best) {
            best = ranks;
        }
    }
    let mut out = vec![0, l];
    out.extend(best.iter().map(|&r| cand[r]).filter(|&p| p != l - 1).map(|p| p + 1));
    out.sort();
    out
}

fn better(a: &[usize], b: &[usize]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x < y;
        }
    }
    a.len() > b.len()
}

/// Mean mass that rows `i+w+1..L` put on columns `cols`.
pub fn window_mass(a: &Matrix, i: usize, w: usize, cols: std::ops::Range<usize>) -> f64 {
    let l = a.rows();
    let mut s = 0.0;
    for u in i + w + 1..l {
        for v in cols.clone() {
            s += a.get(u, v);
        }
    }
    s / (l - 1 - i - w) as f64
}

pub fn bounds_vec(b: &BoundarySet) -> Vec<usize> {
    b.as_slice().to_vec()
}
