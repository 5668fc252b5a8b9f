//! Forward and hand-derived backward passes.

use crate::error::{Error, Result};
use crate::labeling::sigmoid;
use crate::par::Exec;
use crate::tensor::{cosine_similarity, dot, norm, Matrix};

use super::loss::{focal_bce, focal_bce_grad, FocalParams, P_MAX, P_MIN};
use super::PredictorParams;

/// Keys of one sequence with the positions to score and their soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub keys: Matrix,
    pub positions: Vec<usize>,
    pub targets: Vec<f64>,
}

/// `y = W x` for row-major `W` of shape `out x x.len()`.
fn matvec(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = dot(&w[o * n..(o + 1) * n], x);
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (d, wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
            *d += g * wi;
        }
    }
}

/// `dW += dy xᵀ`.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (d, xi) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
}

/// Intermediate values of one encoded window, all `w x d` row-major except
/// `probs` (`heads x w x w`) and the pooled output `out` (`d`).
#[derive(Debug, Clone)]
struct WindowTrace {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    z: Vec<f64>,
    out: Vec<f64>,
}

fn window_forward(p: &PredictorParams, rows: &[&[f64]]) -> WindowTrace {
    let c = p.config();
    let l = p.layout();
    let (w, d, dh) = (c.window, c.dim, c.head_dim());
    let mut x: Vec<f64> = rows.concat();
    if c.positional {
        for (xi, b) in x.iter_mut().zip(p.block(&l.pos)) {
            *xi += b;
        }
    }
    let mut q = vec![0.0; w * d];
    let mut k = vec![0.0; w * d];
    let mut v = vec![0.0; w * d];
    for a in 0..w {
        let xa = &x[a * d..(a + 1) * d];
        matvec(p.block(&l.wq), xa, &mut q[a * d..(a + 1) * d]);
        matvec(p.block(&l.wk), xa, &mut k[a * d..(a + 1) * d]);
        matvec(p.block(&l.wv), xa, &mut v[a * d..(a + 1) * d]);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; c.heads * w * w];
    let mut z = vec![0.0; w * d];
    for h in 0..c.heads {
        let hs = h * dh..(h + 1) * dh;
        for a in 0..w {
            let row = &mut probs[(h * w + a) * w..(h * w + a + 1) * w];
            let qa = &q[a * d..][hs.clone()];
            for (b, s) in row.iter_mut().enumerate() {
                *s = dot(qa, &k[b * d..][hs.clone()]) * scale;
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            row.iter_mut().for_each(|s| *s /= sum);
            let za = &mut z[a * d..][hs.clone()];
            for (b, &pab) in row.iter().enumerate() {
                for (zi, vi) in za.iter_mut().zip(&v[b * d..][hs.clone()]) {
                    *zi += pab * vi;
                }
            }
        }
    }
    let mut out = vec![0.0; d];
    let mut o = vec![0.0; d];
    for a in 0..w {
        matvec(p.block(&l.wo), &z[a * d..(a + 1) * d], &mut o);
        for (e, oi) in out.iter_mut().zip(&o) {
            *e += oi;
        }
    }
    out.iter_mut().for_each(|e| *e /= w as f64);
    WindowTrace { x, q, k, v, probs, z, out }
}

fn window_backward(p: &PredictorParams, t: &WindowTrace, dout: &[f64], grad: &mut [f64]) {
    let c = p.config();
    let l = p.layout();
    let (w, d, dh) = (c.window, c.dim, c.head_dim());
    let d_o: Vec<f64> = dout.iter().map(|g| g / w as f64).collect();
    let mut dz = vec![0.0; w * d];
    for a in 0..w {
        outer_acc(&mut grad[l.wo.clone()], &d_o, &t.z[a * d..(a + 1) * d]);
        matvec_t_acc(p.block(&l.wo), &d_o, &mut dz[a * d..(a + 1) * d]);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; w * d];
    let mut dk = vec![0.0; w * d];
    let mut dv = vec![0.0; w * d];
    let mut dp = vec![0.0; w];
    for h in 0..c.heads {
        let hs = h * dh..(h + 1) * dh;
        for a in 0..w {
            let probs = &t.probs[(h * w + a) * w..(h * w + a + 1) * w];
            let dza = &dz[a * d..][hs.clone()];
            for b in 0..w {
                dp[b] = dot(dza, &t.v[b * d..][hs.clone()]);
                for (g, &x) in dv[b * d..][hs.clone()].iter_mut().zip(dza) {
                    *g += probs[b] * x;
                }
            }
            let mean: f64 = probs.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for b in 0..w {
                let ds = probs[b] * (dp[b] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                for i in hs.clone() {
                    dq[a * d + i] += ds * t.k[b * d + i];
                    dk[b * d + i] += ds * t.q[a * d + i];
                }
            }
        }
    }
    let mut dx = vec![0.0; d];
    for a in 0..w {
        let xa = &t.x[a * d..(a + 1) * d];
        let (dqa, dka, dva) = (&dq[a * d..(a + 1) * d], &dk[a * d..(a + 1) * d], &dv[a * d..(a + 1) * d]);
        outer_acc(&mut grad[l.wq.clone()], dqa, xa);
        outer_acc(&mut grad[l.wk.clone()], dka, xa);
        outer_acc(&mut grad[l.wv.clone()], dva, xa);
        if c.positional {
            dx.iter_mut().for_each(|g| *g = 0.0);
            matvec_t_acc(p.block(&l.wq), dqa, &mut dx);
            matvec_t_acc(p.block(&l.wk), dka, &mut dx);
            matvec_t_acc(p.block(&l.wv), dva, &mut dx);
            for (g, x) in grad[l.pos.start + a * d..l.pos.start + (a + 1) * d].iter_mut().zip(&dx) {
                *g += x;
            }
        }
    }
}

/// Multi-head self-attention over exactly `window` key vectors followed by
/// average pooling.
pub fn encode_window(p: &PredictorParams, keys: &[&[f64]]) -> Result<Vec<f64>> {
    let c = p.config();
    if keys.len() != c.window {
        return Err(Error::Shape(format!("window holds {} keys, expected {}", keys.len(), c.window)));
    }
    if keys.iter().any(|k| k.len() != c.dim) {
        return Err(Error::Shape(format!("window keys must have width {}", c.dim)));
    }
    Ok(window_forward(p, keys).out)
}

/// `[l, r, |l - r|, l ⊙ r, cos(l, r)]`.
pub fn fuse(left: &[f64], right: &[f64]) -> Result<Vec<f64>> {
    let cos = cosine_similarity(left, right)?;
    let mut h = Vec::with_capacity(4 * left.len() + 1);
    h.extend_from_slice(left);
    h.extend_from_slice(right);
    h.extend(left.iter().zip(right).map(|(a, b)| (a - b).abs()));
    h.extend(left.iter().zip(right).map(|(a, b)| a * b));
    h.push(cos);
    Ok(h)
}

fn fuse_backward(left: &[f64], right: &[f64], dh: &[f64], dl: &mut [f64], dr: &mut [f64]) {
    let d = left.len();
    let (nl, nr) = (norm(left), norm(right));
    let dcos = dh[4 * d];
    let cos = if nl > 0.0 && nr > 0.0 { dot(left, right) / (nl * nr) } else { 0.0 };
    for i in 0..d {
        let s = (left[i] - right[i]).signum() * f64::from(left[i] != right[i]);
        let mut gl = dh[i] + s * dh[2 * d + i] + right[i] * dh[3 * d + i];
        let mut gr = dh[d + i] - s * dh[2 * d + i] + left[i] * dh[3 * d + i];
        if nl > 0.0 && nr > 0.0 {
            gl += dcos * (right[i] / (nl * nr) - cos * left[i] / (nl * nl));
            gr += dcos * (left[i] / (nl * nr) - cos * right[i] / (nr * nr));
        }
        dl[i] = gl;
        dr[i] = gr;
    }
}

struct HeadTrace {
    h: Vec<f64>,
    a1: Vec<f64>,
    r1: Vec<f64>,
    prob: f64,
}

fn head_forward(p: &PredictorParams, left: &[f64], right: &[f64]) -> HeadTrace {
    let l = p.layout();
    let h = fuse(left, right).expect("window encodings share a width");
    let mut a1 = vec![0.0; p.config().hidden];
    matvec(p.block(&l.w1), &h, &mut a1);
    for (a, b) in a1.iter_mut().zip(p.block(&l.b1)) {
        *a += b;
    }
    let r1: Vec<f64> = a1.iter().map(|&a| a.max(0.0)).collect();
    let logit = dot(p.block(&l.w2), &r1) + p.block(&l.b2)[0];
    HeadTrace { h, a1, r1, prob: sigmoid(logit) }
}

/// Whether both side windows of position `i` fit inside a sequence of
/// length `len`.
pub fn is_evaluable(len: usize, i: usize, window: usize) -> bool {
    i + 1 >= window && i + window < len
}

fn window_rows(keys: &Matrix, start: usize, w: usize) -> Vec<&[f64]> {
    (start..start + w).map(|t| keys.row(t)).collect()
}

/// Boundary probability for position `i`.
pub fn predict(p: &PredictorParams, keys: &Matrix, i: usize) -> Result<f64> {
    let w = p.config().window;
    if keys.cols() != p.config().dim {
        return Err(Error::Shape(format!("keys have width {}, predictor expects {}", keys.cols(), p.config().dim)));
    }
    if !is_evaluable(keys.rows(), i, w) {
        return Err(Error::InvalidArgument(format!("position {i} lacks full windows")));
    }
    let left = window_forward(p, &window_rows(keys, i + 1 - w, w)).out;
    let right = window_forward(p, &window_rows(keys, i + 1, w)).out;
    Ok(head_forward(p, &left, &right).prob)
}

/// Probabilities for every position; positions without full windows score 0.
/// Each window is encoded once and shared by the two positions using it.
pub fn predict_sequence(p: &PredictorParams, keys: &Matrix, exec: Exec) -> Result<Vec<f64>> {
    let (len, w) = (keys.rows(), p.config().window);
    if keys.cols() != p.config().dim {
        return Err(Error::Shape(format!("keys have width {}, predictor expects {}", keys.cols(), p.config().dim)));
    }
    if len < 2 * w {
        return Ok(vec![0.0; len]);
    }
    let enc: Vec<Vec<f64>> = exec.map(len - w + 1, |s| window_forward(p, &window_rows(keys, s, w)).out);
    Ok(exec.map(len, |i| {
        if is_evaluable(len, i, w) {
            head_forward(p, &enc[i + 1 - w], &enc[i + 1]).prob
        } else {
            0.0
        }
    }))
}

fn check_example(p: &PredictorParams, ex: &Example) -> Result<()> {
    let w = p.config().window;
    if ex.keys.cols() != p.config().dim {
        return Err(Error::Shape("example keys do not match predictor width".into()));
    }
    if ex.positions.len() != ex.targets.len() {
        return Err(Error::Shape("positions and targets differ in length".into()));
    }
    if let Some(&i) = ex.positions.iter().find(|&&i| !is_evaluable(ex.keys.rows(), i, w)) {
        return Err(Error::InvalidArgument(format!("position {i} lacks full windows")));
    }
    Ok(())
}

/// Summed loss over the example's positions; the gradient of that sum is
/// added into `grad`. Also returns the predicted probabilities.
pub fn sequence_loss_and_grad(
    p: &PredictorParams,
    ex: &Example,
    focal: &FocalParams,
    grad: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    check_example(p, ex)?;
    let (w, d) = (p.config().window, p.config().dim);
    let lay = p.layout().clone();
    let n_windows = (ex.keys.rows() + 1).saturating_sub(w);
    let mut traces: Vec<Option<WindowTrace>> = vec![None; n_windows];
    for &i in &ex.positions {
        for s in [i + 1 - w, i + 1] {
            if traces[s].is_none() {
                traces[s] = Some(window_forward(p, &window_rows(&ex.keys, s, w)));
            }
        }
    }
    let mut dwin: Vec<Option<Vec<f64>>> = vec![None; n_windows];
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(ex.positions.len());
    let (mut dl, mut dr) = (vec![0.0; d], vec![0.0; d]);
    for (&i, &y) in ex.positions.iter().zip(&ex.targets) {
        let (sl, sr) = (i + 1 - w, i + 1);
        let left = &traces[sl].as_ref().expect("encoded above").out;
        let right = &traces[sr].as_ref().expect("encoded above").out;
        let t = head_forward(p, left, right);
        total += focal_bce(t.prob, y, focal);
        probs.push(t.prob);
        let dlogit = focal_bce_grad(t.prob, y, focal) * t.prob * (1.0 - t.prob);
        if dlogit == 0.0 {
            continue;
        }
        grad[lay.b2.start] += dlogit;
        for (g, r) in grad[lay.w2.clone()].iter_mut().zip(&t.r1) {
            *g += dlogit * r;
        }
        let da1: Vec<f64> = t
            .a1
            .iter()
            .zip(p.block(&lay.w2))
            .map(|(&a, &w2)| if a > 0.0 { dlogit * w2 } else { 0.0 })
            .collect();
        for (g, x) in grad[lay.b1.clone()].iter_mut().zip(&da1) {
            *g += x;
        }
        outer_acc(&mut grad[lay.w1.clone()], &da1, &t.h);
        let mut dh = vec![0.0; t.h.len()];
        matvec_t_acc(p.block(&lay.w1), &da1, &mut dh);
        fuse_backward(left, right, &dh, &mut dl, &mut dr);
        for (s, g) in [(sl, &dl), (sr, &dr)] {
            let acc = dwin[s].get_or_insert_with(|| vec![0.0; d]);
            for (a, x) in acc.iter_mut().zip(g.iter()) {
                *a += x;
            }
        }
    }
    for (s, g) in dwin.iter().enumerate() {
        if let Some(g) = g {
            window_backward(p, traces[s].as_ref().expect("window has a trace"), g, grad);
        }
    }
    Ok((total, probs))
}

/// Summed loss plus a fingerprint of every non-smooth branch taken (ReLU
/// gates, `|l - r|` signs, probability clamps). Two evaluations with equal
/// fingerprints lie on the same smooth piece of the loss.
pub(super) fn loss_with_branches(
    p: &PredictorParams,
    examples: &[Example],
    focal: &FocalParams,
) -> Result<(f64, Vec<i8>)> {
    let w = p.config().window;
    let mut total = 0.0;
    let mut branches = Vec::new();
    for ex in examples {
        check_example(p, ex)?;
        for (&i, &y) in ex.positions.iter().zip(&ex.targets) {
            let left = window_forward(p, &window_rows(&ex.keys, i + 1 - w, w)).out;
            let right = window_forward(p, &window_rows(&ex.keys, i + 1, w)).out;
            let t = head_forward(p, &left, &right);
            total += focal_bce(t.prob, y, focal);
            branches.extend(t.a1.iter().map(|&a| i8::from(a > 0.0)));
            branches.extend(left.iter().zip(&right).map(|(a, b)| (a - b).signum() as i8 * i8::from(a != b)));
            branches.push(if t.prob < P_MIN { -1 } else { i8::from(t.prob > P_MAX) });
        }
    }
    Ok((total, branches))
}
