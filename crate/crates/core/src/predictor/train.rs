//! Mini-batch training with Adam, plus boundary metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

use super::loss::FocalParams;
use super::model::{predict_sequence, sequence_loss_and_grad, Example};
use super::PredictorParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub focal: FocalParams,
    pub seed: u64,
    /// Pooled top-K size cap.
    pub top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            adam: AdamConfig::default(),
            focal: FocalParams::default(),
            seed: 0,
            top_k: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub topk_overlap: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub topk_overlap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: PredictorParams,
    pub history: Vec<EpochMetrics>,
}

/// `|topK(pred) ∩ topK(label)| / K`, each ranking descending with ties to
/// the lower index.
pub fn topk_overlap(pred: &[f64], label: &[f64], k: usize) -> f64 {
    assert_eq!(pred.len(), label.len());
    let k = k.min(pred.len());
    if k == 0 {
        return 1.0;
    }
    let top = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut t = idx[..k].to_vec();
        t.sort_unstable();
        t
    };
    let (a, b) = (top(pred), top(label));
    let shared = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    shared as f64 / k as f64
}

/// Precision, recall and F1 with soft labels `>= 0.5` as positives and
/// predictions `>= 0.5` as detections, pooled over every labelled position
/// of every example; top-K overlap pooled the same way with
/// `K = min(top_k, positions)`.
pub fn evaluate(params: &PredictorParams, examples: &[Example], top_k: usize, exec: Exec) -> Result<BinaryMetrics> {
    let scored: Vec<Result<Vec<f64>>> = exec.map(examples.len(), |e| {
        let all = predict_sequence(params, &examples[e].keys, Exec::Sequential)?;
        Ok(examples[e].positions.iter().map(|&i| all[i]).collect())
    });
    let mut pred = Vec::new();
    let mut label = Vec::new();
    for (s, ex) in scored.into_iter().zip(examples) {
        pred.extend(s?);
        label.extend_from_slice(&ex.targets);
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(&label) {
        match (p >= 0.5, y >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let k = top_k.min(pred.len());
    Ok(BinaryMetrics { precision, recall, f1, topk_overlap: topk_overlap(&pred, &label, k), k })
}

/// Trains on `train_set`, scoring metrics after each epoch on `eval_set`
/// (or the training set when none is given). Per-example gradients may be
/// computed in parallel; they are summed in batch order, so results do not
/// depend on `exec`.
pub fn train(
    params: &PredictorParams,
    train_set: &[Example],
    eval_set: Option<&[Example]>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut params = params.clone();
    let n = params.flat().len();
    let mut adam = Adam::new(cfg.adam, n);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<Result<(f64, Vec<f64>)>> = exec.map(batch.len(), |b| {
                let mut g = vec![0.0; n];
                let (loss, _) = sequence_loss_and_grad(&params, &train_set[batch[b]], &cfg.focal, &mut g)?;
                Ok((loss, g))
            });
            let count: usize = batch.iter().map(|&e| train_set[e].positions.len()).sum();
            if count == 0 {
                continue;
            }
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            for part in parts {
                let (l, g) = part?;
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, detail: format!("batch loss {loss}") });
            }
            let scale = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(params.flat_mut(), &grad);
            if params.flat().iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { epoch, detail: "non-finite weight after update".into() });
            }
            epoch_loss += loss;
            epoch_count += count;
        }
        let m = evaluate(&params, eval_set.unwrap_or(train_set), cfg.top_k, exec)?;
        history.push(EpochMetrics {
            epoch,
            loss: epoch_loss / epoch_count.max(1) as f64,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            topk_overlap: m.topk_overlap,
        });
    }
    Ok(TrainReport { params, history })
}
