//! Synthetic planted-segment corpora and the dense / static / dynamic mask
//! comparison.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chunk_repr::{aggregate_heads, build_chunk_reps, chunk_similarity, HeadAggregation};
use crate::chunking::{nms_boundaries, static_boundaries, BoundarySet, NmsConfig};
use crate::error::{Error, Result};
use crate::labeling::{label_sequence, AttentionMatrix, LabelConfig, LabelSet};
use crate::mask::{mask_from_chunk_scores, Budget, CostCounters, SparsityMask};
use crate::par::Exec;
use crate::predictor::{is_evaluable, predict_sequence, Example, PredictorParams};
use crate::tensor::{cosine_similarity, dense_attention, Matrix, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedCorpusSpec {
    pub num_sequences: usize,
    pub len: usize,
    /// Per-head query/key/value width.
    pub dim: usize,
    pub heads: usize,
    pub num_segments: usize,
    /// Mean fraction of a row's attention that leaks into the previous
    /// segment, over rows that have one.
    pub leakage: f64,
    pub seed: u64,
}

impl PlantedCorpusSpec {
    /// Shortest segment allowed by the layout sampler. Short sequences that
    /// cannot fit 12-token segments fall back to an even split.
    pub fn min_segment_len(&self) -> usize {
        let n = self.num_segments.max(1);
        12usize.min(self.len / n).max(self.len / (3 * n))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_segments < 2 {
            return bad("a planted corpus needs at least 2 segments".into());
        }
        if !(0.0..0.5).contains(&self.leakage) {
            return bad(format!("leakage {} outside [0, 0.5)", self.leakage));
        }
        if self.dim == 0 || self.heads == 0 {
            return bad("dim and heads must be positive".into());
        }
        if self.min_segment_len() < 2 {
            return bad(format!("L={} is too short for {} segments", self.len, self.num_segments));
        }
        Ok(())
    }
}

/// One generated sequence: per-head tokens, the planted boundaries and the
/// planted causal attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSequence {
    pub heads: Vec<TokenSequence>,
    pub boundaries: BoundarySet,
    pub attention: AttentionMatrix,
}

impl PlantedSequence {
    pub fn len(&self) -> usize {
        self.boundaries.seq_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Segment lengths proportional to Gamma(2, 1) draws, each at least
/// `min_len`, resampled until the remainder also fits.
fn sample_layout<R: Rng>(len: usize, segments: usize, min_len: usize, rng: &mut R) -> Result<BoundarySet> {
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma parameters");
    loop {
        let w: Vec<f64> = (0..segments).map(|_| gamma.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        let mut lens: Vec<usize> =
            w[..segments - 1].iter().map(|x| ((x / total * len as f64) as usize).max(min_len)).collect();
        let used: usize = lens.iter().sum();
        if used + min_len > len {
            continue;
        }
        lens.push(len - used);
        let mut idx = vec![0];
        for l in lens {
            idx.push(idx.last().expect("non-empty") + l);
        }
        return BoundarySet::new(idx);
    }
}

/// Weight of previous-segment token at distance `j` from that segment's end.
fn leak_profile(j: usize) -> f64 {
    let x = j as f64 + 0.5;
    x * x * 0.6f64.powi(j as i32)
}

/// Extra weight every row puts on the first token of its own segment.
const SEGMENT_SINK: f64 = 2.0;

/// Row-normalized planted attention for leak strength `beta`, and its mean
/// leaked fraction over rows with a previous segment.
fn planted_attention(bounds: &BoundarySet, beta: f64) -> (Matrix, f64) {
    let l = bounds.seq_len();
    let mut a = Matrix::zeros(l, l);
    let mut leak_sum = 0.0;
    let mut leak_rows = 0usize;
    for (t, seg) in bounds.chunks().enumerate() {
        let prev = (t > 0).then(|| {
            let r = bounds.chunk(t - 1);
            let raw: Vec<f64> = (0..r.len()).map(|x| leak_profile(r.len() - 1 - x)).collect();
            let z: f64 = raw.iter().sum();
            (r.start, raw.into_iter().map(|x| x / z).collect::<Vec<f64>>())
        });
        for u in seg.clone() {
            let own = (u - seg.start + 1) as f64 + SEGMENT_SINK;
            let leak = if prev.is_some() { beta } else { 0.0 };
            let total = own + leak;
            let row = a.row_mut(u);
            row[seg.start..=u].fill(1.0 / total);
            row[seg.start] += SEGMENT_SINK / total;
            if let Some((start, pi)) = &prev {
                for (x, p) in pi.iter().enumerate() {
                    row[start + x] = beta * p / total;
                }
                leak_sum += leak / total;
                leak_rows += 1;
            }
        }
    }
    (a, if leak_rows == 0 { 0.0 } else { leak_sum / leak_rows as f64 })
}

/// Leak strength giving the requested mean leaked fraction.
fn solve_leak_strength(bounds: &BoundarySet, leakage: f64) -> f64 {
    if leakage == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while planted_attention(bounds, hi).1 < leakage {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if planted_attention(bounds, mid).1 < leakage {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Noise scale on each token relative to its unit segment direction.
const TOKEN_NOISE: f64 = 0.5;
/// Weight of the previous segment's direction in a query.
const QUERY_CARRY: f64 = 0.5;

fn planted_heads<R: Rng>(spec: &PlantedCorpusSpec, bounds: &BoundarySet, rng: &mut R) -> Result<Vec<TokenSequence>> {
    let (l, d) = (spec.len, spec.dim);
    let sigma = TOKEN_NOISE / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    for _ in 0..spec.heads {
        let dirs: Vec<Vec<f64>> = (0..bounds.num_chunks()).map(|_| unit_vector(d, rng)).collect();
        let mut q = Vec::with_capacity(l * d);
        let mut k = Vec::with_capacity(l * d);
        let mut v = Vec::with_capacity(l * d);
        for t in 0..l {
            let s = bounds.chunk_of(t);
            let prev = (s > 0).then(|| &dirs[s - 1]);
            for (x, base) in dirs[s].iter().enumerate() {
                let carry = prev.map_or(0.0, |p| QUERY_CARRY * p[x]);
                let nq: f64 = rng.sample(StandardNormal);
                q.push(base + carry + sigma * nq);
            }
            for base in &dirs[s] {
                let nk: f64 = rng.sample(StandardNormal);
                k.push(base + sigma * nk);
            }
            for _ in 0..d {
                v.push(rng.sample(StandardNormal));
            }
        }
        heads.push(TokenSequence::new(
            Matrix::from_vec(l, d, q)?,
            Matrix::from_vec(l, d, k)?,
            Matrix::from_vec(l, d, v)?,
        )?);
    }
    Ok(heads)
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one sequence of the corpus; sequences are independent, so any
/// subset can be regenerated on its own.
pub fn gen_planted_sequence(spec: &PlantedCorpusSpec, index: usize) -> Result<PlantedSequence> {
    spec.validate()?;
    let mut rng = sequence_rng(spec.seed, index);
    let bounds = sample_layout(spec.len, spec.num_segments, spec.min_segment_len(), &mut rng)?;
    let beta = solve_leak_strength(&bounds, spec.leakage);
    let (a, _) = planted_attention(&bounds, beta);
    let heads = planted_heads(spec, &bounds, &mut rng)?;
    Ok(PlantedSequence { heads, boundaries: bounds, attention: AttentionMatrix::new(a)? })
}

pub fn gen_planted(spec: &PlantedCorpusSpec, exec: Exec) -> Result<Vec<PlantedSequence>> {
    spec.validate()?;
    exec.map(spec.num_sequences, |i| gen_planted_sequence(spec, i)).into_iter().collect()
}

/// Measured mean leaked fraction of a planted matrix (rows with a previous
/// segment only).
pub fn measured_leakage(seq: &PlantedSequence) -> f64 {
    let b = &seq.boundaries;
    let mut sum = 0.0;
    let mut rows = 0;
    for seg in b.chunks().skip(1) {
        for u in seg.clone() {
            sum += seq.attention.matrix().row(u)[..seg.start].iter().sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        sum / rows as f64
    }
}

/// Gaussian queries, keys and values for randomized tests and benches.
pub fn random_token_sequence(len: usize, dim: usize, seed: u64) -> Result<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = || -> Result<Matrix> {
        Matrix::from_vec(len, dim, (0..len * dim).map(|_| rng.sample(StandardNormal)).collect())
    };
    TokenSequence::new(m()?, m()?, m()?)
}

/// Captured share of causal attention mass.
pub fn attention_mass_recall(a: &AttentionMatrix, mask: &SparsityMask) -> Result<f64> {
    if a.len() != mask.len() {
        return Err(Error::Shape(format!("attention L={} vs mask L={}", a.len(), mask.len())));
    }
    let mut kept = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() {
        let row = a.matrix().row(i);
        total += row[..=i].iter().sum::<f64>();
        kept += mask.row(i).iter().map(|&j| row[j]).sum::<f64>();
    }
    Ok(if total == 0.0 { 1.0 } else { (kept / total).clamp(0.0, 1.0) })
}

/// Mean row cosine between two attention outputs, clamped to `[0, 1]`.
pub fn output_fidelity(reference: &Matrix, approx: &Matrix) -> Result<f64> {
    if reference.rows() != approx.rows() || reference.cols() != approx.cols() {
        return Err(Error::Shape("output shapes differ".into()));
    }
    let mut s = 0.0;
    for i in 0..reference.rows() {
        s += cosine_similarity(reference.row(i), approx.row(i))?.clamp(0.0, 1.0);
    }
    Ok(s / reference.rows().max(1) as f64)
}

/// Where a chunked method gets its boundaries.
#[derive(Debug, Clone)]
pub enum BoundarySource {
    /// Fixed-size chunks.
    Static { chunk_size: usize },
    /// The planted segment boundaries.
    Oracle,
    /// NMS over predictor scores averaged across heads.
    Predicted { params: Box<PredictorParams>, nms: NmsConfig },
}

#[derive(Debug, Clone)]
pub enum Method {
    Dense,
    Chunked { name: String, source: BoundarySource },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Dense => "dense",
            Method::Chunked { name, .. } => name,
        }
    }

    pub fn static_chunks(chunk_size: usize) -> Self {
        Method::Chunked { name: "static".into(), source: BoundarySource::Static { chunk_size } }
    }

    pub fn oracle() -> Self {
        Method::Chunked { name: "dhsa_oracle".into(), source: BoundarySource::Oracle }
    }

    pub fn predicted(params: PredictorParams, nms: NmsConfig) -> Self {
        Method::Chunked { name: "dhsa".into(), source: BoundarySource::Predicted { params: Box::new(params), nms } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub head_aggregation: HeadAggregation,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { head_aggregation: HeadAggregation::Max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub method: String,
    pub sequence: usize,
    pub attention_mass_recall: f64,
    pub output_cosine: f64,
    pub num_chunks: usize,
    pub attended_pairs: u64,
    pub score_ops: u64,
    pub wall_time: f64,
}

/// Boundaries a chunked method uses on `seq`, plus predictor positions
/// evaluated to get them.
pub fn method_boundaries(source: &BoundarySource, seq: &PlantedSequence) -> Result<(BoundarySet, usize)> {
    let l = seq.len();
    match source {
        BoundarySource::Static { chunk_size } => Ok((static_boundaries(l, *chunk_size)?, 0)),
        BoundarySource::Oracle => Ok((seq.boundaries.clone(), 0)),
        BoundarySource::Predicted { params, nms } => {
            let scores = predicted_scores(params, seq)?;
            let w = params.config().window;
            let evaluated = (0..l).filter(|&i| is_evaluable(l, i, w)).count() * seq.heads.len();
            Ok((nms_boundaries(&scores, nms)?, evaluated))
        }
    }
}

/// Predictor probabilities averaged over heads.
pub fn predicted_scores(params: &PredictorParams, seq: &PlantedSequence) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; seq.len()];
    for h in &seq.heads {
        for (a, p) in acc.iter_mut().zip(predict_sequence(params, &h.keys, Exec::Sequential)?) {
            *a += p;
        }
    }
    let n = seq.heads.len() as f64;
    Ok(acc.into_iter().map(|x| x / n).collect())
}

/// Mask for a chunked method: per-head chunk similarity merged across heads,
/// then the shared mask-engine selection. Every chunked method goes through
/// here; only the boundaries differ.
pub fn chunked_mask(
    seq: &PlantedSequence,
    bounds: &BoundarySet,
    budget: Budget,
    how: HeadAggregation,
) -> Result<SparsityMask> {
    let per_head: Vec<Matrix> = seq
        .heads
        .iter()
        .map(|h| chunk_similarity(&build_chunk_reps(h, bounds)?))
        .collect::<Result<_>>()?;
    mask_from_chunk_scores(&aggregate_heads(&per_head, how)?, bounds, budget, Exec::Sequential)
}

fn evaluate_method(
    method: &Method,
    index: usize,
    seq: &PlantedSequence,
    dense_out: &[Matrix],
    budget: Budget,
    opts: &CompareOptions,
) -> Result<MaskReport> {
    let start = Instant::now();
    let (recall, cosine, chunks, counters) = match method {
        Method::Dense => (1.0, 1.0, 1, CostCounters::dense(seq.len())),
        Method::Chunked { source, .. } => {
            let (bounds, evaluated) = method_boundaries(source, seq)?;
            let mask = chunked_mask(seq, &bounds, budget, opts.head_aggregation)?;
            let recall = attention_mass_recall(&seq.attention, &mask)?;
            let mut cos = 0.0;
            for (h, reference) in seq.heads.iter().zip(dense_out) {
                cos += output_fidelity(reference, &dense_attention(h, Some(&mask))?)?;
            }
            let counters = CostCounters::chunked(&bounds, budget).with_predictor_positions(evaluated);
            (recall, cos / seq.heads.len() as f64, bounds.num_chunks(), counters)
        }
    };
    Ok(MaskReport {
        method: method.name().to_string(),
        sequence: index,
        attention_mass_recall: recall,
        output_cosine: cosine,
        num_chunks: chunks,
        attended_pairs: counters.attended_pairs,
        score_ops: counters.score_ops,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates every method on every sequence. Reports are ordered by method,
/// then sequence, whatever the execution policy.
pub fn compare(
    corpus: &[PlantedSequence],
    methods: &[Method],
    budget: Budget,
    opts: &CompareOptions,
    exec: Exec,
) -> Result<Vec<MaskReport>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("comparison corpus is empty".into()));
    }
    let per_seq: Vec<Result<Vec<MaskReport>>> = exec.map(corpus.len(), |s| {
        let seq = &corpus[s];
        let dense_out: Vec<Matrix> = seq.heads.iter().map(|h| dense_attention(h, None)).collect::<Result<_>>()?;
        methods.iter().map(|m| evaluate_method(m, s, seq, &dense_out, budget, opts)).collect()
    });
    let per_seq: Vec<Vec<MaskReport>> = per_seq.into_iter().collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(corpus.len() * methods.len());
    for m in 0..methods.len() {
        out.extend(per_seq.iter().map(|r| r[m].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub sequences: usize,
    pub mean_recall: f64,
    pub mean_output_cosine: f64,
    pub mean_chunks: f64,
    pub mean_attended_pairs: f64,
    pub mean_score_ops: f64,
}

/// Per-method means, in first-appearance order.
pub fn summarize(reports: &[MaskReport]) -> Vec<MethodSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.method.as_str()) {
            names.push(&r.method);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&MaskReport> = reports.iter().filter(|r| r.method == name).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&MaskReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            MethodSummary {
                method: name.to_string(),
                sequences: rs.len(),
                mean_recall: mean(&|r| r.attention_mass_recall),
                mean_output_cosine: mean(&|r| r.output_cosine),
                mean_chunks: mean(&|r| r.num_chunks as f64),
                mean_attended_pairs: mean(&|r| r.attended_pairs as f64),
                mean_score_ops: mean(&|r| r.score_ops as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub budget: usize,
    pub mean_recall: f64,
}

/// Mean recall per method at each budget, for recall-vs-budget curves.
pub fn recall_curve(
    corpus: &[PlantedSequence],
    methods: &[Method],
    budgets: &[Budget],
    opts: &CompareOptions,
    exec: Exec,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for &b in budgets {
        for s in summarize(&compare(corpus, methods, b, opts, exec)?) {
            out.push(CurvePoint { method: s.method, budget: b.get(), mean_recall: s.mean_recall });
        }
    }
    Ok(out)
}

/// Labels each sequence's planted attention matrix.
pub fn label_corpus(corpus: &[PlantedSequence], cfg: &LabelConfig, exec: Exec) -> Result<Vec<LabelSet>> {
    exec.map(corpus.len(), |i| label_sequence(&corpus[i].attention, cfg)).into_iter().collect()
}

/// One training example per (sequence, head), all heads sharing the
/// sequence's soft labels.
pub fn training_examples(corpus: &[PlantedSequence], labels: &[LabelSet]) -> Vec<Example> {
    corpus
        .iter()
        .zip(labels)
        .flat_map(|(seq, lab)| {
            seq.heads.iter().map(move |h| Example {
                keys: h.keys.clone(),
                positions: lab.positions.clone(),
                targets: lab.soft.clone(),
            })
        })
        .collect()
}
