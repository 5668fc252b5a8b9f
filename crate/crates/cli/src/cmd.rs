use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dhsa::chunk_repr::HeadAggregation;
use dhsa::chunking::NmsConfig;
use dhsa::harness::{
    attention_mass_recall, chunked_mask, compare, gen_planted, label_corpus, method_boundaries, output_fidelity,
    random_token_sequence, recall_curve, summarize, BoundarySource, CompareOptions, MaskReport, Method,
    PlantedCorpusSpec, PlantedSequence,
};
use dhsa::labeling::{read_label_file, write_label_file, LabelConfig, LabelRecord, SoftLabelParams, DEFAULT_EPSILON};
use dhsa::mask::CostCounters;
use dhsa::predictor::{
    grad_check, is_evaluable, train, AdamConfig, Example, FocalParams, GradCheckConfig, PredictorConfig,
    PredictorParams, TrainConfig,
};
use dhsa::tensor::dense_attention;
use dhsa::{BoundarySet, Budget, Exec, SparsityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{manifest_path, read_corpus, write_corpus, Corpus};
use crate::opts::*;

const EXEC: Exec = Exec::Parallel;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    require_file(&manifest_path(dir), "corpus manifest")?;
    read_corpus(dir)
}

fn load_predictor(path: &Path) -> Result<PredictorParams> {
    require_file(path, "predictor checkpoint")?;
    let r = BufReader::new(File::open(path)?);
    PredictorParams::read_checkpoint(r).with_context(|| format!("reading {}", path.display()))
}

fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    require_file(path, "label file")?;
    let r = BufReader::new(File::open(path)?);
    read_label_file(r).with_context(|| format!("reading {}", path.display()))
}

fn create_out(out: Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let out = out.unwrap_or_else(|| default.into());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn budget_or_default(b: Option<usize>, spec: &PlantedCorpusSpec) -> Result<Budget> {
    Budget::new(b.unwrap_or((spec.len / 8).max(1))).map_err(|e| usage(e.to_string()))
}

fn default_chunk_size(spec: &PlantedCorpusSpec) -> usize {
    (spec.len / spec.num_segments.max(1)).max(1)
}

fn nms_config(min_conf: Option<f64>, window: Option<usize>, max_chunks: Option<usize>, spec: &PlantedCorpusSpec) -> NmsConfig {
    NmsConfig {
        min_conf: min_conf.unwrap_or(NmsConfig::DEFAULT_MIN_CONF),
        window: window.unwrap_or(NmsConfig::DEFAULT_WINDOW),
        max_chunks: max_chunks.unwrap_or(spec.num_segments),
    }
}

pub fn gen(o: GenOpts) -> Result<()> {
    let o = o.resolve()?;
    let spec = PlantedCorpusSpec {
        num_sequences: o.num_sequences.unwrap_or(100),
        len: o.len.unwrap_or(512),
        dim: o.dim.unwrap_or(32),
        heads: o.heads.unwrap_or(4),
        num_segments: o.num_segments.unwrap_or(8),
        leakage: o.leakage.unwrap_or(0.05),
        seed: o.seed.unwrap_or(0),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = gen_planted(&spec, EXEC)?;
    let out = create_out(o.out, "corpus")?;
    write_corpus(&out, &spec, &corpus)?;
    eprintln!("wrote {} sequences to {}", corpus.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LabelSummary {
    config: LabelConfig,
    sequences: usize,
    planted_boundaries: usize,
    recovered: usize,
}

pub fn label(o: LabelOpts) -> Result<()> {
    let o = o.resolve()?;
    let corpus = load_corpus(&o.corpus.unwrap_or_else(|| "corpus".into()))?;
    let cfg = LabelConfig {
        window: o.window.unwrap_or(4),
        epsilon: o.epsilon.unwrap_or(DEFAULT_EPSILON),
        theta: o.theta.unwrap_or(1.1),
        max_chunks: o.max_chunks.unwrap_or(corpus.spec.num_segments),
        soft: SoftLabelParams {
            alpha: o.alpha.unwrap_or(2.0),
            zeta: o.zeta.unwrap_or(1e-6),
            base: o.log_base.unwrap_or(LogBaseArg::E).into(),
        },
    };
    let labels = label_corpus(&corpus.sequences, &cfg, EXEC)?;
    let records: Vec<LabelRecord> = labels.iter().enumerate().map(|(i, l)| LabelRecord::new(i, 0, l)).collect();
    let (mut planted, mut recovered) = (0, 0);
    for (s, l) in corpus.sequences.iter().zip(&labels) {
        let ends = s.boundaries.end_positions();
        planted += ends.len();
        recovered += ends.iter().filter(|e| l.hard.contains(e)).count();
    }
    let out = create_out(o.out, "labels")?;
    let mut w = BufWriter::new(File::create(out.join("labels.jsonl"))?);
    write_label_file(&records, &mut w)?;
    w.flush()?;
    write_json(
        &out.join("summary.json"),
        &LabelSummary { config: cfg, sequences: records.len(), planted_boundaries: planted, recovered },
    )?;
    eprintln!("labeled {} sequences; {recovered}/{planted} planted boundaries recovered", records.len());
    Ok(())
}

/// One example per (sequence, head); every head shares the sequence labels.
fn examples(corpus: &Corpus, records: &[LabelRecord]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for r in records {
        let Some(seq) = corpus.sequences.get(r.sequence_id) else {
            bail!("label record for sequence {} but the corpus has {}", r.sequence_id, corpus.sequences.len());
        };
        if r.len != seq.len() {
            bail!("label record {} has L={}, sequence has L={}", r.sequence_id, r.len, seq.len());
        }
        for h in &seq.heads {
            out.push(Example { keys: h.keys.clone(), positions: r.positions.clone(), targets: r.soft.clone() });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    predictor: PredictorConfig,
    train: TrainConfig,
    final_epoch: Option<&'a dhsa::predictor::EpochMetrics>,
}

pub fn train_cmd(o: TrainOpts) -> Result<()> {
    let o = o.resolve()?;
    let corpus = load_corpus(&o.corpus.unwrap_or_else(|| "corpus".into()))?;
    let records = load_labels(&o.labels.unwrap_or_else(|| PathBuf::from("labels").join("labels.jsonl")))?;
    let train_set = examples(&corpus, &records)?;
    let eval_set = match (&o.eval_corpus, &o.eval_labels) {
        (Some(c), Some(l)) => Some(examples(&load_corpus(c)?, &load_labels(l)?)?),
        (None, None) => None,
        _ => return Err(usage("--eval-corpus and --eval-labels must be given together")),
    };
    let pcfg = PredictorConfig {
        dim: corpus.spec.dim,
        heads: o.heads.unwrap_or(PredictorConfig::DEFAULT_HEADS),
        window: o.window.unwrap_or(PredictorConfig::DEFAULT_WINDOW),
        hidden: o.hidden.unwrap_or(PredictorConfig::DEFAULT_HIDDEN),
        positional: o.positional.unwrap_or(false),
    };
    pcfg.validate().map_err(|e| usage(e.to_string()))?;
    let seed = o.seed.unwrap_or(0);
    let init = PredictorParams::init(pcfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let defaults = FocalParams::default();
    let tcfg = TrainConfig {
        epochs: o.epochs.unwrap_or(50),
        batch_size: o.batch_size.unwrap_or(1),
        adam: AdamConfig { lr: o.lr.unwrap_or(1e-3), ..AdamConfig::default() },
        focal: FocalParams {
            w_pos: o.w_pos.unwrap_or(defaults.w_pos),
            gamma: o.gamma.unwrap_or(defaults.gamma),
            form: o.focal_form.map_or(defaults.form, Into::into),
        },
        seed,
        top_k: o.top_k.unwrap_or(500),
    };
    let report = train(&init, &train_set, eval_set.as_deref(), &tcfg, EXEC)?;
    let out = create_out(o.out, "predictor")?;
    let mut w = BufWriter::new(File::create(out.join("predictor.bin"))?);
    report.params.write_checkpoint(&mut w)?;
    w.flush()?;
    let mut csv = csv::Writer::from_path(out.join("history.csv"))?;
    for h in &report.history {
        csv.serialize(h)?;
    }
    csv.flush()?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary { predictor: pcfg, train: tcfg, final_epoch: report.history.last() },
    )?;
    if let Some(h) = report.history.last() {
        eprintln!("epoch {}: loss {:.4} f1 {:.3} top-k {:.3}", h.epoch, h.loss, h.f1, h.topk_overlap);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskIndex {
    method: String,
    budget: usize,
    head_aggregation: HeadAggregation,
    sequences: Vec<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    id: usize,
    file: String,
    boundaries: BoundarySet,
    attended_pairs: u64,
    score_ops: u64,
}

const MASK_INDEX: &str = "masks.json";

pub fn mask(o: MaskOpts) -> Result<()> {
    let o = o.resolve()?;
    let corpus = load_corpus(&o.corpus.unwrap_or_else(|| "corpus".into()))?;
    let spec = corpus.spec;
    let budget = budget_or_default(o.budget, &spec)?;
    let how: HeadAggregation = o.head_agg.unwrap_or(HeadAggArg::Max).into();
    let method = o.method.unwrap_or(MaskMethodArg::Dhsa);
    let (name, source) = match method {
        MaskMethodArg::Static => {
            ("static", BoundarySource::Static { chunk_size: o.chunk_size.unwrap_or(default_chunk_size(&spec)) })
        }
        MaskMethodArg::Oracle => ("dhsa_oracle", BoundarySource::Oracle),
        MaskMethodArg::Dhsa => {
            let path = o.predictor.as_deref().ok_or_else(|| usage("the dhsa method needs --predictor"))?;
            let params = Box::new(load_predictor(path)?);
            ("dhsa", BoundarySource::Predicted { params, nms: nms_config(o.min_conf, o.nms_window, o.max_chunks, &spec) })
        }
    };
    let json = o.format == Some(MaskFormatArg::Json);
    let built: Vec<Result<(BoundarySet, usize, SparsityMask)>> = EXEC.map(corpus.sequences.len(), |i| {
        let seq = &corpus.sequences[i];
        let (bounds, evaluated) = method_boundaries(&source, seq)?;
        let m = chunked_mask(seq, &bounds, budget, how)?;
        Ok((bounds, evaluated, m))
    });
    let out = create_out(o.out, "masks")?;
    let mut entries = Vec::with_capacity(built.len());
    for (i, b) in built.into_iter().enumerate() {
        let (bounds, evaluated, m) = b?;
        let file = format!("seq_{i:04}.{}", if json { "json" } else { "msk" });
        if json {
            fs::write(out.join(&file), m.to_json() + "\n")?;
        } else {
            fs::write(out.join(&file), m.to_binary())?;
        }
        let counters = CostCounters::chunked(&bounds, budget).with_predictor_positions(evaluated);
        entries.push(MaskEntry {
            id: i,
            file,
            boundaries: bounds,
            attended_pairs: counters.attended_pairs,
            score_ops: counters.score_ops,
        });
    }
    let index = MaskIndex { method: name.into(), budget: budget.get(), head_aggregation: how, sequences: entries };
    write_json(&out.join(MASK_INDEX), &index)?;
    eprintln!("wrote {} masks to {}", index.sequences.len(), out.display());
    Ok(())
}

fn read_mask(path: &Path) -> Result<SparsityMask> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let m = if path.extension().is_some_and(|e| e == "json") {
        SparsityMask::from_json(std::str::from_utf8(&bytes)?)?
    } else {
        SparsityMask::read_binary(bytes.as_slice())?
    };
    Ok(m)
}

/// Scores the masks written by `mask` like any other method.
fn file_mask_reports(dir: &Path, corpus: &[PlantedSequence]) -> Result<Vec<MaskReport>> {
    let index_path = dir.join(MASK_INDEX);
    require_file(&index_path, "mask index")?;
    let index: MaskIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)
        .with_context(|| format!("parsing {}", index_path.display()))?;
    if index.sequences.len() != corpus.len() {
        bail!("{} masks for {} sequences", index.sequences.len(), corpus.len());
    }
    let name = format!("file:{}", index.method);
    let reports: Vec<Result<MaskReport>> = EXEC.map(corpus.len(), |i| {
        let e = &index.sequences[i];
        let seq = &corpus[e.id];
        let m = read_mask(&dir.join(&e.file))?;
        let mut cos = 0.0;
        for h in &seq.heads {
            cos += output_fidelity(&dense_attention(h, None)?, &dense_attention(h, Some(&m))?)?;
        }
        Ok(MaskReport {
            method: name.clone(),
            sequence: e.id,
            attention_mass_recall: attention_mass_recall(&seq.attention, &m)?,
            output_cosine: cos / seq.heads.len() as f64,
            num_chunks: e.boundaries.num_chunks(),
            attended_pairs: e.attended_pairs,
            score_ops: e.score_ops,
            wall_time: 0.0,
        })
    });
    reports.into_iter().collect()
}

#[derive(Serialize)]
struct CompareSummary {
    spec: PlantedCorpusSpec,
    budget: usize,
    static_chunk_size: usize,
    nms: Option<NmsConfig>,
    head_aggregation: HeadAggregation,
    methods: Vec<dhsa::harness::MethodSummary>,
}

pub fn compare_cmd(o: CompareOpts) -> Result<()> {
    let o = o.resolve()?;
    let corpus = load_corpus(&o.corpus.unwrap_or_else(|| "corpus".into()))?;
    let spec = corpus.spec;
    let budget = budget_or_default(o.budget, &spec)?;
    let chunk_size = o.chunk_size.unwrap_or(default_chunk_size(&spec));
    let opts = CompareOptions { head_aggregation: o.head_agg.unwrap_or(HeadAggArg::Max).into() };
    let mut methods = vec![Method::Dense, Method::static_chunks(chunk_size), Method::oracle()];
    let mut nms = None;
    if let Some(path) = &o.predictor {
        let cfg = nms_config(o.min_conf, o.nms_window, o.max_chunks, &spec);
        methods.push(Method::predicted(load_predictor(path)?, cfg));
        nms = Some(cfg);
    }
    let mut reports = compare(&corpus.sequences, &methods, budget, &opts, EXEC)?;
    if let Some(dir) = &o.masks {
        reports.extend(file_mask_reports(dir, &corpus.sequences)?);
    }
    let curve_budgets = o.curve_budgets.clone().unwrap_or_else(|| vec![(spec.len / 8).max(1), (spec.len / 4).max(1)]);
    let curve_budgets: Vec<Budget> =
        curve_budgets.into_iter().map(|b| Budget::new(b).map_err(|e| usage(e.to_string()))).collect::<Result<_>>()?;
    let curve = recall_curve(&corpus.sequences, &methods, &curve_budgets, &opts, EXEC)?;

    let out = create_out(o.out, "report")?;
    let timing = o.timing.unwrap_or(false);
    let mut w = csv::Writer::from_path(out.join("reports.csv"))?;
    let mut header =
        vec!["method", "sequence", "attention_mass_recall", "output_cosine", "num_chunks", "attended_pairs", "score_ops"];
    if timing {
        header.push("wall_time");
    }
    w.write_record(&header)?;
    for r in &reports {
        let mut row = vec![
            r.method.clone(),
            r.sequence.to_string(),
            r.attention_mass_recall.to_string(),
            r.output_cosine.to_string(),
            r.num_chunks.to_string(),
            r.attended_pairs.to_string(),
            r.score_ops.to_string(),
        ];
        if timing {
            row.push(r.wall_time.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let summary = summarize(&reports);
    for s in &summary {
        eprintln!("{:<16} recall {:.4}  cosine {:.4}  chunks {:.1}", s.method, s.mean_recall, s.mean_output_cosine, s.mean_chunks);
    }
    write_json(
        &out.join("summary.json"),
        &CompareSummary {
            spec,
            budget: budget.get(),
            static_chunk_size: chunk_size,
            nms,
            head_aggregation: opts.head_aggregation,
            methods: summary,
        },
    )?;
    let mut w = csv::Writer::from_path(out.join("recall_curve.csv"))?;
    for p in &curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    predictor: PredictorConfig,
    check: GradCheckConfig,
    focal: FocalParams,
    tolerance: f64,
    passed: bool,
    report: dhsa::predictor::GradCheckReport,
}

pub fn gradcheck(o: GradcheckOpts) -> Result<()> {
    let o = o.resolve()?;
    let seed = o.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match &o.predictor {
        Some(p) => load_predictor(p)?,
        None => {
            let cfg = PredictorConfig {
                dim: o.dim.unwrap_or(16),
                heads: o.heads.unwrap_or(PredictorConfig::DEFAULT_HEADS),
                window: o.window.unwrap_or(PredictorConfig::DEFAULT_WINDOW),
                hidden: o.hidden.unwrap_or(PredictorConfig::DEFAULT_HIDDEN),
                positional: o.positional.unwrap_or(false),
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            PredictorParams::init(cfg, &mut rng)?
        }
    };
    let pcfg = *params.config();
    let len = o.len.unwrap_or(24);
    let mut batch = Vec::new();
    for b in 0..o.batch.unwrap_or(2) {
        let keys = random_token_sequence(len, pcfg.dim, seed.wrapping_add(1 + b as u64))?.keys;
        let positions: Vec<usize> = (0..len).filter(|&i| is_evaluable(len, i, pcfg.window)).collect();
        if positions.is_empty() {
            return Err(usage(format!("L={len} leaves no position with full windows")));
        }
        let targets = positions.iter().map(|_| rng.random::<f64>()).collect();
        batch.push(Example { keys, positions, targets });
    }
    let defaults = FocalParams::default();
    let focal = FocalParams {
        w_pos: o.w_pos.unwrap_or(defaults.w_pos),
        gamma: o.gamma.unwrap_or(defaults.gamma),
        form: o.focal_form.map_or(defaults.form, Into::into),
    };
    let check = GradCheckConfig {
        step: o.step.unwrap_or(1e-4),
        samples_per_block: o.samples.unwrap_or(24),
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&params, &batch, &focal, &check)?;
    let tolerance = o.tolerance.unwrap_or(1e-4);
    let passed = report.max_rel_error < tolerance;
    let out = create_out(o.out, "gradcheck")?;
    eprintln!(
        "max relative error {:.3e} in {}[{}] over {} weights ({} kinks skipped)",
        report.max_rel_error, report.worst_block, report.worst_index, report.checked, report.skipped_kinks
    );
    let max = report.max_rel_error;
    write_json(&out.join("gradcheck.json"), &GradcheckSummary { predictor: pcfg, check, focal, tolerance, passed, report })?;
    if !passed {
        bail!("max relative error {max:.3e} exceeds {tolerance:.1e}");
    }
    Ok(())
}
