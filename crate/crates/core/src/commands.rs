//! The train / translate / evaluate / bench pipeline behind the CLI.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{BenchConfig, Method, RunConfig};
use crate::data::{read_corpus, read_jsonl, write_corpus, write_jsonl, Batch, BatchStream, CorpusEntry};
use crate::decoding::{
    generate_all_domains, generate_baseline, to_records, Baseline, DecodeMode, DecodeOptions, HypothesisRecord,
    HypothesisSet,
};
use crate::error::{Error, Result};
use crate::graph::log_softmax;
use crate::latent::{self, argmax, AnnealSchedule, LatentConfig, LossReport, StepContext};
use crate::metrics::{self, BleuReport, CoverageStats, UsageStats};
use crate::model::{Seq2Seq, TargetEncoderInput};
use crate::moe::{domain_log_likelihoods, moe_train_step};
use crate::optim::{lr_schedule, AdamState};
use crate::rng::{self, Stream};
use crate::synth::generate_corpus;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, RESERVED};

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Train, validation and test corpora of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Vec<CorpusEntry>,
    pub valid: Vec<CorpusEntry>,
    pub test: Vec<CorpusEntry>,
    pub vocab: Vocabulary,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    if let Some(spec) = &cfg.data.synth {
        let c = generate_corpus(spec)?;
        return Ok(RunData {
            train: c.train,
            valid: c.valid,
            test: c.test,
            vocab: spec.vocabulary(),
        });
    }
    let read = |p: &Option<PathBuf>| p.as_deref().map_or(Ok(Vec::new()), read_corpus);
    let data = RunData {
        train: read(&cfg.data.train)?,
        valid: read(&cfg.data.valid)?,
        test: read(&cfg.data.test)?,
        vocab: file_vocabulary(cfg.model.tgt_vocab_size),
    };
    for e in data.train.iter().chain(&data.valid).chain(&data.test) {
        check_entry_vocab(e, cfg.model.src_vocab_size, cfg.model.tgt_vocab_size)?;
    }
    Ok(data)
}

fn file_vocabulary(size: usize) -> Vocabulary {
    Vocabulary::new(size.saturating_sub(RESERVED), 0)
}

fn check_entry_vocab(e: &CorpusEntry, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
    if let Some(&t) = e.source.iter().find(|&&t| t >= src_vocab) {
        return Err(Error::Input(format!(
            "source {} uses token {t}, outside the model's source vocabulary of {src_vocab}",
            e.id
        )));
    }
    if let Some(&t) = e.references.iter().flatten().find(|&&t| t >= tgt_vocab) {
        return Err(Error::Input(format!(
            "entry {} uses token {t}, outside the model's target vocabulary of {tgt_vocab}",
            e.id
        )));
    }
    Ok(())
}

/// Line-delimited run log.
struct RunLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl RunLog {
    fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, record: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::Input(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Domain picked by the target encoder for each `(source, target)` pair.
pub fn target_assignments(model: &Seq2Seq, pairs: &[(&[usize], &[usize])]) -> Result<Vec<usize>> {
    let te = model
        .target_encoder
        .as_ref()
        .ok_or_else(|| Error::contract("model has no target encoder"))?;
    let head = model.params.get(te.head);
    let (n, d) = (head.shape()[0], head.shape()[1]);
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let items: Vec<(u64, &[usize], &[usize])> = chunk.iter().map(|&(s, t)| (0, s, t)).collect();
        let batch = Batch::new(&items);
        let ids = latent::target_encoder_ids(&batch, te.input);
        let h = model.encode_target_latent(&ids)?;
        for row in h.data().chunks(d) {
            let scores: Vec<f64> = (0..n)
                .map(|k| row.iter().zip(&head.data()[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum())
                .collect();
            out.push(argmax(&scores));
        }
    }
    Ok(out)
}

/// Domain usage of the target encoder over every reference of a corpus.
pub fn reference_usage(model: &Seq2Seq, corpus: &[CorpusEntry]) -> Result<UsageStats> {
    let pairs: Vec<(&[usize], &[usize])> = corpus
        .iter()
        .flat_map(|e| e.references.iter().map(move |r| (e.source.as_slice(), r.as_slice())))
        .collect();
    let a = target_assignments(model, &pairs)?;
    metrics::domain_usage_stats(&a, model.n_domains())
}

/// Token-averaged validation NLL: target-encoder argmax domain, best domain
/// (mixture of experts) or the single domain (vanilla).
pub fn validation_nll(model: &Seq2Seq, corpus: &[CorpusEntry], batch_size: usize) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in corpus.chunks(batch_size.max(1)) {
        let items: Vec<(u64, &[usize], &[usize])> = chunk
            .iter()
            .map(|e| (e.id, e.source.as_slice(), e.references[0].as_slice()))
            .collect();
        let batch = Batch::new(&items);
        tokens += batch.tgt_out.tokens();
        if model.target_encoder.is_some() {
            let pairs: Vec<(&[usize], &[usize])> = items.iter().map(|&(_, s, t)| (s, t)).collect();
            let a = target_assignments(model, &pairs)?;
            let rows: Vec<Vec<f64>> = a.iter().map(|&k| model.domain_embedding(k)).collect();
            total -= sequence_log_likelihoods(model, &batch, &Tensor::from_rows(&rows)?)?.iter().sum::<f64>();
        } else {
            let ll = domain_log_likelihoods(model, &batch)?;
            total -= ll.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>();
        }
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

fn sequence_log_likelihoods(model: &Seq2Seq, batch: &Batch, e: &Tensor) -> Result<Vec<f64>> {
    let zx = model.encode_source(&batch.src)?;
    let logits = model.decode_teacher_forced(&zx, e, &batch.tgt_in)?;
    let (len, v) = (batch.tgt_out.cols, model.tgt_vocab());
    Ok((0..batch.len())
        .map(|r| {
            (0..len)
                .filter(|&t| batch.tgt_out.mask[r * len + t])
                .map(|t| log_softmax(&logits.data()[(r * len + t) * v..][..v])[batch.tgt_out.ids[r * len + t]])
                .sum()
        })
        .collect())
}

/// State shared by the training loops of every method.
pub struct Trainer {
    pub method: Method,
    pub model: Seq2Seq,
    pub adam: AdamState,
    pub schedule: AnnealSchedule,
    pub latent: LatentConfig,
    pub seed: u64,
    pub lr_peak: f64,
    pub warmup: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.build_model()?;
        let adam = AdamState::new(&model.params, cfg.optimizer.adam);
        Ok(Self {
            method: cfg.method,
            adam,
            schedule: cfg.schedule.clone().unwrap_or_else(|| AnnealSchedule::new(cfg.steps.max(1))),
            latent: cfg.regularizer.unwrap_or(LatentConfig {
                lambda: 0.0,
                ..LatentConfig::default()
            }),
            model,
            seed: cfg.seed,
            lr_peak: cfg.optimizer.lr_peak,
            warmup: cfg.optimizer.warmup,
        })
    }

    pub fn step(&mut self, step: u64, batch: &Batch) -> Result<LossReport> {
        let ctx = StepContext {
            step,
            lr: lr_schedule(step + 1, self.warmup, self.lr_peak),
            seed: self.seed,
        };
        match self.method {
            Method::Moe => moe_train_step(&mut self.model, &mut self.adam, batch, ctx),
            Method::TargetEncoder | Method::Vanilla => latent::train_step(
                &mut self.model,
                &mut self.adam,
                &mut self.schedule,
                &self.latent,
                batch,
                ctx,
            ),
        }
    }
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub data: RunData,
    pub reports: Vec<LossReport>,
}

/// Runs the configured method, logging to `run_log.jsonl` and saving
/// `checkpoint.bin`; generated corpora are written next to them.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = cfg.resolved_out_dir();
    let _lock = DirLock::acquire(&out_dir)?;
    let data = load_data(cfg)?;
    if data.train.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if cfg.data.synth.is_some() {
        write_corpus(&out_dir.join("train.jsonl"), &data.train)?;
        write_corpus(&out_dir.join("valid.jsonl"), &data.valid)?;
        write_corpus(&out_dir.join("test.jsonl"), &data.test)?;
    }
    let log_path = out_dir.join("run_log.jsonl");
    let mut log = RunLog::create(&log_path)?;
    log.write(&json!({"kind": "config", "config": cfg}))?;

    let mut trainer = Trainer::new(cfg)?;
    let mut stream = BatchStream::new(&data.train, cfg.batch_size, cfg.seed)?;
    let mut reports = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = stream.next().expect("endless stream");
        let r = trainer.step(step, &batch)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.write(&json!({"kind": "step", "epoch": stream.epoch(), "report": &r}))?;
        }
        reports.push(r);
        if cfg.valid_every > 0 && (step + 1) % cfg.valid_every == 0 && !data.valid.is_empty() {
            let nll = validation_nll(&trainer.model, &data.valid, cfg.batch_size)?;
            log.write(&json!({"kind": "valid", "step": step + 1, "nll": nll}))?;
        }
    }
    if trainer.model.target_encoder.is_some() && !data.test.is_empty() {
        let usage = reference_usage(&trainer.model, &data.test)?;
        log.write(&json!({"kind": "usage", "split": "test", "usage": usage}))?;
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        step: cfg.steps,
        schedule: (cfg.method == Method::TargetEncoder).then(|| trainer.schedule.clone()),
        model: trainer.model,
        optimizer: Some(trainer.adam),
    };
    let checkpoint_path = out_dir.join("checkpoint.bin");
    checkpoint.save(&checkpoint_path)?;
    log.write(&json!({"kind": "done", "steps": cfg.steps, "checkpoint": "checkpoint.bin"}))?;
    log.finish()?;
    Ok(TrainOutcome {
        out_dir,
        checkpoint_path,
        log_path,
        checkpoint,
        data,
        reports,
    })
}

/// Hypothesis sets for a corpus: one per domain for domain models; for the
/// vanilla model the whole beam (beam mode) or the single greedy output.
pub fn translate(checkpoint: &Checkpoint, corpus: &[CorpusEntry], opts: DecodeOptions) -> Result<Vec<HypothesisSet>> {
    let model = &checkpoint.model;
    for e in corpus {
        check_entry_vocab(e, model.config.src_vocab_size, usize::MAX)?;
    }
    let sources: Vec<Vec<usize>> = corpus.iter().map(|e| e.source.clone()).collect();
    match (checkpoint.config.method, opts.mode) {
        (Method::Vanilla, DecodeMode::Beam) => generate_baseline(
            model,
            &sources,
            Baseline::Beam(opts.beam_size),
            opts.max_len,
            checkpoint.config.seed,
        ),
        _ => generate_all_domains(model, &sources, opts),
    }
}

fn vocabulary_of(cfg: &RunConfig) -> Vocabulary {
    cfg.data
        .synth
        .as_ref()
        .map_or_else(|| file_vocabulary(cfg.model.tgt_vocab_size), |s| s.vocabulary())
}

/// Decodes `corpus` with the checkpoint and writes the hypothesis records.
pub fn cmd_translate(checkpoint: &Path, corpus: &Path, opts: DecodeOptions, out: &Path) -> Result<Vec<HypothesisRecord>> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let entries = read_corpus(corpus)?;
    let sets = translate(&ckpt, &entries, opts)?;
    let ids: Vec<u64> = entries.iter().map(|e| e.id).collect();
    let records = to_records(&ids, &sets, &vocabulary_of(&ckpt.config))?;
    write_jsonl(out, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sources: usize,
    pub hypotheses_per_source: usize,
    pub mbleu: BleuReport,
    /// Absent with a single hypothesis per source.
    pub pairwise_bleu: Option<BleuReport>,
    pub per_domain_bleu: Vec<f64>,
    pub coverage: CoverageStats,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "sources,hypotheses_per_source,mbleu,pairwise_bleu,reference_coverage,mean_distinct,all_exact";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sources,
            self.hypotheses_per_source,
            self.mbleu.score,
            self.pairwise_bleu.as_ref().map_or(String::new(), |p| p.score.to_string()),
            self.coverage.reference_coverage,
            self.coverage.mean_distinct,
            self.coverage.all_exact
        )
    }
}

/// Groups records by source, keeping slot order and first-appearance order.
pub fn group_records(records: &[HypothesisRecord]) -> (Vec<u64>, Vec<Vec<Vec<usize>>>) {
    let mut order = Vec::new();
    let mut sets: HashMap<u64, Vec<Vec<usize>>> = HashMap::new();
    for r in records {
        sets.entry(r.source_id)
            .or_insert_with(|| {
                order.push(r.source_id);
                Vec::new()
            })
            .push(r.tokens.clone());
    }
    let grouped = order.iter().map(|id| sets.remove(id).expect("grouped")).collect();
    (order, grouped)
}

/// Scores hypothesis sets against the multi-reference corpus.
pub fn evaluate(hyp_sets: &[Vec<Vec<usize>>], refs: &[Vec<Vec<usize>>]) -> Result<EvalReport> {
    let n = hyp_sets.first().map_or(0, Vec::len);
    let mbleu = metrics::mbleu(hyp_sets, refs)?;
    let pairwise_bleu = if n >= 2 { Some(metrics::pairwise_bleu(hyp_sets)?) } else { None };
    let per_domain_bleu = (0..n)
        .map(|k| {
            let hyps: Vec<Vec<usize>> = hyp_sets.iter().map(|s| s[k].clone()).collect();
            Ok(metrics::corpus_bleu(&hyps, refs)?.score)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        sources: hyp_sets.len(),
        hypotheses_per_source: n,
        mbleu,
        pairwise_bleu,
        per_domain_bleu,
        coverage: metrics::coverage_stats(hyp_sets, refs)?,
    })
}

/// Aligns a hypothesis file with a reference corpus, scores it and writes a
/// JSON report to `out` and a CSV row next to it.
pub fn cmd_evaluate(hyp: &Path, refs: &Path, out: &Path) -> Result<EvalReport> {
    let records: Vec<HypothesisRecord> = read_jsonl(hyp)?;
    let corpus = read_corpus(refs)?;
    let (ids, sets) = group_records(&records);
    let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let missing: Vec<u64> = corpus.iter().map(|e| e.id).filter(|id| !index.contains_key(id)).collect();
    let ref_ids: std::collections::HashSet<u64> = corpus.iter().map(|e| e.id).collect();
    let extra: Vec<u64> = ids.iter().copied().filter(|id| !ref_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Alignment(format!(
            "sources without hypotheses: {missing:?}; hypotheses without references: {extra:?}"
        )));
    }
    let hyp_sets: Vec<Vec<Vec<usize>>> = corpus.iter().map(|e| sets[index[&e.id]].clone()).collect();
    let references: Vec<Vec<Vec<usize>>> = corpus.iter().map(|e| e.references.clone()).collect();
    let report = evaluate(&hyp_sets, &references)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(out, text + "\n").map_err(|e| Error::io(out, e))?;
    let csv = out.with_extension("csv");
    fs::write(&csv, format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row())).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub n_domains: usize,
    pub words_per_sec: f64,
    pub decoder_forwards_per_step: u64,
    pub median_step_ms: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "method,n_domains,words_per_sec,decoder_forwards_per_step,median_step_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.1},{},{:.3}",
            self.method, self.n_domains, self.words_per_sec, self.decoder_forwards_per_step, self.median_step_ms
        )
    }
}

/// A fixed-shape batch of random content tokens, identical for every N.
pub fn bench_batch(bench: &BenchConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Batch> {
    if src_vocab <= RESERVED || tgt_vocab <= RESERVED || bench.batch_size == 0 || bench.src_len == 0 || bench.tgt_len == 0 {
        return Err(Error::Config("benchmark batch needs content tokens and positive sizes".into()));
    }
    let mut r = rng::stream(seed, Stream::Data, u64::MAX);
    let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..bench.batch_size)
        .map(|_| {
            let s = (0..bench.src_len).map(|_| r.gen_range(RESERVED..src_vocab)).collect();
            let t = (0..bench.tgt_len).map(|_| r.gen_range(RESERVED..tgt_vocab)).collect();
            (s, t)
        })
        .collect();
    let items: Vec<(u64, &[usize], &[usize])> = rows
        .iter()
        .enumerate()
        .map(|(i, (s, t))| (i as u64, s.as_slice(), t.as_slice()))
        .collect();
    Ok(Batch::new(&items))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times training steps of one method at one domain count.
pub fn bench_one(template: &RunConfig, method: Method, n_domains: usize) -> Result<BenchRow> {
    let bench = template.bench.unwrap_or_default();
    if bench.timed_steps == 0 {
        return Err(Error::Config("bench.timed_steps must be at least 1".into()));
    }
    let mut cfg = template.clone();
    cfg.method = method;
    cfg.model.n_domains = if method == Method::Vanilla { 1 } else { n_domains };
    let te = method == Method::TargetEncoder;
    cfg.target_encoder_input = te.then(|| template.target_encoder_input.unwrap_or(TargetEncoderInput::Target));
    cfg.schedule = te.then(|| template.schedule.clone().unwrap_or_else(|| AnnealSchedule::new(1_000_000)));
    cfg.regularizer = te.then(|| template.regularizer.unwrap_or_default());
    let batch = bench_batch(&bench, cfg.model.src_vocab_size, cfg.model.tgt_vocab_size, cfg.seed)?;
    let mut trainer = Trainer::new(&cfg)?;
    let mut times = Vec::with_capacity(bench.timed_steps as usize);
    let mut forwards = None;
    for step in 0..bench.warmup_steps + bench.timed_steps {
        let t0 = Instant::now();
        let r = trainer.step(step, &batch)?;
        let dt = t0.elapsed().as_secs_f64();
        match forwards {
            None => forwards = Some(r.decoder_forwards),
            Some(f) if f != r.decoder_forwards => {
                return Err(Error::contract(format!(
                    "decoder forwards changed from {f} to {} between steps",
                    r.decoder_forwards
                )))
            }
            _ => {}
        }
        if step >= bench.warmup_steps {
            times.push(dt);
        }
    }
    let med = median(&mut times);
    Ok(BenchRow {
        method: method.name().to_string(),
        n_domains,
        words_per_sec: batch.tgt_out.tokens() as f64 / med,
        decoder_forwards_per_step: forwards.unwrap_or(0),
        median_step_ms: med * 1000.0,
    })
}

/// Throughput of the target-encoder and mixture-of-experts methods for each
/// domain count; writes a CSV to `out` when given.
pub fn cmd_bench_speed(template: &RunConfig, domains: &[usize], out: Option<&Path>) -> Result<Vec<BenchRow>> {
    if domains.is_empty() || domains.contains(&0) {
        return Err(Error::Config("domain counts must be a non-empty list of positive integers".into()));
    }
    let mut rows = Vec::new();
    for method in [Method::TargetEncoder, Method::Moe] {
        for &n in domains {
            rows.push(bench_one(template, method, n)?);
        }
    }
    if let Some(path) = out {
        let mut text = String::from(BenchRow::CSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(rows)
}
