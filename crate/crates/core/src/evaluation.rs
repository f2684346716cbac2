//! ROUGE scoring, throughput measurement and evaluation reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_reference, sparse_attention_forward, AttentionPattern};
use crate::decoding::{summarize_ids, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::{count_params, Model};
use crate::tensor::Tensor;
use crate::text::{Corpus, TokenId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(matched: usize, candidate_total: usize, reference_total: usize) -> Self {
        if matched == 0 || candidate_total == 0 || reference_total == 0 {
            return Self::default();
        }
        let precision = matched as f64 / candidate_total as f64;
        let recall = matched as f64 / reference_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }

    /// Component-wise mean.
    pub fn mean(scores: &[RougeScore]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        let k = scores.len() as f64;
        let sum = |f: fn(&RougeScore) -> f64| scores.iter().map(f).sum::<f64>() / k;
        Self {
            precision: sum(|s| s.precision),
            recall: sum(|s| s.recall),
            f1: sum(|s| s.f1),
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
///
/// # Panics
/// If `n == 0`.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n needs n >= 1");
    if candidate.len() < n || reference.len() < n {
        return RougeScore::default();
    }
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let matched: usize = cand.iter().map(|(g, &c)| c.min(refr.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_counts(matched, candidate.len() + 1 - n, reference.len() + 1 - n)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSet {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn rouge_all<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeSet {
    RougeSet {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Macro average over pairs.
pub fn macro_average(sets: &[RougeSet]) -> RougeSet {
    let pick = |f: fn(&RougeSet) -> RougeScore| RougeScore::mean(&sets.iter().map(f).collect::<Vec<_>>());
    RougeSet {
        rouge1: pick(|s| s.rouge1),
        rouge2: pick(|s| s.rouge2),
        rouge_l: pick(|s| s.rouge_l),
    }
}

pub fn fps(documents: usize, elapsed: Duration) -> f64 {
    documents as f64 / elapsed.as_secs_f64()
}

pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}, {cpus} logical cpus, single-threaded timing", std::env::consts::OS, std::env::consts::ARCH)
}

/// Documents excluded from timing at the start of a measurement.
pub const WARMUP_DOCS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsMeasurement {
    pub fps: f64,
    pub timed_documents: usize,
    pub elapsed_secs: f64,
    pub hardware: String,
}

/// Decodes `documents` one after another. The first [`WARMUP_DOCS`] are
/// untimed; with no more than that, every document is decoded again timed.
pub fn measure_fps(model: &Model, documents: &[Vec<TokenId>], opts: &DecodeOptions) -> Result<FpsMeasurement> {
    if documents.is_empty() {
        return Err(Error::invalid("measure_fps needs at least one document"));
    }
    let warm = WARMUP_DOCS.min(documents.len());
    for doc in &documents[..warm] {
        summarize_ids(model, doc, opts)?;
    }
    let timed = if documents.len() > warm { &documents[warm..] } else { documents };
    let start = Instant::now();
    for doc in timed {
        summarize_ids(model, doc, opts)?;
    }
    let elapsed = start.elapsed().max(Duration::from_nanos(1));
    Ok(FpsMeasurement {
        fps: fps(timed.len(), elapsed),
        timed_documents: timed.len(),
        elapsed_secs: elapsed.as_secs_f64(),
        hardware: hardware_note(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub corpus: String,
    pub documents: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    /// Documents per second.
    pub fps: f64,
    pub token_capacity: usize,
    pub params: usize,
    pub elapsed_secs: f64,
    pub hardware: String,
}

impl EvalReport {
    /// The headline quality number.
    pub fn headline(&self) -> f64 {
        self.rouge1.f1
    }

    /// Fields that must not depend on timing.
    pub fn scores(&self) -> RougeSet {
        RougeSet {
            rouge1: self.rouge1,
            rouge2: self.rouge2,
            rouge_l: self.rouge_l,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per report.
    pub fn table(reports: &[EvalReport]) -> String {
        let header = ["Model", "ROUGE-1", "ROUGE-2", "ROUGE-L", "Fps", "Token", "Params(M)"];
        let rows: Vec<[String; 7]> = reports
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    format!("{:.4}", r.rouge1.f1),
                    format!("{:.4}", r.rouge2.f1),
                    format!("{:.4}", r.rouge_l.f1),
                    format!("{:.1}", r.fps),
                    r.token_capacity.to_string(),
                    format!("{:.3}", r.params as f64 / 1e6),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
        };
        line(&mut out, &header);
        line(&mut out, &widths.map(|w| "-".repeat(w)).iter().map(String::as_str).collect::<Vec<_>>());
        for row in &rows {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Decodes every document, scores it against its reference and averages
/// per pair. Throughput comes from the same pass, skipping warm-up documents.
pub fn evaluate_corpus(model: &Model, corpus: &Corpus, opts: &DecodeOptions, model_name: &str, corpus_name: &str) -> Result<EvalReport> {
    if corpus.pairs.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    if corpus.vocab.len() != model.config().vocab_size {
        return Err(Error::invalid(format!(
            "corpus vocabulary has {} entries but the model expects {}",
            corpus.vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut sets = Vec::with_capacity(corpus.pairs.len());
    let mut timed = Duration::ZERO;
    let mut timed_docs = 0;
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let start = Instant::now();
        let candidate = summarize_ids(model, &pair.document, opts)?;
        if i >= WARMUP_DOCS || corpus.pairs.len() <= WARMUP_DOCS {
            timed += start.elapsed();
            timed_docs += 1;
        }
        sets.push(rouge_all(&candidate, &pair.summary));
    }
    let avg = macro_average(&sets);
    let elapsed = timed.max(Duration::from_nanos(1));
    Ok(EvalReport {
        model: model_name.to_string(),
        corpus: corpus_name.to_string(),
        documents: corpus.pairs.len(),
        rouge1: avg.rouge1,
        rouge2: avg.rouge2,
        rouge_l: avg.rouge_l,
        fps: fps(timed_docs, elapsed),
        token_capacity: model.config().max_input_len,
        params: count_params(model),
        elapsed_secs: elapsed.as_secs_f64(),
        hardware: hardware_note(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    /// Median seconds per sparse forward.
    pub sparse_secs: f64,
    /// Median seconds per dense forward; `None` when skipped.
    pub dense_secs: Option<f64>,
    pub nnz: usize,
}

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub lengths: Vec<usize>,
    pub window: usize,
    pub globals: Vec<usize>,
    pub d_k: usize,
    pub repeats: usize,
    /// Longest sequence for which the dense reference is also timed.
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024, 2048],
            window: 16,
            globals: vec![0],
            d_k: 16,
            repeats: 5,
            dense_limit: 2048,
            seed: 0,
        }
    }
}

/// Shortest span a single timing sample may cover; fast calls are looped until they fill it.
const MIN_SAMPLE: Duration = Duration::from_millis(20);

type Job<'a> = Box<dyn Fn() -> Result<()> + 'a>;

/// Median per-call time of each job. Samples are taken round-robin across jobs so that
/// slow stretches on a shared machine spread over every job instead of one.
fn median_secs(repeats: usize, jobs: &[Job<'_>]) -> Result<Vec<f64>> {
    let mut calls = Vec::with_capacity(jobs.len());
    for job in jobs {
        // untimed warm-up, also used to size the sample
        let start = Instant::now();
        job()?;
        let once = start.elapsed().max(Duration::from_nanos(1));
        calls.push((MIN_SAMPLE.as_secs_f64() / once.as_secs_f64()).ceil().max(1.0) as usize);
    }
    let mut times = vec![Vec::with_capacity(repeats); jobs.len()];
    for _ in 0..repeats.max(1) {
        for ((job, &n), t) in jobs.iter().zip(&calls).zip(&mut times) {
            let start = Instant::now();
            for _ in 0..n {
                job()?;
            }
            t.push(start.elapsed().as_secs_f64() / n as f64);
        }
    }
    Ok(times
        .into_iter()
        .map(|mut t| {
            t.sort_by(f64::total_cmp);
            t[t.len() / 2]
        })
        .collect())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Single-head sparse vs dense attention wall time across sequence lengths.
pub fn scaling_benchmark(config: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::new();
    for &n in &config.lengths {
        let pattern = AttentionPattern::build(n, config.window, &config.globals)?;
        let q = random_matrix(&mut rng, n, config.d_k);
        let k = random_matrix(&mut rng, n, config.d_k);
        let v = random_matrix(&mut rng, n, config.d_k);
        let mask = (n <= config.dense_limit).then(|| pattern.to_mask());
        cases.push((pattern, q, k, v, mask));
    }
    let mut jobs: Vec<Job<'_>> = Vec::new();
    for (pattern, q, k, v, mask) in &cases {
        jobs.push(Box::new(move || sparse_attention_forward(q, k, v, pattern).map(drop)));
        if let Some(mask) = mask {
            jobs.push(Box::new(move || dense_attention_reference(q, k, v, mask).map(drop)));
        }
    }
    let mut secs = median_secs(config.repeats, &jobs)?.into_iter();
    let mut rows = Vec::new();
    for (&n, (pattern, .., mask)) in config.lengths.iter().zip(&cases) {
        let sparse_secs = secs.next().expect("one timing per job");
        let dense_secs = mask.as_ref().map(|_| secs.next().expect("one timing per job"));
        rows.push(ScalingRow {
            n,
            sparse_secs,
            dense_secs,
            nnz: pattern.nnz(),
        });
    }
    Ok(rows)
}

pub fn scaling_table(rows: &[ScalingRow]) -> String {
    let mut out = String::from("     n        nnz   sparse_ms    dense_ms\n");
    for r in rows {
        let dense = r.dense_secs.map_or("-".to_string(), |s| format!("{:.3}", s * 1e3));
        writeln!(out, "{:>6} {:>10} {:>11.3} {:>11}", r.n, r.nnz, r.sparse_secs * 1e3, dense).unwrap();
    }
    out
}
