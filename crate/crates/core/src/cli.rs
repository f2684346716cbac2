//! Command-line front end: `gen`, `train`, `summarize`, `eval`, `bench`,
//! `selftest`.
//!
//! Settings resolve as flag > `--config` JSON file > built-in default.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_reference, sparse_attention_forward, sparse_attention_weights, AttentionPattern};
use crate::checkpoint;
use crate::decoding::{summarize_ids, DecodeOptions, Strategy};
use crate::error::{Error, Result};
use crate::evaluation::{self, evaluate_corpus, rouge_l, rouge_n, EvalReport, ScalingConfig};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::text::{self, encode_document, load_corpus, CorpusPair, LoadOptions, SyntheticSpec, SyntheticTask, Vocabulary};
use crate::training::{self, clip_gradient, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "longsum", version, about = "Long-document summarization with sparse attention")]
pub struct Cli {
    /// JSON settings file (sections: model, train, decode, data)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output file or directory (meaning depends on the subcommand)
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSON-lines corpus
    Gen(GenArgs),
    /// Train a model on a JSON-lines corpus
    Train(TrainArgs),
    /// Summarize documents with a trained checkpoint
    Summarize(SummarizeArgs),
    /// Score a checkpoint on a corpus and report ROUGE, throughput and size
    Eval(EvalArgs),
    /// Time sparse against dense attention across sequence lengths
    Bench(BenchArgs),
    /// Run built-in consistency checks
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    /// Summary = first k document tokens
    Copy,
    /// Summary = the keywords hidden in the document, in order
    Keyword,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthetic task
    #[arg(long, value_enum, default_value_t = TaskKind::Copy)]
    pub task: TaskKind,
    /// Summary length (k for copy, keyword count for keyword)
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Number of document/summary pairs
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    /// Shortest document, in tokens
    #[arg(long, default_value_t = 16)]
    pub min_len: usize,
    /// Longest document, in tokens
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Model width
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Encoder layers
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Decoder layers
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Feed-forward inner width (0 disables the feed-forward blocks)
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Sliding-window half-width of encoder attention
    #[arg(long)]
    pub window: Option<usize>,
    /// Longest encoder input, sentinel included
    #[arg(long)]
    pub max_input_len: Option<usize>,
    /// Longest decoder input, BOS included
    #[arg(long)]
    pub max_summary_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus (JSON lines with "document" and "summary")
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<u64>,
    /// Pairs per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f32>,
    /// Gradient norm cap
    #[arg(long)]
    pub clip: Option<f32>,
    /// Clip the norm of all gradients jointly instead of per tensor
    #[arg(long)]
    pub global_clip: bool,
    /// Write a resumable checkpoint every N steps (0 = only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Largest vocabulary built from the corpus
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Continue from the periodic checkpoint saved at this step in --out
    #[arg(long, value_name = "STEP")]
    pub resume: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args, Default)]
pub struct DecodeFlags {
    /// Use greedy decoding instead of beam search
    #[arg(long)]
    pub greedy: bool,
    /// Beam width
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Length-penalty exponent
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Longest summary, in tokens
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Vocabulary file (default: vocab.txt next to the checkpoint)
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Input: one document per line, or JSON lines with a "document" field
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Vocabulary file (default: vocab.txt next to the checkpoint)
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Held-out corpus (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Row label in the report
    #[arg(long, default_value = "sparse-seq2seq")]
    pub name: String,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths to time
    #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512, 1024, 2048])]
    pub lengths: Vec<usize>,
    /// Sliding-window half-width
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    /// Per-head width
    #[arg(long, default_value_t = 16)]
    pub d_k: usize,
    /// Timed repetitions per length (median reported)
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Skip the dense reference above this length
    #[arg(long, default_value_t = 2048)]
    pub dense_limit: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also print a small attention pattern
    #[arg(long)]
    pub show_pattern: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub greedy: bool,
    pub beam_width: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            greedy: false,
            beam_width: 4,
            alpha: 0.6,
            max_len: 64,
        }
    }
}

impl DecodeSettings {
    pub fn options(&self) -> DecodeOptions {
        DecodeOptions {
            strategy: if self.greedy {
                Strategy::Greedy
            } else {
                Strategy::Beam {
                    width: self.beam_width,
                    alpha: self.alpha,
                }
            },
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub vocab_size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { vocab_size: 8000 }
    }
}

/// Every setting a subcommand may read, fully resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        match &cli.command {
            Command::Train(a) => {
                let m = &mut cfg.model;
                let f = &a.model;
                set(&mut m.d_model, f.d_model);
                set(&mut m.heads, f.heads);
                set(&mut m.encoder_layers, f.encoder_layers);
                set(&mut m.decoder_layers, f.decoder_layers);
                set(&mut m.d_ff, f.d_ff);
                set(&mut m.window, f.window);
                set(&mut m.max_input_len, f.max_input_len);
                set(&mut m.max_summary_len, f.max_summary_len);
                let t = &mut cfg.train;
                set(&mut t.max_steps, a.steps);
                set(&mut t.batch_size, a.batch_size);
                set(&mut t.learning_rate, a.lr);
                set(&mut t.clip_cap, a.clip);
                set(&mut t.checkpoint_every, a.checkpoint_every);
                t.global_clip |= a.global_clip;
                set(&mut cfg.data.vocab_size, a.vocab_size);
            }
            Command::Summarize(SummarizeArgs { decode, .. }) | Command::Eval(EvalArgs { decode, .. }) => {
                let d = &mut cfg.decode;
                d.greedy |= decode.greedy;
                set(&mut d.beam_width, decode.beam_width);
                set(&mut d.alpha, decode.alpha);
                set(&mut d.max_len, decode.max_len);
            }
            _ => {}
        }
        cfg.train.validate()?;
        if cfg.decode.beam_width == 0 {
            return Err(Error::Config {
                key: "decode.beam_width".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// What a subcommand produced, for callers that drive the CLI in-process.
#[derive(Debug)]
pub enum Outcome {
    Generated(PathBuf),
    Trained(training::TrainOutcome),
    Summaries(Vec<String>),
    Evaluated(EvalReport),
    Benchmarked(Vec<evaluation::ScalingRow>),
    SelfTest(Vec<Check>),
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = RunConfig::resolve(cli)?;
    log::info!(
        "settings: {} (precedence: flags > {} > defaults)",
        serde_json::to_string(&cfg).expect("config serializes"),
        cli.config.as_ref().map_or("no config file".to_string(), |p| p.display().to_string())
    );
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &cfg, cli.out.as_deref()),
        Command::Train(a) => cmd_train(a, &cfg, cli.out.as_deref()),
        Command::Summarize(a) => cmd_summarize(a, &cfg, cli.out.as_deref()),
        Command::Eval(a) => cmd_eval(a, &cfg, cli.out.as_deref()),
        Command::Bench(a) => cmd_bench(a, &cfg, cli.out.as_deref()),
        Command::Selftest(a) => cmd_selftest(a, &cfg),
    }
}

fn cmd_gen(a: &GenArgs, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let task = match a.task {
        TaskKind::Copy => SyntheticTask::CopyFirstK { k: a.k },
        TaskKind::Keyword => SyntheticTask::KeywordExtract { count: a.k },
    };
    let spec = SyntheticSpec {
        min_len: a.min_len,
        max_len: a.max_len,
        ..SyntheticSpec::new(task, a.pairs, cfg.seed)
    };
    let path = out.map_or_else(|| PathBuf::from("corpus.jsonl"), Path::to_path_buf);
    text::generate_synthetic_corpus(&spec, &path)?;
    println!("wrote {} pairs to {}", a.pairs, path.display());
    Ok(Outcome::Generated(path))
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.json";

fn load_options(cfg: &RunConfig) -> LoadOptions {
    LoadOptions {
        max_input_len: cfg.model.max_input_len,
        max_summary_len: cfg.model.max_summary_len,
        vocab_size: cfg.data.vocab_size,
    }
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let dir = out.map_or_else(|| PathBuf::from("run"), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if a.resume.is_some() {
        Some(Vocabulary::load(&vocab_path)?)
    } else {
        None
    };
    let corpus = load_corpus(&a.corpus, &load_options(cfg), vocab)?;
    let outcome = match a.resume {
        Some(step) => training::resume(&corpus.pairs, &cfg.train, &dir, step)?.1,
        None => {
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = corpus.vocab.len();
            let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
            corpus.vocab.save(&vocab_path)?;
            let resolved = RunConfig {
                model: model_cfg,
                ..cfg.clone()
            };
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, serde_json::to_string_pretty(&resolved).expect("config serializes")).map_err(|e| Error::io(&cfg_path, e))?;
            log::info!("{} parameters, {} pairs, vocabulary {}", crate::model::count_params(&model), corpus.pairs.len(), corpus.vocab.len());
            training::train(&corpus.pairs, &mut model, &cfg.train, &dir)?
        }
    };
    let last = outcome.history.last().map_or(f32::NAN, |(_, l)| *l);
    println!("trained {} steps, final loss {last}, checkpoint {}", outcome.state.step, outcome.checkpoint.display());
    Ok(Outcome::Trained(outcome))
}

fn load_model_and_vocab(checkpoint_path: &Path, vocab: Option<&Path>) -> Result<(Model, Vocabulary)> {
    let model = checkpoint::load(checkpoint_path)?;
    let vocab_path = vocab.map_or_else(|| checkpoint_path.with_file_name(VOCAB_FILE), Path::to_path_buf);
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config {
            key: "vocab".into(),
            message: format!("{} has {} entries but the checkpoint expects {}", vocab_path.display(), vocab.len(), model.config().vocab_size),
        });
    }
    Ok((model, vocab))
}

/// Documents from a file of plain lines or JSON lines.
fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('{') {
            #[derive(Deserialize)]
            struct Doc {
                document: String,
            }
            let d: Doc = serde_json::from_str(trimmed).map_err(|e| Error::Corpus {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            docs.push(d.document);
        } else {
            docs.push(line.to_string());
        }
    }
    Ok(docs)
}

fn cmd_summarize(a: &SummarizeArgs, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let (model, vocab) = load_model_and_vocab(&a.checkpoint, a.vocab.as_deref())?;
    let opts = cfg.decode.options();
    let mut summaries = Vec::new();
    for doc in read_documents(&a.input)? {
        let ids = encode_document(&vocab, &doc, model.config().max_input_len);
        let summary = if ids.len() < 2 {
            String::new()
        } else {
            vocab.detokenize(&summarize_ids(&model, &ids, &opts)?)
        };
        summaries.push(summary);
    }
    let body: String = summaries.iter().map(|s| format!("{s}\n")).collect();
    match out {
        Some(p) => fs::write(p, &body).map_err(|e| Error::io(p, e))?,
        None => std::io::stdout().write_all(body.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(Outcome::Summaries(summaries))
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let (model, vocab) = load_model_and_vocab(&a.checkpoint, a.vocab.as_deref())?;
    let opts = LoadOptions {
        max_input_len: model.config().max_input_len,
        max_summary_len: model.config().max_summary_len,
        vocab_size: vocab.len(),
    };
    let corpus = load_corpus(&a.corpus, &opts, Some(vocab))?;
    let report = evaluate_corpus(&model, &corpus, &cfg.decode.options(), &a.name, &a.corpus.display().to_string())?;
    print!("{}", EvalReport::table(std::slice::from_ref(&report)));
    println!("hardware: {}", report.hardware);
    if let Some(p) = out {
        fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    Ok(Outcome::Evaluated(report))
}

fn cmd_bench(a: &BenchArgs, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let rows = evaluation::scaling_benchmark(&ScalingConfig {
        lengths: a.lengths.clone(),
        window: a.window,
        globals: vec![0],
        d_k: a.d_k,
        repeats: a.repeats,
        dense_limit: a.dense_limit,
        seed: cfg.seed,
    })?;
    print!("{}", evaluation::scaling_table(&rows));
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&rows).expect("rows serialize")).map_err(|e| Error::io(p, e))?;
    }
    Ok(Outcome::Benchmarked(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_pattern(rng: &mut ChaCha8Rng, max_n: usize) -> Result<AttentionPattern> {
    let n = rng.gen_range(1..=max_n);
    let w = rng.gen_range(0..=n);
    let globals: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(0..n)).collect();
    AttentionPattern::build(n, w, &globals)
}

/// Quick versions of the library's consistency checks.
pub fn self_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f32;
    for _ in 0..50 {
        let p = random_pattern(&mut rng, 24)?;
        let d = rng.gen_range(1..8);
        let (q, k, v) = (random_tensor(&mut rng, p.len(), d), random_tensor(&mut rng, p.len(), d), random_tensor(&mut rng, p.len(), d));
        let sparse = sparse_attention_forward(&q, &k, &v, &p)?;
        let dense = dense_attention_reference(&q, &k, &v, &p.to_mask())?;
        worst = worst.max(sparse.max_abs_diff(&dense));
    }
    checks.push(Check {
        name: "sparse vs dense attention",
        passed: worst <= 1e-5,
        detail: format!("max abs diff {worst:.2e}"),
    });

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_pattern(&mut rng, 24)?;
        let q = random_tensor(&mut rng, p.len(), 4);
        let k = random_tensor(&mut rng, p.len(), 4);
        let w = sparse_attention_weights(&q, &k, &p)?;
        for i in 0..p.len() {
            let s: f64 = w.row(i).map(|(_, x)| x as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    checks.push(Check {
        name: "attention rows sum to one",
        passed: worst <= 1e-6,
        detail: format!("max deviation {worst:.2e}"),
    });

    let model = Model::new(
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 16,
            max_input_len: 16,
            max_summary_len: 8,
            window: 2,
            extra_globals: vec![],
        },
        seed,
    )?;
    let pair = CorpusPair {
        document: vec![text::GLOBAL, 5, 6, 7, 8, 9, 10, 11],
        summary: vec![5, 6, 7],
        line: 1,
    };
    let samples = training::gradient_check(&model, &pair, 100, 1e-3, seed)?;
    let within = samples.iter().filter(|s| s.error <= 1e-3).count() as f64 / samples.len() as f64;
    let worst = samples.iter().map(|s| s.error).fold(0.0f32, f32::max);
    checks.push(Check {
        name: "backprop vs finite differences",
        passed: within >= 0.95 && worst <= 1e-2,
        detail: format!("{:.0}% within 1e-3, worst {worst:.2e}", within * 100.0),
    });

    let mut ok = true;
    for _ in 0..200 {
        let len = rng.gen_range(1..32);
        let scale = rng.gen_range(0.0..10.0f32);
        let g = Tensor::new([len], (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap();
        let c = clip_gradient(&g, 1.0);
        ok &= c.l2_norm() <= 1.0 + 1e-6 && clip_gradient(&c, 1.0).max_abs_diff(&c) <= 1e-6;
    }
    checks.push(Check {
        name: "gradient clipping",
        passed: ok,
        detail: "norm cap and idempotence on 200 tensors".into(),
    });

    let mut ok = true;
    for _ in 0..200 {
        let a: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..4)).collect();
        ok &= rouge_n(&a, &a, 1).f1 == if a.is_empty() { 0.0 } else { 1.0 };
        let (x, y) = (rouge_n(&a, &b, 1), rouge_n(&b, &a, 1));
        ok &= x.precision == y.recall && (x.f1 - y.f1).abs() < 1e-12;
        ok &= rouge_l(&a, &b).f1 <= 1.0;
    }
    checks.push(Check {
        name: "rouge properties",
        passed: ok,
        detail: "self-match and swap symmetry on 200 pairs".into(),
    });
    Ok(checks)
}

pub fn check_matrix(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let mark = if c.passed { "pass" } else { "FAIL" };
        writeln!(out, "{:<width$}  {mark}  {}", c.name, c.detail).unwrap();
    }
    out
}

fn cmd_selftest(a: &SelftestArgs, cfg: &RunConfig) -> Result<Outcome> {
    if a.show_pattern {
        let p = AttentionPattern::build(12, 2, &[0])?;
        println!("pattern n=12 w=2 globals=[0]\n{}", p.render());
    }
    let checks = self_checks(cfg.seed)?;
    print!("{}", check_matrix(&checks));
    if let Some(bad) = checks.iter().find(|c| !c.passed) {
        return Err(Error::InvalidArgument(format!("self-test failed: {}", bad.name)));
    }
    Ok(Outcome::SelfTest(checks))
}
