//! Tokenization, vocabulary, JSON-lines corpora and batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Sentinel prepended to every document; always a global attention position.
pub const GLOBAL: TokenId = 4;
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<global>"];

/// Splits raw text into normalized token strings. The default splitter is
/// [`WordPunct`]; a subword tokenizer can be plugged in through this trait.
pub trait Tokenizer {
    fn split(&self, text: &str) -> Vec<String>;
}

/// Lowercases, splits on whitespace, and emits every non-alphanumeric,
/// non-whitespace character as its own token.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordPunct;

impl Tokenizer for WordPunct {
    fn split(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_whitespace() {
                flush(&mut word, &mut out);
            } else if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                flush(&mut word, &mut out);
                out.push(ch.to_lowercase().collect());
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Tokens of `text` joined by single spaces.
pub fn normalize(text: &str) -> String {
    WordPunct.split(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut vocab = Self::reserved_only();
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {w:?}")));
            }
            if vocab.index.contains_key(&w) {
                return Err(Error::invalid(format!("duplicate vocabulary token {w:?}")));
            }
            vocab.index.insert(w.clone(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(w);
        }
        Ok(vocab)
    }

    /// Keeps the `max_size - 5` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED {
            return Err(Error::invalid(format!(
                "vocabulary max_size must exceed the {RESERVED} reserved ids, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in WordPunct.split(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        WordPunct.split(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line `k` (0-based) holds id `k + 5`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens[RESERVED..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string)).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// One corpus line as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub document: String,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPair {
    /// Starts with [`GLOBAL`].
    pub document: Vec<TokenId>,
    pub summary: Vec<TokenId>,
    /// 1-based line in the source file.
    pub line: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub max_input_len: usize,
    pub max_summary_len: usize,
    /// Used when a vocabulary has to be built from the corpus.
    pub vocab_size: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_input_len: 512,
            max_summary_len: 64,
            vocab_size: 8000,
        }
    }
}

impl LoadOptions {
    /// Summary tokens kept so that BOS + summary stays under `max_summary_len`.
    pub fn summary_budget(&self) -> usize {
        self.max_summary_len.saturating_sub(2).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub pairs: Vec<CorpusPair>,
    pub vocab: Vocabulary,
    /// Number of documents that were cut to `max_input_len`.
    pub truncated: usize,
}

/// Parses a JSON-lines file into records, reporting the first bad line.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corpus_err = |line: usize, message: String| Error::Corpus {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let text = std::str::from_utf8(raw).map_err(|e| corpus_err(line_no, format!("invalid UTF-8: {e}")))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| corpus_err(line_no, e.to_string()))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(corpus_err(0, "corpus is empty".into()));
    }
    Ok(records)
}

fn with_sentinel(mut doc: Vec<TokenId>, max_input_len: usize) -> Vec<TokenId> {
    doc.truncate(max_input_len.saturating_sub(1));
    let mut document = Vec::with_capacity(doc.len() + 1);
    document.push(GLOBAL);
    document.extend(doc);
    document
}

/// Encoder input for raw text: [`GLOBAL`] followed by the first
/// `max_input_len - 1` tokens.
pub fn encode_document(vocab: &Vocabulary, text: &str, max_input_len: usize) -> Vec<TokenId> {
    with_sentinel(vocab.tokenize(text), max_input_len)
}

/// Tokenizes records into pairs. Documents get the [`GLOBAL`] sentinel and
/// are head-truncated to `max_input_len`.
pub fn encode_records(records: &[Record], vocab: &Vocabulary, opts: &LoadOptions, path: &Path) -> Result<(Vec<CorpusPair>, usize)> {
    if opts.max_input_len < 2 {
        return Err(Error::invalid("max_input_len must be >= 2"));
    }
    let mut truncated = 0;
    let mut pairs = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let line = i + 1;
        let doc = vocab.tokenize(&rec.document);
        let mut summary = vocab.tokenize(&rec.summary);
        if doc.is_empty() || summary.is_empty() {
            return Err(Error::Corpus {
                path: path.to_path_buf(),
                line,
                message: "document and summary must both contain tokens".into(),
            });
        }
        if doc.len() > opts.max_input_len - 1 {
            truncated += 1;
        }
        summary.truncate(opts.summary_budget());
        let document = with_sentinel(doc, opts.max_input_len);
        pairs.push(CorpusPair { document, summary, line });
    }
    Ok((pairs, truncated))
}

/// Loads a JSON-lines corpus. Without `vocab`, one is built from the corpus
/// (documents and summaries) with `opts.vocab_size` entries.
pub fn load_corpus(path: &Path, opts: &LoadOptions, vocab: Option<Vocabulary>) -> Result<Corpus> {
    let records = read_records(path)?;
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(&records, opts.vocab_size)?,
    };
    // Blank lines are skipped, so recover true line numbers for diagnostics.
    let (mut pairs, truncated) = encode_records(&records, &vocab, opts, path)?;
    let line_numbers = nonblank_line_numbers(path)?;
    for (pair, &line) in pairs.iter_mut().zip(&line_numbers) {
        pair.line = line;
    }
    if truncated > 0 {
        log::info!("{}: truncated {truncated} document(s) to {} tokens", path.display(), opts.max_input_len);
    }
    Ok(Corpus { pairs, vocab, truncated })
}

fn nonblank_line_numbers(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace))
        .map(|(i, _)| i + 1)
        .collect())
}

pub fn build_vocab(records: &[Record], max_size: usize) -> Result<Vocabulary> {
    Vocabulary::build(records.iter().flat_map(|r| [r.document.as_str(), r.summary.as_str()]), max_size)
}

/// Right-padded id matrix with a real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub rows: usize,
    pub width: usize,
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl PaddedIds {
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, width - s.len()));
        }
        Self {
            rows: seqs.len(),
            width,
            ids,
            mask,
        }
    }

    pub fn len_of(&self, row: usize) -> usize {
        self.mask[row * self.width..(row + 1) * self.width].iter().filter(|&&m| m).count()
    }

    /// Row `row` without its padding.
    pub fn row(&self, row: usize) -> &[TokenId] {
        &self.ids[row * self.width..row * self.width + self.len_of(row)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the pair list this batch was drawn from.
    pub pairs: Vec<usize>,
    pub documents: PaddedIds,
    /// `BOS y_1 … y_m`
    pub decoder_inputs: PaddedIds,
    /// `y_1 … y_m EOS`
    pub targets: PaddedIds,
}

/// Seeded shuffle into batches of at most `batch_size` pairs.
pub fn make_batches(pairs: &[CorpusPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|idx| batch_of(pairs, idx)).collect())
}

pub fn batch_of(pairs: &[CorpusPair], idx: &[usize]) -> Batch {
    let docs: Vec<Vec<TokenId>> = idx.iter().map(|&i| pairs[i].document.clone()).collect();
    let inputs: Vec<Vec<TokenId>> = idx
        .iter()
        .map(|&i| std::iter::once(BOS).chain(pairs[i].summary.iter().copied()).collect())
        .collect();
    let targets: Vec<Vec<TokenId>> = idx
        .iter()
        .map(|&i| pairs[i].summary.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    Batch {
        pairs: idx.to_vec(),
        documents: PaddedIds::from_sequences(&docs),
        decoder_inputs: PaddedIds::from_sequences(&inputs),
        targets: PaddedIds::from_sequences(&targets),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Summary is the first `k` document tokens.
    CopyFirstK { k: usize },
    /// Summary is the `count` keyword tokens hidden among filler, in order.
    KeywordExtract { count: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n_pairs: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, n_pairs: usize, seed: u64) -> Self {
        Self {
            task,
            n_pairs,
            seed,
            min_len: 16,
            max_len: 32,
        }
    }
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// 120 two-syllable filler words, deterministic.
pub fn filler_lexicon() -> Vec<String> {
    let syl: Vec<String> = ONSETS.iter().flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}"))).collect();
    (0..120)
        .map(|i| format!("{}{}", syl[i % 60], syl[((i / 60) * 29 + i * 7 + 3) % 60]))
        .collect()
}

/// 40 keyword tokens disjoint from the filler lexicon.
pub fn keyword_lexicon() -> Vec<String> {
    let syl: Vec<String> = ONSETS.iter().flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}"))).collect();
    (0..40).map(|i| format!("{}{}x", syl[(i * 11) % syl.len()], syl[(i * 13 + 5) % syl.len()])).collect()
}

pub fn synthetic_records(spec: &SyntheticSpec) -> Result<Vec<Record>> {
    if spec.n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    let need = match spec.task {
        SyntheticTask::CopyFirstK { k } => k,
        SyntheticTask::KeywordExtract { count } => count,
    };
    if need == 0 || spec.min_len < need || spec.max_len < spec.min_len {
        return Err(Error::invalid(format!(
            "synthetic lengths {}..={} cannot hold {need} summary tokens",
            spec.min_len, spec.max_len
        )));
    }
    let filler = filler_lexicon();
    let keywords = keyword_lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut doc: Vec<&str> = (0..len).map(|_| filler[rng.gen_range(0..filler.len())].as_str()).collect();
        let summary: Vec<&str> = match spec.task {
            SyntheticTask::CopyFirstK { k } => doc[..k].to_vec(),
            SyntheticTask::KeywordExtract { count } => {
                let mut slots: Vec<usize> = (0..len).collect();
                slots.shuffle(&mut rng);
                let mut slots = slots[..count].to_vec();
                slots.sort_unstable();
                for &s in &slots {
                    doc[s] = keywords[rng.gen_range(0..keywords.len())].as_str();
                }
                slots.iter().map(|&s| doc[s]).collect()
            }
        };
        out.push(Record {
            document: doc.join(" "),
            summary: summary.join(" "),
        });
    }
    Ok(out)
}

pub fn write_records(records: &[Record], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic JSON-lines corpus to `path`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, path: &Path) -> Result<()> {
    write_records(&synthetic_records(spec)?, path)
}
