//! Greedy and beam-search decoding.
//!
//! Outputs never contain `BOS` or `EOS`; `PAD`, `BOS` and `GLOBAL` are never
//! proposed. A hypothesis ends when it emits `EOS` or reaches the length cap.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EncodedDocument, Model};
use crate::text::{encode_document, TokenId, Vocabulary, BOS, EOS, GLOBAL, PAD};

/// Anything that yields next-token distributions for a summary prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Longest output (in tokens, `EOS` excluded) the model can condition on.
    fn max_output_len(&self) -> usize;
    /// `P(· | prefix)` where `prefix` starts with `BOS`.
    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Vec<f32>>;
}

/// A model paired with an encoded document.
pub struct Conditioned<'a> {
    pub model: &'a Model,
    pub document: &'a EncodedDocument,
}

impl StepModel for Conditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_output_len(&self) -> usize {
        self.model.config().max_summary_len - 1
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Vec<f32>> {
        self.model.decode_step(prefix, self.document)
    }
}

pub fn is_proposable(id: TokenId) -> bool {
    !matches!(id, PAD | BOS | GLOBAL)
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy_decode<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<Vec<TokenId>> {
    let cap = max_len.min(model.max_output_len());
    let mut prefix = vec![BOS];
    while prefix.len() - 1 < cap {
        let dist = model.next_distribution(&prefix)?;
        let mut best: Option<(TokenId, f32)> = None;
        for (id, &p) in dist.iter().enumerate() {
            let id = id as TokenId;
            if is_proposable(id) && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((id, p));
            }
        }
        let (id, _) = best.ok_or_else(|| Error::invalid("vocabulary has no proposable tokens"))?;
        if id == EOS {
            break;
        }
        prefix.push(id);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Length-penalty exponent: hypotheses are ranked by `log P / len^alpha`.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_len: 64,
            alpha: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without `BOS`/`EOS`.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub ended: bool,
}

impl Hypothesis {
    /// Scored steps: the tokens plus the closing `EOS` if there is one.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        let len = self.scored_len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }
}

/// Best first; equal keys fall back to the lexicographically smaller sequence
/// (with an ended hypothesis before its continuation).
fn rank(a: &(f64, &Hypothesis), b: &(f64, &Hypothesis)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.tokens.cmp(&b.1.tokens))
        .then_with(|| b.1.ended.cmp(&a.1.ended))
}

fn best_of(hyps: &[Hypothesis], alpha: f64) -> Option<&Hypothesis> {
    hyps.iter()
        .map(|h| (h.score(alpha), h))
        .min_by(rank)
        .map(|(_, h)| h)
}

/// Beam search. Each round expands every live hypothesis, keeps the `width`
/// best candidates by log-probability, and retires those ending in `EOS`.
/// Search stops once `width` hypotheses have ended or none remain live.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, config: &BeamConfig) -> Result<Hypothesis> {
    if config.width == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    if !config.alpha.is_finite() || config.alpha < 0.0 {
        return Err(Error::invalid("length penalty must be finite and non-negative"));
    }
    let cap = config.max_len.min(model.max_output_len());
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && finished.len() < config.width {
        if live[0].tokens.len() >= cap {
            finished.append(&mut live);
            break;
        }
        let mut candidates = Vec::new();
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&h.tokens);
            let dist = model.next_distribution(&prefix)?;
            for (id, &p) in dist.iter().enumerate() {
                let id = id as TokenId;
                if !is_proposable(id) {
                    continue;
                }
                let log_prob = h.log_prob + (p as f64).ln();
                let ended = id == EOS;
                let mut tokens = h.tokens.clone();
                if !ended {
                    tokens.push(id);
                }
                candidates.push(Hypothesis { tokens, log_prob, ended });
            }
        }
        let mut keyed: Vec<(f64, &Hypothesis)> = candidates.iter().map(|h| (h.log_prob, h)).collect();
        keyed.sort_by(rank);
        let keep: Vec<Hypothesis> = keyed.into_iter().take(config.width).map(|(_, h)| h.clone()).collect();
        live.clear();
        for h in keep {
            if h.ended {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    finished.extend(live);
    best_of(&finished, config.alpha)
        .cloned()
        .ok_or_else(|| Error::invalid("vocabulary has no proposable tokens"))
}

pub fn beam_decode<M: StepModel + ?Sized>(model: &M, config: &BeamConfig) -> Result<Vec<TokenId>> {
    beam_search(model, config).map(|h| h.tokens)
}

/// Every complete hypothesis reachable within `max_len`, for small vocabularies.
pub fn enumerate_hypotheses<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<Vec<Hypothesis>> {
    let cap = max_len.min(model.max_output_len());
    let mut out = Vec::new();
    let mut stack = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
    }];
    while let Some(h) = stack.pop() {
        if h.tokens.len() >= cap {
            out.push(h);
            continue;
        }
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&h.tokens);
        let dist = model.next_distribution(&prefix)?;
        for (id, &p) in dist.iter().enumerate() {
            let id = id as TokenId;
            if !is_proposable(id) {
                continue;
            }
            let log_prob = h.log_prob + (p as f64).ln();
            if id == EOS {
                out.push(Hypothesis {
                    tokens: h.tokens.clone(),
                    log_prob,
                    ended: true,
                });
            } else {
                let mut tokens = h.tokens.clone();
                tokens.push(id);
                stack.push(Hypothesis { tokens, log_prob, ended: false });
            }
        }
    }
    Ok(out)
}

/// Exhaustive search over [`enumerate_hypotheses`].
pub fn brute_force_decode<M: StepModel + ?Sized>(model: &M, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let all = enumerate_hypotheses(model, max_len)?;
    best_of(&all, alpha)
        .cloned()
        .ok_or_else(|| Error::invalid("vocabulary has no proposable tokens"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam { width: usize, alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        let beam = BeamConfig::default();
        Self {
            strategy: Strategy::Beam {
                width: beam.width,
                alpha: beam.alpha,
            },
            max_len: beam.max_len,
        }
    }
}

/// Summary token ids for an already-tokenized document (with its sentinel).
pub fn summarize_ids(model: &Model, document: &[TokenId], opts: &DecodeOptions) -> Result<Vec<TokenId>> {
    let encoded = model.prepare(document)?;
    let conditioned = Conditioned {
        model,
        document: &encoded,
    };
    match opts.strategy {
        Strategy::Greedy => greedy_decode(&conditioned, opts.max_len),
        Strategy::Beam { width, alpha } => beam_decode(
            &conditioned,
            &BeamConfig {
                width,
                max_len: opts.max_len,
                alpha,
            },
        ),
    }
}

pub fn summarize(model: &Model, vocab: &Vocabulary, text: &str, opts: &DecodeOptions) -> Result<String> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let document = encode_document(vocab, text, model.config().max_input_len);
    if document.len() < 2 {
        return Err(Error::invalid("document contains no tokens"));
    }
    Ok(vocab.detokenize(&summarize_ids(model, &document, opts)?))
}
