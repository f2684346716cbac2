//! Encoder-decoder transformer.
//!
//! The encoder stacks pre-norm layers of banded sparse self-attention and a
//! position-wise feed-forward block. The decoder is a standard causal
//! transformer decoder (dense causal self-attention, dense cross-attention
//! over the encoder states `H`) followed by the generation head
//! `softmax(h_t · W_h + b)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHeadConfig, AttentionPattern};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{self, Tensor};
use crate::text::{TokenId, BOS, GLOBAL, RESERVED};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward inner width; `0` drops the feed-forward blocks.
    pub d_ff: usize,
    pub max_input_len: usize,
    pub max_summary_len: usize,
    /// Sliding-window half-width for encoder self-attention.
    pub window: usize,
    /// Global positions in addition to position 0 and every GLOBAL sentinel.
    pub extra_globals: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 256,
            max_input_len: 512,
            max_summary_len: 64,
            window: 16,
            extra_globals: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.into(),
            message,
        };
        if self.vocab_size <= RESERVED {
            return Err(bad("vocab_size", format!("must exceed {RESERVED} reserved ids")));
        }
        AttentionHeadConfig::new(self.d_model, self.heads).map_err(|e| bad("heads", e.to_string()))?;
        if self.max_summary_len == 0 {
            return Err(bad("max_summary_len", "must be >= 1".into()));
        }
        if self.max_input_len < self.max_summary_len {
            return Err(bad(
                "max_input_len",
                format!("must be >= max_summary_len ({})", self.max_summary_len),
            ));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Global positions for a tokenized document: position 0, any GLOBAL
    /// sentinel, and configured extras that fall inside the sequence.
    pub fn globals_for(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mut g: Vec<usize> = std::iter::once(0)
            .chain(tokens.iter().enumerate().filter(|(_, &t)| t == GLOBAL).map(|(i, _)| i))
            .chain(self.extra_globals.iter().copied().filter(|&i| i < tokens.len()))
            .collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn pattern_for(&self, tokens: &[TokenId]) -> Result<AttentionPattern> {
        AttentionPattern::build(tokens.len(), self.window, &self.globals_for(tokens))
    }

    fn attention_size(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    fn ffn_size(&self) -> usize {
        if self.d_ff == 0 {
            0
        } else {
            2 * self.d_model + 2 * self.d_model * self.d_ff + self.d_ff + self.d_model
        }
    }

    pub fn encoder_layer_size(&self) -> usize {
        2 * self.d_model + self.attention_size() + self.ffn_size()
    }

    pub fn decoder_layer_size(&self) -> usize {
        4 * self.d_model + 2 * self.attention_size() + self.ffn_size()
    }

    /// Closed-form scalar parameter count:
    ///
    /// ```text
    /// V·d                      token embedding
    /// + L·d                    positional table
    /// + E·enc_layer + D·dec_layer
    /// + 2d·[E>0] + 2d·[D>0]    final layer norms
    /// + d·V + V                generation head
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        v * d
            + self.max_input_len * d
            + self.encoder_layers * self.encoder_layer_size()
            + self.decoder_layers * self.decoder_layer_size()
            + if self.encoder_layers > 0 { 2 * d } else { 0 }
            + if self.decoder_layers > 0 { 2 * d } else { 0 }
            + d * v
            + v
    }
}

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// The positional table is stored and counted but never updated.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionParams {
    q: Projection,
    k: Projection,
    v: Projection,
    out: Projection,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    norm: Norm,
    inner: Projection,
    outer: Projection,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm: Norm,
    attn: AttentionParams,
    ffn: Option<FeedForward>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: AttentionParams,
    cross_norm: Norm,
    cross_attn: AttentionParams,
    ffn: Option<FeedForward>,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    positions: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    head: Projection,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    layout: Layout,
}

enum Init {
    Uniform(f32),
    Zeros,
    Ones,
    Sinusoid,
}

struct Builder<'r> {
    params: Vec<Parameter>,
    rng: &'r mut ChaCha8Rng,
    d_model: usize,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Uniform(bound) => (0..numel).map(|_| self.rng.gen_range(-bound..=bound)).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Sinusoid => sinusoid_table(shape[0], shape[1]),
        };
        let trainable = !matches!(init, Init::Sinusoid);
        self.params.push(Parameter {
            name,
            tensor: Tensor::new(shape.to_vec(), data).expect("valid parameter shape"),
            trainable,
        });
        self.params.len() - 1
    }

    fn bound(&self) -> f32 {
        1.0 / (self.d_model as f32).sqrt()
    }

    fn norm(&mut self, prefix: &str) -> Norm {
        let d = self.d_model;
        Norm {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn projection(&mut self, prefix: &str, rows: usize, cols: usize) -> Projection {
        let b = self.bound();
        Projection {
            weight: self.add(format!("{prefix}.weight"), &[rows, cols], Init::Uniform(b)),
            bias: self.add(format!("{prefix}.bias"), &[cols], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str) -> AttentionParams {
        let d = self.d_model;
        AttentionParams {
            q: self.projection(&format!("{prefix}.q"), d, d),
            k: self.projection(&format!("{prefix}.k"), d, d),
            v: self.projection(&format!("{prefix}.v"), d, d),
            out: self.projection(&format!("{prefix}.out"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d_ff: usize) -> Option<FeedForward> {
        (d_ff > 0).then(|| FeedForward {
            norm: self.norm(&format!("{prefix}.norm")),
            inner: self.projection(&format!("{prefix}.inner"), self.d_model, d_ff),
            outer: self.projection(&format!("{prefix}.outer"), d_ff, self.d_model),
        })
    }
}

fn sinusoid_table(len: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

impl Model {
    /// Fresh model: weights ~ U(−1/√d, 1/√d), biases 0, norm gains 1,
    /// sinusoidal positional table.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
            d_model: d,
        };
        let bound = b.bound();
        let embedding = b.add("embedding".into(), &[v, d], Init::Uniform(bound));
        let positions = b.add("positions".into(), &[config.max_input_len, d], Init::Sinusoid);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer {
                norm: b.norm(&format!("encoder.{l}.attn_norm")),
                attn: b.attention(&format!("encoder.{l}.attn")),
                ffn: b.ffn(&format!("encoder.{l}.ffn"), config.d_ff),
            })
            .collect();
        let encoder_norm = (config.encoder_layers > 0).then(|| b.norm("encoder.final_norm"));
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer {
                self_norm: b.norm(&format!("decoder.{l}.self_norm")),
                self_attn: b.attention(&format!("decoder.{l}.self_attn")),
                cross_norm: b.norm(&format!("decoder.{l}.cross_norm")),
                cross_attn: b.attention(&format!("decoder.{l}.cross_attn")),
                ffn: b.ffn(&format!("decoder.{l}.ffn"), config.d_ff),
            })
            .collect();
        let decoder_norm = (config.decoder_layers > 0).then(|| b.norm("decoder.final_norm"));
        let head = b.projection("head", d, v);
        let params = b.params;
        Ok(Self {
            config,
            params,
            layout: Layout {
                embedding,
                positions,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Replaces parameter data in declaration order, checking shapes.
    pub(crate) fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.tensor = t;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.layout.head.weight
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.layout.head.bias
    }

    pub fn bind(&self) -> Bound<'_> {
        Bound {
            model: self,
            vars: vec![None; self.params.len()],
        }
    }

    fn check_ids(&self, ids: &[TokenId], what: &str) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "{what} token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, b: &mut Bound, ids: &[TokenId]) -> Result<Var> {
        let table = b.var(g, self.layout.embedding);
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let x = g.gather_rows(table, &rows)?;
        let x = g.scale(x, (self.config.d_model as f32).sqrt())?;
        let pos = &self.params[self.layout.positions].tensor;
        let d = self.config.d_model;
        let slice = Tensor::new([ids.len(), d], pos.data()[..ids.len() * d].to_vec())?;
        let pos = g.constant(slice);
        g.add(x, pos)
    }

    fn linear(&self, g: &mut Graph, b: &mut Bound, x: Var, p: Projection) -> Result<Var> {
        let w = b.var(g, p.weight);
        let bias = b.var(g, p.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    fn norm(&self, g: &mut Graph, b: &mut Bound, x: Var, n: Norm) -> Result<Var> {
        let gain = b.var(g, n.gain);
        let bias = b.var(g, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn feed_forward(&self, g: &mut Graph, b: &mut Bound, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.norm(g, b, x, f.norm)?;
        let h = self.linear(g, b, h, f.inner)?;
        let h = g.relu(h)?;
        let h = self.linear(g, b, h, f.outer)?;
        g.add(x, h)
    }

    /// Encoder states `H` (`n × d_model`) recorded on `g`.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Bound, tokens: &[TokenId]) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty document"));
        }
        if n > self.config.max_input_len {
            return Err(Error::invalid(format!(
                "document of {n} tokens exceeds max_input_len {}",
                self.config.max_input_len
            )));
        }
        self.check_ids(tokens, "document")?;
        let pattern = Arc::new(self.config.pattern_for(tokens)?);
        let mut x = self.embed(g, b, tokens)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, b, x, layer.norm)?;
            let q = self.linear(g, b, h, layer.attn.q)?;
            let k = self.linear(g, b, h, layer.attn.k)?;
            let v = self.linear(g, b, h, layer.attn.v)?;
            let a = g.sparse_attention(q, k, v, pattern.clone(), self.config.heads)?;
            let o = self.linear(g, b, a, layer.attn.out)?;
            x = g.add(x, o)?;
            if let Some(f) = layer.ffn {
                x = self.feed_forward(g, b, x, f)?;
            }
        }
        match self.layout.encoder_norm {
            Some(n) => self.norm(g, b, x, n),
            None => Ok(x),
        }
    }

    pub fn encode(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bind();
        let h = self.encode_graph(&mut g, &mut b, tokens)?;
        Ok(g.value(h).clone())
    }

    /// Encodes and precomputes every decoder layer's cross-attention keys
    /// and values, which stay fixed for the whole decode.
    pub fn prepare(&self, tokens: &[TokenId]) -> Result<EncodedDocument> {
        let mut g = Graph::new();
        let mut b = self.bind();
        let h = self.encode_graph(&mut g, &mut b, tokens)?;
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let k = self.linear(&mut g, &mut b, h, layer.cross_attn.k)?;
            let v = self.linear(&mut g, &mut b, h, layer.cross_attn.v)?;
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(EncodedDocument {
            states: g.value(h).clone(),
            cross,
            peak_numel: g.peak_numel(),
        })
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::invalid("decoder prefix is empty"));
        }
        if prefix[0] != BOS {
            return Err(Error::invalid("decoder prefix must start with BOS"));
        }
        if prefix.len() >= self.config.max_summary_len {
            return Err(Error::invalid(format!(
                "decoder prefix of {} tokens reaches max_summary_len {}",
                prefix.len(),
                self.config.max_summary_len
            )));
        }
        self.check_ids(prefix, "summary")
    }

    /// Decoder hidden states for every prefix position.
    fn decode_graph(&self, g: &mut Graph, b: &mut Bound, prefix: &[TokenId], memory: Memory<'_>) -> Result<Var> {
        let m = prefix.len();
        let causal: Vec<bool> = (0..m * m).map(|idx| idx % m <= idx / m).collect();
        let mut y = self.embed(g, b, prefix)?;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(g, b, y, layer.self_norm)?;
            let q = self.linear(g, b, h, layer.self_attn.q)?;
            let k = self.linear(g, b, h, layer.self_attn.k)?;
            let v = self.linear(g, b, h, layer.self_attn.v)?;
            let a = multi_head_attention(g, q, k, v, self.config.heads, Some(&causal))?;
            let o = self.linear(g, b, a, layer.self_attn.out)?;
            y = g.add(y, o)?;

            let h = self.norm(g, b, y, layer.cross_norm)?;
            let q = self.linear(g, b, h, layer.cross_attn.q)?;
            let (k, v) = match memory {
                Memory::States(hv) => (
                    self.linear(g, b, hv, layer.cross_attn.k)?,
                    self.linear(g, b, hv, layer.cross_attn.v)?,
                ),
                Memory::Cached(doc) => (g.constant(doc.cross[l].0.clone()), g.constant(doc.cross[l].1.clone())),
            };
            let a = multi_head_attention(g, q, k, v, self.config.heads, None)?;
            let o = self.linear(g, b, a, layer.cross_attn.out)?;
            y = g.add(y, o)?;

            if let Some(f) = layer.ffn {
                y = self.feed_forward(g, b, y, f)?;
            }
        }
        match self.layout.decoder_norm {
            Some(n) => self.norm(g, b, y, n),
            None => Ok(y),
        }
    }

    /// Logits `h_t · W_h + b` for every prefix position (`m × vocab`).
    pub fn logits_graph(&self, g: &mut Graph, b: &mut Bound, prefix: &[TokenId], states: Var) -> Result<Var> {
        self.check_prefix(prefix)?;
        let h = self.decode_graph(g, b, prefix, Memory::States(states))?;
        self.linear(g, b, h, self.layout.head)
    }

    /// Sum of `−log P(target_t | prefix_≤t, X)` over one (document, summary)
    /// pair under teacher forcing, plus the number of scored tokens.
    pub fn sequence_nll(&self, g: &mut Graph, b: &mut Bound, document: &[TokenId], decoder_input: &[TokenId], targets: &[TokenId]) -> Result<(Var, usize)> {
        if decoder_input.len() != targets.len() {
            return Err(Error::invalid("decoder input and targets differ in length"));
        }
        self.check_ids(targets, "target")?;
        let h = self.encode_graph(g, b, document)?;
        let logits = self.logits_graph(g, b, decoder_input, h)?;
        let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        let mask = vec![true; t.len()];
        Ok((g.cross_entropy_sum(logits, &t, &mask)?, t.len()))
    }

    /// Teacher-forced `Σ −log P(target_t | …)` evaluated in `f64` from the
    /// logits, without building gradients.
    pub fn sequence_nll_value(&self, document: &[TokenId], decoder_input: &[TokenId], targets: &[TokenId]) -> Result<f64> {
        if decoder_input.len() != targets.len() {
            return Err(Error::invalid("decoder input and targets differ in length"));
        }
        self.check_ids(targets, "target")?;
        let mut g = Graph::new();
        let mut b = self.bind();
        let h = self.encode_graph(&mut g, &mut b, document)?;
        let logits = self.logits_graph(&mut g, &mut b, decoder_input, h)?;
        let l = g.value(logits);
        Ok(targets
            .iter()
            .enumerate()
            .map(|(t, &y)| crate::graph::neg_log_softmax(l.row(t), y as usize))
            .sum())
    }

    /// Step distributions for every prefix position (`m × vocab`).
    pub fn step_distributions(&self, prefix: &[TokenId], doc: &EncodedDocument) -> Result<Tensor> {
        self.step_distributions_traced(prefix, doc).map(|(t, _)| t)
    }

    /// [`Model::step_distributions`] plus the largest buffer the decoder
    /// pass computed, in elements.
    pub fn step_distributions_traced(&self, prefix: &[TokenId], doc: &EncodedDocument) -> Result<(Tensor, usize)> {
        self.check_prefix(prefix)?;
        let mut g = Graph::new();
        let mut b = self.bind();
        let h = self.decode_graph(&mut g, &mut b, prefix, Memory::Cached(doc))?;
        let logits = self.linear(&mut g, &mut b, h, self.layout.head)?;
        let dist = tensor::softmax_rows(g.value(logits), None)?;
        let peak = g.peak_numel().max(dist.numel());
        Ok((dist, peak))
    }

    /// `P(y_t | y_<t, X)` for the token following `prefix`.
    pub fn decode_step(&self, prefix: &[TokenId], doc: &EncodedDocument) -> Result<Vec<f32>> {
        let dist = self.step_distributions(prefix, doc)?;
        Ok(dist.row(prefix.len() - 1).to_vec())
    }
}

#[derive(Clone, Copy)]
enum Memory<'a> {
    States(Var),
    Cached(&'a EncodedDocument),
}

/// Encoder output plus per-layer cross-attention keys/values.
#[derive(Clone, Debug)]
pub struct EncodedDocument {
    pub states: Tensor,
    cross: Vec<(Tensor, Tensor)>,
    /// Largest buffer allocated while encoding, in elements.
    pub peak_numel: usize,
}

pub fn count_params(model: &Model) -> usize {
    model.params.iter().map(|p| p.tensor.numel()).sum()
}

/// Lazily records model parameters on a graph the first time they are used.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Option<Var>>,
}

impl Bound<'_> {
    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let p = &self.model.params[id];
        let v = if p.trainable {
            g.param(p.tensor.clone())
        } else {
            g.constant(p.tensor.clone())
        };
        self.vars[id] = Some(v);
        v
    }

    /// Gradients per parameter after `g.backward`; `None` for parameters
    /// that were not used or are frozen.
    pub fn take_grads(&self, g: &mut Graph) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| if g.requires_grad(v) { g.take_grad(v) } else { None }))
            .collect()
    }
}

/// Dense multi-head scaled dot-product attention composed from primitive
/// graph ops. `q` is `m × d`, `k`/`v` are `n × d`, `mask` is `m × n`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(format!("heads ({heads}) must divide d_model ({d})")));
    }
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d_k, d_k)?;
        let kh = g.slice_cols(k, h * d_k, d_k)?;
        let vh = g.slice_cols(v, h * d_k, d_k)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax_rows(s, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}
