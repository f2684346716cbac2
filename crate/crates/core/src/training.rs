//! Teacher-forced training: cross-entropy objective, per-tensor gradient
//! clipping and Adam updates, with resumable checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, put_tensor, Reader};
use crate::error::{Error, Result};
use crate::graph::{neg_log_softmax, Graph};
use crate::model::Model;
use crate::tensor::{gradient_error, l2_norm, Tensor};
use crate::text::{make_batches, Batch, CorpusPair, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Gradient norm cap `C`.
    pub clip_cap: f32,
    /// Clip by the norm of all gradients together instead of per tensor.
    pub global_clip: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            max_steps: 2000,
            clip_cap: 1.0,
            global_clip: false,
            seed: 7,
            checkpoint_every: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.clip_cap > 0.0 && self.clip_cap.is_finite()) {
            return bad("clip_cap", "must be a positive number");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        Ok(())
    }
}

/// Cross-entropy over the unmasked steps of one summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    /// `sum / count`; what training minimizes.
    pub mean: f64,
    /// `−Σ_t log P(y_t | y_<t, X)`.
    pub sum: f64,
    pub count: usize,
}

impl CrossEntropy {
    fn from_terms(terms: impl Iterator<Item = f64>) -> Result<Self> {
        let (sum, count) = terms.fold((0.0, 0), |(s, c), x| (s + x, c + 1));
        if count == 0 {
            return Err(Error::invalid("cross entropy over zero unmasked steps"));
        }
        Ok(Self {
            mean: sum / count as f64,
            sum,
            count,
        })
    }
}

fn check_targets(rows: usize, vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<()> {
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![rows, vocab],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("target id {t} >= vocab {vocab}")));
    }
    Ok(())
}

/// Cross-entropy from per-step probability rows (`m × vocab`).
pub fn cross_entropy_loss(distributions: &Tensor, targets: &[TokenId], mask: &[bool]) -> Result<CrossEntropy> {
    let (m, vocab) = distributions.expect_2d("cross_entropy")?;
    check_targets(m, vocab, targets, mask)?;
    CrossEntropy::from_terms(
        (0..m)
            .filter(|&t| mask[t])
            .map(|t| -(distributions.at(t, targets[t] as usize) as f64).ln()),
    )
}

/// Cross-entropy from raw logits via log-sum-exp; never underflows.
pub fn cross_entropy_from_logits(logits: &Tensor, targets: &[TokenId], mask: &[bool]) -> Result<CrossEntropy> {
    let (m, vocab) = logits.expect_2d("cross_entropy")?;
    check_targets(m, vocab, targets, mask)?;
    CrossEntropy::from_terms(
        (0..m)
            .filter(|&t| mask[t])
            .map(|t| neg_log_softmax(logits.row(t), targets[t] as usize)),
    )
}

/// Rescales `g` in place to norm `cap` when its L2 norm exceeds `cap`.
/// Returns the norm before clipping.
pub fn clip_in_place(g: &mut [f32], cap: f32) -> f64 {
    let norm = l2_norm(g);
    if norm > cap as f64 {
        let s = cap as f64 / norm;
        g.iter_mut().for_each(|x| *x = (*x as f64 * s) as f32);
    }
    norm
}

/// `g` if `‖g‖ ≤ cap`, else `(cap / ‖g‖)·g`.
pub fn clip_gradient(g: &Tensor, cap: f32) -> Tensor {
    let mut out = g.clone();
    clip_in_place(out.data_mut(), cap);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// First and second moment estimates, one per parameter tensor.
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    /// Exponential moving average of the step loss.
    pub running_loss: f32,
    pub seed: u64,
}

const STATE_MAGIC: &[u8; 8] = b"LSUMSTAT";

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            running_loss: 0.0,
            seed,
        }
    }

    pub fn save(&self, model: &Model, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.running_loss.to_le_bytes());
        buf.extend_from_slice(&(self.first_moment.len() as u32).to_le_bytes());
        for (moments, p) in [&self.first_moment, &self.second_moment]
            .into_iter()
            .flat_map(|ms| ms.iter().zip(model.params()))
        {
            put_tensor(&mut buf, &Tensor::new(p.tensor.shape().to_vec(), moments.clone())?)?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let parse = || -> std::result::Result<Self, String> {
            let mut r = Reader::new(&bytes);
            if r.take(8)? != STATE_MAGIC {
                return Err("not a training state file".into());
            }
            if r.u32()? != 1 {
                return Err("unsupported training state version".into());
            }
            let step = r.u64()?;
            let seed = r.u64()?;
            let running_loss = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let count = r.u32()?;
            let read = |r: &mut Reader| -> std::result::Result<Vec<Vec<f32>>, String> {
                (0..count).map(|_| r.tensor().map(Tensor::into_data)).collect()
            };
            let first_moment = read(&mut r)?;
            let second_moment = read(&mut r)?;
            if !r.finished() {
                return Err("trailing bytes".into());
            }
            Ok(Self {
                step,
                first_moment,
                second_moment,
                running_loss,
                seed,
            })
        };
        parse().map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean cross-entropy over the batch's target tokens, before the update.
    pub loss: f32,
    pub loss_sum: f64,
    pub tokens: usize,
    /// Per-tensor gradient norms after clipping (`None` for frozen tensors).
    pub clipped_norms: Vec<Option<f64>>,
}

/// Gradients of the batch-mean loss; one entry per parameter tensor.
pub fn batch_gradients(batch: &Batch, model: &Model) -> Result<(f64, usize, Vec<Option<Vec<f32>>>)> {
    let total: usize = (0..batch.targets.rows).map(|r| batch.targets.len_of(r)).sum();
    if total == 0 {
        return Err(Error::invalid("batch has no target tokens"));
    }
    let per_example: Vec<Result<(f64, Vec<Option<Vec<f32>>>)>> = (0..batch.pairs.len())
        .into_par_iter()
        .map(|r| {
            let mut g = Graph::new();
            let mut b = model.bind();
            let (nll, _) = model.sequence_nll(
                &mut g,
                &mut b,
                batch.documents.row(r),
                batch.decoder_inputs.row(r),
                batch.targets.row(r),
            )?;
            let sum = g.value(nll).item() as f64;
            let scaled = g.scale(nll, 1.0 / total as f32)?;
            g.backward(scaled)?;
            Ok((sum, b.take_grads(&mut g)))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.params().len()];
    for item in per_example {
        let (sum, example) = item?;
        loss_sum += sum;
        for (acc, g) in grads.iter_mut().zip(example) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                None => *acc = Some(g),
            }
        }
    }
    Ok((loss_sum, total, grads))
}

/// One forward/backward pass, per-tensor clip, and Adam update.
pub fn train_step(batch: &Batch, model: &mut Model, state: &mut TrainState, config: &TrainConfig) -> Result<StepReport> {
    if batch.pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config {
            key: "learning_rate".into(),
            message: "must be finite and non-negative".into(),
        });
    }
    let (loss_sum, tokens, mut grads) = batch_gradients(batch, model)?;
    let loss = (loss_sum / tokens as f64) as f32;
    let non_finite_grad = grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite()));
    if !loss.is_finite() || non_finite_grad {
        return Err(Error::NonFinite {
            step: state.step,
            batch: batch.pairs.clone(),
            loss,
        });
    }

    let cap = config.clip_cap;
    let clipped_norms: Vec<Option<f64>> = if config.global_clip {
        let total = grads.iter().flatten().map(|g| l2_norm(g).powi(2)).sum::<f64>().sqrt();
        if total > cap as f64 {
            let s = cap as f64 / total;
            grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x = (*x as f64 * s) as f32));
        }
        grads.iter().map(|g| g.as_ref().map(|g| l2_norm(g))).collect()
    } else {
        grads
            .iter_mut()
            .map(|g| {
                g.as_mut().map(|g| {
                    clip_in_place(g, cap);
                    l2_norm(g)
                })
            })
            .collect()
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1 as f64, config.beta2 as f64);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate as f64;
    let eps = config.epsilon as f64;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let p = model.params_mut()[i].tensor.data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / correction1) / ((vj / correction2).sqrt() + eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    state.running_loss = if state.step == 1 {
        loss
    } else {
        0.98 * state.running_loss + 0.02 * loss
    };
    Ok(StepReport {
        loss,
        loss_sum,
        tokens,
        clipped_norms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f32,
    pub numeric: f32,
    /// [`gradient_error`] of the two.
    pub error: f32,
}

/// Compares backpropagated gradients of the summed sequence loss of one pair
/// with central differences at `samples` randomly chosen trainable entries.
/// Embedding entries are drawn from rows of tokens that occur in the pair.
pub fn gradient_check(model: &Model, pair: &CorpusPair, samples: usize, eps: f32, seed: u64) -> Result<Vec<GradientSample>> {
    let batch = crate::text::batch_of(std::slice::from_ref(pair), &[0]);
    let (doc, input, targets) = (batch.documents.row(0), batch.decoder_inputs.row(0), batch.targets.row(0));
    let mut g = Graph::new();
    let mut b = model.bind();
    let (nll, _) = model.sequence_nll(&mut g, &mut b, doc, input, targets)?;
    g.backward(nll)?;
    let grads = b.take_grads(&mut g);

    let trainable: Vec<usize> = (0..model.params().len()).filter(|&i| model.params()[i].trainable).collect();
    let mut used: Vec<usize> = doc.iter().chain(input).chain(targets).map(|&t| t as usize).collect();
    used.sort_unstable();
    used.dedup();
    let d = model.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let param = trainable[rng.gen_range(0..trainable.len())];
        let index = if param == model.embedding_id() {
            used[rng.gen_range(0..used.len())] * d + rng.gen_range(0..d)
        } else {
            rng.gen_range(0..model.params()[param].tensor.numel())
        };
        let x = model.params()[param].tensor.data()[index];
        let (hi, lo) = (x + eps, x - eps);
        probe.params_mut()[param].tensor.data_mut()[index] = hi;
        let f_hi = probe.sequence_nll_value(doc, input, targets)?;
        probe.params_mut()[param].tensor.data_mut()[index] = lo;
        let f_lo = probe.sequence_nll_value(doc, input, targets)?;
        probe.params_mut()[param].tensor.data_mut()[index] = x;
        let numeric = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
        let analytic = grads[param].as_ref().map_or(0.0, |g| g[index]);
        out.push(GradientSample {
            param,
            index,
            analytic,
            numeric,
            error: gradient_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// Seed for the shuffle of epoch `epoch`.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic step → batch schedule: epoch `e` is a fresh seeded shuffle.
pub struct BatchSchedule<'a> {
    pairs: &'a [CorpusPair],
    batch_size: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<Batch>)>,
}

impl<'a> BatchSchedule<'a> {
    pub fn new(pairs: &'a [CorpusPair], batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(Self {
            pairs,
            batch_size,
            seed,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.pairs.len().div_ceil(self.batch_size) as u64
    }

    /// The batch consumed by 0-based step `step`.
    pub fn batch(&mut self, step: u64) -> Result<&Batch> {
        let per = self.batches_per_epoch();
        let epoch = step / per;
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = make_batches(self.pairs, self.batch_size, epoch_seed(self.seed, epoch))?;
            self.cached_epoch = Some((epoch, batches));
        }
        Ok(&self.cached_epoch.as_ref().unwrap().1[(step % per) as usize])
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<(u64, f32)>,
    pub state: TrainState,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_HISTORY: &str = "loss.csv";

pub fn step_checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

pub fn step_state_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.state"))
}

pub fn write_history(path: &Path, history: &[(u64, f32)]) -> Result<()> {
    let mut body = String::from("step,loss\n");
    for (step, loss) in history {
        writeln!(body, "{step},{loss}").unwrap();
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<(u64, f32)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Corpus {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("step,loss") {
        return Err(bad(1, "expected header `step,loss`".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (s, v) = l.split_once(',').ok_or_else(|| bad(i + 2, "expected `step,loss`".into()))?;
            Ok((
                s.parse().map_err(|e| bad(i + 2, format!("{e}")))?,
                v.parse().map_err(|e| bad(i + 2, format!("{e}")))?,
            ))
        })
        .collect()
}

/// Runs the training loop from `state` up to `config.max_steps`, writing
/// periodic checkpoints, the final checkpoint and the loss history to `out_dir`.
pub fn run(
    pairs: &[CorpusPair],
    model: &mut Model,
    mut state: TrainState,
    mut history: Vec<(u64, f32)>,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut schedule = BatchSchedule::new(pairs, config.batch_size, state.seed)?;
    while state.step < config.max_steps {
        let batch = schedule.batch(state.step)?.clone();
        let report = train_step(&batch, model, &mut state, config)?;
        history.push((state.step, report.loss));
        if state.step.is_multiple_of(50) || state.step == 1 {
            log::info!("step {} loss {:.4} (avg {:.4})", state.step, report.loss, state.running_loss);
        }
        if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
            checkpoint::save(model, &step_checkpoint_path(out_dir, state.step))?;
            state.save(model, &step_state_path(out_dir, state.step))?;
            write_history(&out_dir.join(LOSS_HISTORY), &history)?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(model, &final_path)?;
    write_history(&out_dir.join(LOSS_HISTORY), &history)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        history,
        state,
    })
}

/// Trains a fresh model.
pub fn train(pairs: &[CorpusPair], model: &mut Model, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let state = TrainState::new(model, config.seed);
    run(pairs, model, state, Vec::new(), config, out_dir)
}

/// Continues a run from the periodic checkpoint written at `step`.
pub fn resume(pairs: &[CorpusPair], config: &TrainConfig, out_dir: &Path, step: u64) -> Result<(Model, TrainOutcome)> {
    let mut model = checkpoint::load(&step_checkpoint_path(out_dir, step))?;
    let state = TrainState::load(&step_state_path(out_dir, step))?;
    if state.step != step {
        return Err(Error::Checkpoint {
            path: step_state_path(out_dir, step),
            message: format!("state records step {} not {step}", state.step),
        });
    }
    let mut history = read_history(&out_dir.join(LOSS_HISTORY)).unwrap_or_default();
    history.retain(|(s, _)| *s <= step);
    let outcome = run(pairs, &mut model, state, history, config, out_dir)?;
    Ok((model, outcome))
}
