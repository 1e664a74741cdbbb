//! Target sampling, the optimization loop and training checkpoints.
//!
//! Every random choice during training is drawn from a generator seeded by
//! `(seed, step, slot)`, and the data order of each epoch from
//! `(seed, epoch)`. A checkpoint therefore only needs the step counter to
//! resume bit-identically.

mod optim;
mod state;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CleanThread;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_fold, EvalOptions};
use crate::model::{attention_weights, AttentionWeights, LossSum};
use crate::tokenizer::{TokenId, TokenSeq, Vocab, BOS, EOS, SEP};

pub use optim::{clip_grad_norm, Adam, OptimizerConfig};
pub use state::TrainState;

/// One row of the variant table: attention encoding on or off, title
/// prediction on or off, one or three target comments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskVariant {
    pub id: u8,
    pub attention_encoding: bool,
    pub include_title: bool,
    pub n_comments: usize,
}

const fn variant(id: u8, attention_encoding: bool, include_title: bool, n_comments: usize) -> TaskVariant {
    TaskVariant {
        id,
        attention_encoding,
        include_title,
        n_comments,
    }
}

impl TaskVariant {
    pub const ALL: [TaskVariant; 8] = [
        variant(1, false, true, 1),
        variant(2, false, false, 1),
        variant(3, true, true, 1),
        variant(4, true, false, 1),
        variant(5, false, true, 3),
        variant(6, false, false, 3),
        variant(7, true, true, 3),
        variant(8, true, false, 3),
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::invalid(format!("variant must be 1..8, got {id}")))
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub thread_id: String,
    pub input_seq: TokenSeq,
    /// The thread's like-derived weights, used for encoding when the
    /// variant enables attention.
    pub weights: AttentionWeights,
    pub target: Vec<TokenId>,
    /// 1-based, ascending.
    pub sampled_comment_indices: Vec<usize>,
}

/// Picks `k` distinct comments (1-based, returned in thread order).
///
/// Draws are sequential and proportional to the remaining weights. When
/// fewer than `k` comments have positive weight, all of those are taken
/// and the rest are drawn uniformly from the zero-weight comments.
pub fn sample_comments<R: Rng + ?Sized>(comment_weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let positive: Vec<usize> = (0..comment_weights.len())
        .filter(|&i| comment_weights[i] > 0.0)
        .collect();
    let mut chosen = Vec::with_capacity(k);
    if positive.len() <= k {
        chosen.extend(&positive);
        let mut zeros: Vec<usize> = (0..comment_weights.len())
            .filter(|&i| comment_weights[i] <= 0.0)
            .collect();
        let need = (k - positive.len()).min(zeros.len());
        let (picked, _) = zeros.partial_shuffle(rng, need);
        chosen.extend(picked.iter());
    } else {
        let mut remaining = positive;
        for _ in 0..k {
            let total: f64 = remaining.iter().map(|&i| comment_weights[i]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = remaining.len() - 1;
            for (slot, &i) in remaining.iter().enumerate() {
                if u < comment_weights[i] {
                    pick = slot;
                    break;
                }
                u -= comment_weights[i];
            }
            chosen.push(remaining.remove(pick));
        }
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| i + 1).collect()
}

/// `[BOS] title? (SEP part)* [EOS]`, with the parts between BOS and EOS cut
/// to fit `max_len`.
pub fn build_target(title: Option<&[TokenId]>, comments: &[&[TokenId]], max_len: usize) -> Vec<TokenId> {
    let mut body: Vec<TokenId> = Vec::new();
    let mut first = true;
    for part in title.into_iter().chain(comments.iter().copied()) {
        if !first {
            body.push(SEP);
        }
        body.extend_from_slice(part);
        first = false;
    }
    body.truncate(max_len.saturating_sub(2));
    let mut target = Vec::with_capacity(body.len() + 2);
    target.push(BOS);
    target.extend(body);
    target.push(EOS);
    target
}

/// A thread tokenized once for repeated target sampling.
#[derive(Debug, Clone)]
pub struct PreparedThread {
    pub id: String,
    pub input: TokenSeq,
    pub weights: AttentionWeights,
    pub title_ids: Vec<TokenId>,
    pub comment_ids: Vec<Vec<TokenId>>,
    max_len: usize,
}

impl PreparedThread {
    pub fn new(thread: &CleanThread, vocab: &Vocab, max_len: usize) -> Result<Self> {
        if thread.comments.is_empty() {
            return Err(Error::invalid(format!("thread {} has no comments", thread.id)));
        }
        Ok(PreparedThread {
            id: thread.id.clone(),
            input: vocab.encode(&thread.texts(), max_len)?,
            weights: attention_weights(thread)?,
            title_ids: vocab.encode_text(&thread.title),
            comment_ids: thread.comments.iter().map(|c| vocab.encode_text(&c.text)).collect(),
            max_len,
        })
    }

    /// Samples comments by the like weights (whatever the variant's
    /// encoding setting) and builds the target.
    pub fn sample<R: Rng + ?Sized>(&self, variant: TaskVariant, rng: &mut R) -> TrainingExample {
        let indices = sample_comments(&self.weights.as_slice()[1..], variant.n_comments, rng);
        let comments: Vec<&[TokenId]> = indices.iter().map(|&i| self.comment_ids[i - 1].as_slice()).collect();
        let title = variant.include_title.then_some(self.title_ids.as_slice());
        TrainingExample {
            thread_id: self.id.clone(),
            input_seq: self.input.clone(),
            weights: self.weights.clone(),
            target: build_target(title, &comments, self.max_len),
            sampled_comment_indices: indices,
        }
    }
}

/// Samples one training example from `thread`. `weights` drive the
/// comment draw.
pub fn sample_target<R: Rng + ?Sized>(
    thread: &CleanThread,
    weights: &AttentionWeights,
    variant: TaskVariant,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    let mut prepared = PreparedThread::new(thread, vocab, max_len)?;
    if weights.len() != thread.comments.len() + 1 {
        return Err(Error::invalid(format!(
            "{} weights for {} comments",
            weights.len(),
            thread.comments.len()
        )));
    }
    prepared.weights = weights.clone();
    Ok(prepared.sample(variant, rng))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STREAM_ORDER: u64 = 1;
const STREAM_SLOT: u64 = 2;

/// Generator for batch slot `slot` of optimizer step `step`.
pub fn slot_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_SLOT, step, slot as u64]))
}

/// Thread indices for each batch slot of `step` (1-based). Data is visited
/// in a fresh permutation per epoch.
pub fn batch_indices(seed: u64, step: u64, n_threads: usize, batch_size: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    let first = (step - 1) * batch_size as u64;
    (0..batch_size as u64)
        .map(|j| {
            let pos = first + j;
            let epoch = pos / n_threads as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n_threads).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
                    seed,
                    STREAM_ORDER,
                    epoch,
                ])));
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[(pos % n_threads as u64) as usize]
        })
        .collect()
}

/// One line of the metrics log, written at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean step loss since the previous checkpoint.
    pub train_loss: f64,
    pub val_xent: Option<f64>,
    pub val_recall_w: Option<f64>,
    /// File name inside the output directory.
    pub checkpoint_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub max_steps: u64,
    pub eval_every: u64,
    /// Checkpoints, `best.ckpt` and `metrics.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    pub decode: DecodeConfig,
    pub eval: EvalOptions,
    /// Caps the validation threads decoded at each checkpoint.
    pub val_limit: Option<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            max_steps: 0,
            eval_every: 2000,
            out_dir: None,
            decode: DecodeConfig::default(),
            eval: EvalOptions::default(),
            val_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Loss of every step run in this call, in order.
    pub step_losses: Vec<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Runs optimizer steps until `state.step` reaches `plan.max_steps`.
pub fn train(
    state: &mut TrainState,
    corpus: &[CleanThread],
    validation: &[CleanThread],
    vocab: &Vocab,
    plan: &TrainPlan,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if plan.eval_every == 0 {
        return Err(Error::invalid("eval_every must be >= 1"));
    }
    state.check_vocab(vocab)?;
    let prepared: Vec<PreparedThread> = corpus
        .iter()
        .map(|t| PreparedThread::new(t, vocab, state.config.max_len))
        .collect::<Result<_>>()?;
    let validation = &validation[..plan.val_limit.unwrap_or(validation.len()).min(validation.len())];
    if let Some(dir) = &plan.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut report = TrainReport::default();
    let mut last_good = plan
        .out_dir
        .as_ref()
        .map(|d| d.join("best.ckpt"))
        .filter(|p| p.exists());
    let mut since_checkpoint = Vec::new();
    while state.step < plan.max_steps {
        let step = state.step + 1;
        let loss = match train_step(state, &prepared, step) {
            Ok(loss) => loss,
            Err(Error::NonFinite(what)) => {
                log::error!("step {step}: non-finite {what}");
                return Err(Error::Diverged { step, last_good });
            }
            Err(e) => return Err(e),
        };
        state.step = step;
        report.step_losses.push(loss);
        since_checkpoint.push(loss);
        if step.is_multiple_of(plan.eval_every) || step == plan.max_steps {
            let record = checkpoint(state, validation, vocab, plan, &since_checkpoint, &mut report)?;
            if let (Some(dir), Some(name)) = (&plan.out_dir, &record.checkpoint_path) {
                last_good = Some(dir.join(name));
            }
            log::info!(
                "step {step}: train_loss {:.4} val_xent {:?}",
                record.train_loss,
                record.val_xent
            );
            report.metrics.push(record);
            since_checkpoint.clear();
        }
    }
    Ok(report)
}

fn train_step(state: &mut TrainState, prepared: &[PreparedThread], step: u64) -> Result<f64> {
    let batch = batch_indices(state.seed, step, prepared.len(), state.opt.batch_size);
    let cfg = &state.config;
    let params = &state.params;
    let variant = state.variant;
    let seed = state.seed;
    let results: Vec<Result<LossSum>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = slot_rng(seed, step, slot);
            let ex = prepared[i].sample(variant, &mut rng);
            let dropout_rng = (cfg.dropout > 0.0).then_some(&mut rng);
            params.loss_sum(
                cfg,
                &ex.input_seq,
                &ex.weights,
                &ex.target,
                !variant.attention_encoding,
                dropout_rng,
            )
        })
        .collect();
    let mut total_loss = 0.0;
    let mut tokens = 0;
    let mut grads = params.zeros_like();
    for r in results {
        let r = r?;
        total_loss += r.loss;
        tokens += r.tokens;
        grads.add_assign(&r.grads);
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    grads.scale(1.0 / tokens as f64);
    let loss = total_loss / tokens as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if state.opt.clip_norm > 0.0 {
        clip_grad_norm(&mut grads, state.opt.clip_norm);
    }
    state.adam.update(&mut state.params, &grads, &state.opt, step);
    if let Some(name) = state.params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name}")));
    }
    Ok(loss)
}

fn checkpoint(
    state: &mut TrainState,
    validation: &[CleanThread],
    vocab: &Vocab,
    plan: &TrainPlan,
    losses: &[f64],
    report: &mut TrainReport,
) -> Result<MetricsRecord> {
    let (val_xent, val_recall_w) = if validation.is_empty() {
        (None, None)
    } else {
        let ev = evaluate_fold(&state.summarizer(vocab), validation, &plan.decode, &plan.eval)?;
        (Some(ev.mean_xent).filter(|x| x.is_finite()), ev.mean_recall_w)
    };
    let improved = match (val_xent, state.best_val_xent) {
        (Some(x), Some(best)) => x < best,
        (Some(_), None) => true,
        (None, _) => state.best_val_xent.is_none(),
    };
    if improved {
        state.best_val_xent = val_xent;
        state.best_step = Some(state.step);
    }
    let mut checkpoint_path = None;
    if let Some(dir) = &plan.out_dir {
        let name = format!("step-{}.ckpt", state.step);
        let path = dir.join(&name);
        state.save(&path)?;
        if improved {
            let best = dir.join("best.ckpt");
            fs::copy(&path, &best).map_err(|e| Error::io(&best, e))?;
            report.best_checkpoint = Some(best);
        }
        checkpoint_path = Some(name);
    }
    let record = MetricsRecord {
        step: state.step,
        train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        val_xent,
        val_recall_w,
        checkpoint_path,
    };
    if let Some(dir) = &plan.out_dir {
        append_metrics(&dir.join("metrics.jsonl"), &record)?;
    }
    Ok(record)
}

fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
