//! Beam search with length penalty and repeated n-gram blocking.

use std::cmp::Ordering;

use crate::corpus::CleanThread;
use crate::error::{Error, Result};
use crate::model::{attention_weights, AttentionWeights, DecoderMemory, ModelConfig, ModelParams};
use crate::tokenizer::{TokenId, Vocab, BOS, EOS};
use crate::training::TaskVariant;

/// Anything that can score the next token given a prefix starting with BOS.
pub trait StepModel {
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

impl StepModel for DecoderMemory<'_> {
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        DecoderMemory::log_probs(self, prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// 0 disables blocking.
    pub block_ngram: usize,
    pub max_out_len: usize,
    pub length_penalty_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            block_ngram: 3,
            max_out_len: 128,
            length_penalty_alpha: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("beam_size must be >= 1"));
        }
        if self.block_ngram == 1 {
            return Err(Error::invalid("block_ngram must be 0 or >= 2"));
        }
        if self.max_out_len == 0 {
            return Err(Error::invalid("max_out_len must be >= 1"));
        }
        if self.length_penalty_alpha.is_nan() || self.length_penalty_alpha < 0.0 {
            return Err(Error::invalid("length_penalty_alpha must be >= 0"));
        }
        Ok(())
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS.
    pub ids: Vec<TokenId>,
    /// Sum of per-step log probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, counting EOS but not BOS.
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.len(), alpha)
    }

    /// Generated ids without BOS and the trailing EOS.
    pub fn output(&self) -> &[TokenId] {
        let end = if self.ids.last() == Some(&EOS) && self.ids.len() > 1 {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[1..end]
    }
}

/// Tokens that would complete a `k`-gram already present in `ids`.
pub fn blocked_tokens(ids: &[TokenId], k: usize) -> Vec<TokenId> {
    if k == 0 || ids.len() < k {
        return Vec::new();
    }
    let tail = &ids[ids.len() - (k - 1)..];
    let mut out: Vec<TokenId> = (0..=ids.len() - k)
        .filter(|&j| &ids[j..j + k - 1] == tail)
        .map(|j| ids[j + k - 1])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn step_scores(model: &dyn StepModel, ids: &[TokenId], block: usize) -> Result<Vec<f64>> {
    let mut lp = model.log_probs(ids)?;
    for t in blocked_tokens(ids, block) {
        if let Some(v) = lp.get_mut(t as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(lp)
}

fn by_score(alpha: f64) -> impl Fn(&Hypothesis, &Hypothesis) -> Ordering {
    move |a, b| {
        b.score(alpha)
            .total_cmp(&a.score(alpha))
            .then_with(|| a.ids.cmp(&b.ids))
    }
}

/// Returns finished hypotheses, best first. Candidates at each step are
/// ranked by log probability (ties: parent order, then token id); the best
/// `beam_size` survive, and those ending in EOS move to the finished pool.
/// A hypothesis still live at `max_out_len` is finished without EOS.
pub fn beam_search(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let alpha = cfg.length_penalty_alpha;
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_out_len {
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let lp = step_scores(model, &hyp.ids, cfg.block_ngram)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    candidates.push((hyp.log_prob + l, parent, tok as TokenId));
                }
            }
        }
        if candidates.is_empty() {
            // every continuation is blocked
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(candidates.len());
        for (log_prob, parent, tok) in candidates {
            let mut ids = live[parent].ids.clone();
            ids.push(tok);
            let finished = tok == EOS;
            let hyp = Hypothesis {
                ids,
                log_prob,
                finished,
            };
            if finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if pool.len() >= cfg.beam_size {
            pool.sort_by(by_score(alpha));
            let worst = pool[cfg.beam_size - 1].score(alpha);
            // log probs only fall, so the best a live hypothesis can reach
            // is its current sum under the largest penalty
            let best_possible = live
                .iter()
                .map(|h| h.log_prob / length_penalty(cfg.max_out_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_possible <= worst {
                live.clear();
                break;
            }
        }
    }
    pool.extend(live.into_iter().map(|h| Hypothesis { finished: true, ..h }));
    pool.sort_by(by_score(alpha));
    pool.truncate(cfg.beam_size.max(1));
    Ok(pool)
}

/// Takes the most probable unblocked token at every step.
pub fn greedy(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut hyp = Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while hyp.len() < cfg.max_out_len {
        let lp = step_scores(model, &hyp.ids, cfg.block_ngram)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            if l > f64::NEG_INFINITY && best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let Some((tok, l)) = best else { break };
        hyp.ids.push(tok as TokenId);
        hyp.log_prob += l;
        if tok as TokenId == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Summary {
    pub title_part: String,
    pub comment_parts: Vec<String>,
    pub raw: String,
}

impl Summary {
    /// The comment parts as one text.
    pub fn comment_text(&self) -> String {
        self.comment_parts.join(" ")
    }
}

/// A trained model ready to summarize threads.
pub struct Summarizer<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocab,
    pub variant: TaskVariant,
}

impl Summarizer<'_> {
    /// Encodes the thread (all-ones weights unless `provide_likes`), runs
    /// beam search and splits the best hypothesis at separators.
    pub fn summarize(&self, thread: &CleanThread, cfg: &DecodeConfig, provide_likes: bool) -> Result<Summary> {
        let texts = thread.texts();
        let seq = self.vocab.encode(&texts, self.config.max_len)?;
        let weights = if provide_likes {
            attention_weights(thread)?
        } else {
            AttentionWeights::uniform(seq.n_texts)
        };
        let encoded = self
            .params
            .encode_thread(self.config, &seq, &weights, !self.variant.attention_encoding)?;
        let memory = DecoderMemory::new(self.params, self.config, &encoded.enc_att)?;
        let mut cfg = *cfg;
        cfg.max_out_len = cfg.max_out_len.min(self.config.max_len - 1);
        let best = beam_search(&memory, &cfg)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::invalid("beam search returned nothing"))?;
        split_output(self.vocab, self.variant, best.output())
    }
}

/// Splits generated ids at separators. The first part is the title when
/// the variant predicts one.
pub fn split_output(vocab: &Vocab, variant: TaskVariant, ids: &[TokenId]) -> Result<Summary> {
    let raw = vocab.decode(ids)?;
    let mut parts = vocab.decode_segments(ids)?;
    let title_part = if variant.include_title {
        parts.remove(0)
    } else {
        String::new()
    };
    Ok(Summary {
        title_part,
        comment_parts: parts.into_iter().filter(|p| !p.is_empty()).collect(),
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bigram table over a 5-token vocabulary.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            let row = &self.0[*prefix.last().unwrap() as usize];
            let total: f64 = row.iter().sum();
            Ok(row.iter().map(|p| (p / total).ln()).collect())
        }
    }

    fn table() -> Table {
        Table(vec![
            vec![1.0, 1.0, 1.0, 1.0, 1.0],
            vec![0.01, 0.01, 0.1, 0.5, 0.38],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
            vec![0.05, 0.05, 0.45, 0.05, 0.4],
            vec![0.05, 0.05, 0.1, 0.6, 0.2],
        ])
    }

    #[test]
    fn blocked_tokens_complete_repeats() {
        assert_eq!(blocked_tokens(&[1, 5, 6, 1, 5], 3), vec![6]);
        assert_eq!(blocked_tokens(&[1, 5, 6, 5], 2), vec![6]);
        assert_eq!(blocked_tokens(&[1, 5, 6, 7], 3), Vec::<TokenId>::new());
        assert_eq!(blocked_tokens(&[5, 5, 5], 2), vec![5]);
        assert_eq!(blocked_tokens(&[5, 6], 0), Vec::<TokenId>::new());
    }

    #[test]
    fn beam_one_is_greedy() {
        let cfg = DecodeConfig {
            beam_size: 1,
            max_out_len: 6,
            ..Default::default()
        };
        let g = greedy(&table(), &cfg).unwrap();
        let b = beam_search(&table(), &cfg).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].ids, g.ids);
        assert_eq!(b[0].log_prob, g.log_prob);
    }

    #[test]
    fn truncated_hypotheses_are_finished() {
        let cfg = DecodeConfig {
            beam_size: 2,
            max_out_len: 2,
            block_ngram: 0,
            ..Default::default()
        };
        let out = beam_search(&table(), &cfg).unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(|h| h.finished && h.len() <= 2));
        assert!(out.windows(2).all(|w| w[0].score(0.6) >= w[1].score(0.6)));
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(length_penalty(40, 0.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        for bad in [
            DecodeConfig {
                beam_size: 0,
                ..Default::default()
            },
            DecodeConfig {
                block_ngram: 1,
                ..Default::default()
            },
            DecodeConfig {
                max_out_len: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn output_strips_markers() {
        let h = Hypothesis {
            ids: vec![BOS, 7, 8, EOS],
            log_prob: -1.0,
            finished: true,
        };
        assert_eq!(h.output(), &[7, 8]);
        assert_eq!(h.len(), 3);
    }
}
