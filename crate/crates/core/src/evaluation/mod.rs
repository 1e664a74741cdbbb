//! Summary scoring against the thread's likes: ROUGE, XENT(Rouge),
//! likes-weighted recall, title recall and thread characterization.

mod centroid;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CleanThread;
use crate::decoding::{DecodeConfig, Summarizer, Summary};
use crate::error::{Error, Result};

pub use centroid::{centroid_baseline, centroid_select, comment_embedding};

/// Additive smoothing applied to both distributions before normalizing.
pub const XENT_EPS: f64 = 1e-3;

/// Lowercased words with punctuation and symbols replaced by spaces.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub n: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-n with clipped n-gram counts. An empty side scores 0.
///
/// # Panics
/// When `n` is 0.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE order must be >= 1");
    let cand = rouge_tokens(candidate);
    let refr = rouge_tokens(reference);
    let cc = ngram_counts(&cand, n);
    let rc = ngram_counts(&refr, n);
    let overlap: usize = rc.iter().map(|(g, &c)| c.min(cc.get(g).copied().unwrap_or(0))).sum();
    let ratio = |total: usize| if total == 0 { 0.0 } else { overlap as f64 / total as f64 };
    let recall = ratio(rc.values().sum());
    let precision = ratio(cc.values().sum());
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    RougeScore {
        recall,
        precision,
        f1,
        n,
    }
}

/// Adds `eps` to every value and scales to sum 1.
pub fn smoothed_distribution(values: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = values.iter().map(|v| v + eps).sum();
    values.iter().map(|v| (v + eps) / total).collect()
}

/// `-sum p_i ln q_i`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(pi, qi)| pi * qi.ln())
        .sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct XentRouge {
    pub xent: f64,
    pub likes_dist: Vec<f64>,
    pub rouge_dist: Vec<f64>,
    pub per_comment_rouge: Vec<f64>,
}

/// Cross-entropy of the per-comment ROUGE recall distribution under the
/// likes distribution. Lower is better.
pub fn xent_rouge(summary: &str, thread: &CleanThread, n: usize) -> Result<XentRouge> {
    if thread.comments.is_empty() {
        return Err(Error::invalid(format!("thread {} has no comments", thread.id)));
    }
    let per_comment_rouge: Vec<f64> = thread
        .comments
        .iter()
        .map(|c| rouge_n(summary, &c.text, n).recall)
        .collect();
    let likes: Vec<f64> = thread.likes().iter().map(|&l| l as f64).collect();
    let likes_dist = smoothed_distribution(&likes, XENT_EPS);
    let rouge_dist = smoothed_distribution(&per_comment_rouge, XENT_EPS);
    Ok(XentRouge {
        xent: cross_entropy(&likes_dist, &rouge_dist),
        likes_dist,
        rouge_dist,
        per_comment_rouge,
    })
}

/// Likes-weighted mean of per-comment ROUGE recall.
pub fn weighted_recall(summary: &str, thread: &CleanThread, n: usize) -> Result<f64> {
    let recalls: Vec<f64> = thread
        .comments
        .iter()
        .map(|c| rouge_n(summary, &c.text, n).recall)
        .collect();
    weighted_mean(&recalls, &thread.likes())
}

fn weighted_mean(recalls: &[f64], likes: &[u64]) -> Result<f64> {
    let total: u64 = likes.iter().sum();
    if total == 0 {
        return Err(Error::Undefined("Recall_w undefined for zero total likes".into()));
    }
    let num: f64 = recalls.iter().zip(likes).map(|(r, &l)| r * l as f64).sum();
    Ok(num / total as f64)
}

pub fn title_rouge(summary: &str, title: &str, n: usize) -> f64 {
    rouge_n(summary, title, n).recall
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationFeatures {
    /// Words across title and comments.
    pub thread_length: usize,
    /// Words across the salient comments.
    pub salient_comment_length: usize,
    pub n_comments: usize,
    pub ld_thread: f64,
    pub ld_salient: f64,
    /// Population standard deviation of likes divided by the maximum.
    pub likes_std: f64,
}

/// Distinct words over total words; 0 for no words.
pub fn lexical_diversity(words: &[String]) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let distinct: BTreeSet<&String> = words.iter().collect();
    distinct.len() as f64 / words.len() as f64
}

/// Indices (1-based, thread order) of the `k` most liked comments, ties
/// going to the earlier comment.
pub fn salient_indices(thread: &CleanThread, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=thread.comments.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(thread.comments[i - 1].likes));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// `salient` holds 1-based comment indices.
pub fn characterize(thread: &CleanThread, salient: &[usize]) -> Result<CharacterizationFeatures> {
    if let Some(&bad) = salient.iter().find(|&&i| i == 0 || i > thread.comments.len()) {
        return Err(Error::invalid(format!(
            "salient index {bad} out of range for {} comments",
            thread.comments.len()
        )));
    }
    let mut all = rouge_tokens(&thread.title);
    for c in &thread.comments {
        all.extend(rouge_tokens(&c.text));
    }
    let salient_words: Vec<String> = salient
        .iter()
        .flat_map(|&i| rouge_tokens(&thread.comments[i - 1].text))
        .collect();
    let likes = thread.likes();
    let max = likes.iter().copied().max().unwrap_or(0);
    let likes_std = if max == 0 {
        0.0
    } else {
        let norm: Vec<f64> = likes.iter().map(|&l| l as f64 / max as f64).collect();
        let mean = norm.iter().sum::<f64>() / norm.len() as f64;
        (norm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / norm.len() as f64).sqrt()
    };
    Ok(CharacterizationFeatures {
        thread_length: all.len(),
        salient_comment_length: salient_words.len(),
        n_comments: thread.comments.len(),
        ld_thread: lexical_diversity(&all),
        ld_salient: lexical_diversity(&salient_words),
        likes_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thread_id: String,
    pub summary: String,
    pub per_comment_rouge: Vec<f64>,
    pub likes_dist: Vec<f64>,
    pub rouge_dist: Vec<f64>,
    pub xent: f64,
    /// `None` when the thread has no likes at all.
    pub recall_w: Option<f64>,
    pub title_rouge: f64,
    pub features: CharacterizationFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// ROUGE order for every metric.
    pub rouge_n: usize,
    /// Comments counted as salient when characterizing a thread.
    pub salient_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rouge_n: 1,
            salient_k: 1,
        }
    }
}

/// Scores one summary. Comment metrics use the comment parts; the title
/// metric uses the whole rendered output.
pub fn score_summary(thread: &CleanThread, summary: &Summary, opts: &EvalOptions) -> Result<EvalReport> {
    let text = summary.comment_text();
    let x = xent_rouge(&text, thread, opts.rouge_n)?;
    let recall_w = weighted_mean(&x.per_comment_rouge, &thread.likes()).ok();
    let features = characterize(thread, &salient_indices(thread, opts.salient_k))?;
    Ok(EvalReport {
        thread_id: thread.id.clone(),
        summary: summary.raw.clone(),
        per_comment_rouge: x.per_comment_rouge,
        likes_dist: x.likes_dist,
        rouge_dist: x.rouge_dist,
        xent: x.xent,
        recall_w,
        title_rouge: title_rouge(&summary.raw, &thread.title, opts.rouge_n),
        features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub reports: Vec<EvalReport>,
    /// Thread ids whose summary or scoring failed.
    pub skipped: Vec<String>,
    pub mean_xent: f64,
    /// Mean over threads where Recall_w is defined.
    pub mean_recall_w: Option<f64>,
    pub mean_title_rouge: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every thread with summaries from `summarize`, in fold order.
pub fn evaluate_with<F>(fold: &[CleanThread], opts: &EvalOptions, summarize: F) -> Result<FoldEvaluation>
where
    F: Fn(&CleanThread) -> Result<Summary> + Sync,
{
    if fold.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty fold"));
    }
    let results: Vec<Result<EvalReport>> = fold
        .par_iter()
        .map(|t| summarize(t).and_then(|s| score_summary(t, &s, opts)))
        .collect();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (thread, r) in fold.iter().zip(results) {
        match r {
            Ok(report) => reports.push(report),
            Err(e) => {
                log::warn!("skipping thread {}: {e}", thread.id);
                skipped.push(thread.id.clone());
            }
        }
    }
    Ok(FoldEvaluation {
        mean_xent: mean(reports.iter().map(|r| r.xent)).unwrap_or(f64::NAN),
        mean_recall_w: mean(reports.iter().filter_map(|r| r.recall_w)),
        mean_title_rouge: mean(reports.iter().map(|r| r.title_rouge)).unwrap_or(f64::NAN),
        reports,
        skipped,
    })
}

/// Summarizes every thread with likes withheld and scores the results.
pub fn evaluate_fold(
    summarizer: &Summarizer<'_>,
    fold: &[CleanThread],
    cfg: &DecodeConfig,
    opts: &EvalOptions,
) -> Result<FoldEvaluation> {
    evaluate_with(fold, opts, |t| summarizer.summarize(t, cfg, false))
}

/// Feature means of one quartile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureMeans {
    pub thread_length: f64,
    pub salient_comment_length: f64,
    pub n_comments: f64,
    pub ld_thread: f64,
    pub ld_salient: f64,
    pub likes_std: f64,
    pub xent: f64,
}

impl FeatureMeans {
    pub const NAMES: [&'static str; 7] = [
        "thread_length",
        "salient_comment_length",
        "n_comments",
        "ld_thread",
        "ld_salient",
        "likes_std",
        "xent",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.thread_length,
            self.salient_comment_length,
            self.n_comments,
            self.ld_thread,
            self.ld_salient,
            self.likes_std,
            self.xent,
        ]
    }

    fn of(reports: &[&EvalReport]) -> Self {
        let m = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64;
        FeatureMeans {
            thread_length: m(&|r| r.features.thread_length as f64),
            salient_comment_length: m(&|r| r.features.salient_comment_length as f64),
            n_comments: m(&|r| r.features.n_comments as f64),
            ld_thread: m(&|r| r.features.ld_thread),
            ld_salient: m(&|r| r.features.ld_salient),
            likes_std: m(&|r| r.features.likes_std),
            xent: m(&|r| r.xent),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuartileReport {
    /// Thread ids per quartile; Q1 holds the lowest XENT.
    pub members: [Vec<String>; 4],
    pub means: [FeatureMeans; 4],
}

/// Sorts by XENT ascending (ties by thread id) and averages features per
/// quartile. Quartile sizes differ by at most one, larger ones first.
pub fn quartile_report(reports: &[EvalReport]) -> Result<QuartileReport> {
    if reports.len() < 4 {
        return Err(Error::invalid(format!(
            "quartiles need at least 4 reports, got {}",
            reports.len()
        )));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.xent.total_cmp(&b.xent).then_with(|| a.thread_id.cmp(&b.thread_id)));
    let base = sorted.len() / 4;
    let extra = sorted.len() % 4;
    let mut start = 0;
    let mut groups = Vec::with_capacity(4);
    for q in 0..4 {
        let size = base + usize::from(q < extra);
        groups.push(&sorted[start..start + size]);
        start += size;
    }
    Ok(QuartileReport {
        members: std::array::from_fn(|q| groups[q].iter().map(|r| r.thread_id.clone()).collect()),
        means: std::array::from_fn(|q| FeatureMeans::of(groups[q])),
    })
}

pub fn write_reports_jsonl(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_reports_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    }
}

/// One row per variant: `variant,xent,recall_w,title_rouge`.
pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[(String, &FoldEvaluation)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["variant", "xent", "recall_w", "title_rouge"])
        .map_err(|e| csv_error(path, e))?;
    for (variant, ev) in rows {
        let recall = ev.mean_recall_w.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            variant.clone(),
            ev.mean_xent.to_string(),
            recall,
            ev.mean_title_rouge.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `feature,Q1,Q2,Q3,Q4`, one row per feature.
pub fn write_quartile_csv(path: impl AsRef<Path>, report: &QuartileReport) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "feature,Q1,Q2,Q3,Q4").unwrap();
    let values: Vec<[f64; 7]> = report.means.iter().map(FeatureMeans::values).collect();
    for (i, name) in FeatureMeans::NAMES.iter().enumerate() {
        writeln!(
            out,
            "{name},{},{},{},{}",
            values[0][i], values[1][i], values[2][i], values[3][i]
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
