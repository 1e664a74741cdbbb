use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use socsum_core::corpus::{
    load_clean_corpus, load_corpus, partition, preprocess, write_clean_corpus, CleanThread, Fold, FoldRatios,
};
use socsum_core::decoding::{DecodeConfig, Summary};
use socsum_core::evaluation::{
    centroid_baseline, characterize, evaluate_fold, evaluate_with, quartile_report, salient_indices,
    write_aggregate_csv, write_quartile_csv, write_reports_jsonl, EvalOptions, FoldEvaluation,
};
use socsum_core::model::ModelConfig;
use socsum_core::tokenizer::{train_vocab, Vocab, VocabOptions};
use socsum_core::training::{train, OptimizerConfig, TaskVariant, TrainPlan, TrainState};

/// Summarize news comment threads with like-driven attention.
#[derive(Parser, Debug)]
#[command(name = "socsum", version)]
struct Cli {
    /// Flat `key = value` file; each key is a flag of the chosen command.
    /// Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean raw threads, drop short comments and assign folds.
    #[command(args_override_self = true)]
    Preprocess(PreprocessArgs),
    /// Train a subword vocabulary on a clean corpus.
    #[command(args_override_self = true)]
    BuildVocab(BuildVocabArgs),
    /// Train a summarizer, or resume from a checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Write one summary per thread as JSON lines.
    #[command(args_override_self = true)]
    Summarize(SummarizeArgs),
    /// Score summaries of a fold and write reports.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Write per-thread characterization features.
    #[command(args_override_self = true)]
    Characterize(CharacterizeArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Raw thread JSONL.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Minimum words per comment after cleaning.
    #[arg(long, default_value_t = 5)]
    min_words: usize,
    /// Train, validation and test proportions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: FoldRatios,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FoldArg {
    Train,
    Validation,
    Test,
    All,
}

impl FoldArg {
    fn select(self, threads: Vec<CleanThread>) -> Vec<CleanThread> {
        let want = match self {
            FoldArg::Train => Fold::Train,
            FoldArg::Validation => Fold::Validation,
            FoldArg::Test => Fold::Test,
            FoldArg::All => return threads,
        };
        threads.into_iter().filter(|t| t.fold == want).collect()
    }
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Clean corpus JSONL.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    min_freq: u64,
    /// Keep letter case.
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long, value_enum, default_value_t = FoldArg::Train)]
    fold: FoldArg,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    /// Forbid repeating n-grams of this size (0 = off).
    #[arg(long, default_value_t = 3)]
    block_ngram: usize,
    #[arg(long, default_value_t = 128)]
    max_out_len: usize,
    #[arg(long, default_value_t = 0.6)]
    length_penalty_alpha: f64,
}

impl DecodeArgs {
    fn config(&self) -> anyhow::Result<DecodeConfig> {
        let cfg = DecodeConfig {
            beam_size: self.beam_size,
            block_ngram: self.block_ngram,
            max_out_len: self.max_out_len,
            length_penalty_alpha: self.length_penalty_alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Clean corpus JSONL; trains on its train fold and validates on its
    /// validation fold.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Task variant 1-8.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u8).range(1..=8))]
    variant: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Continue from this checkpoint; its model and optimizer settings win.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 20000)]
    max_steps: u64,
    #[arg(long, default_value_t = 2000)]
    eval_every: u64,
    /// Validation threads decoded at each checkpoint (default: all).
    #[arg(long)]
    val_limit: Option<usize>,

    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    enc_blocks: usize,
    #[arg(long, default_value_t = 2)]
    dec_blocks: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    d_ff: usize,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,

    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 400)]
    warmup: u64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.998)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-9)]
    adam_eps: f64,
    /// Threads per step.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Global gradient norm cap (0 = off).
    #[arg(long, default_value_t = 0.0)]
    clip_norm: f64,

    #[arg(long, default_value_t = 1)]
    rouge_n: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output JSONL (`-` for stdout).
    #[arg(long, value_name = "FILE", default_value = "-")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FoldArg::Test)]
    fold: FoldArg,
    /// Weight comments by their likes instead of uniformly.
    #[arg(long)]
    provide_likes: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Model,
    Centroid,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Trained model; the centroid baseline uses its token embeddings.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Receives reports.jsonl, aggregate.csv and quartiles.csv.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = FoldArg::Test)]
    fold: FoldArg,
    #[arg(long, value_enum, default_value_t = Baseline::Model)]
    baseline: Baseline,
    /// Comments picked by the centroid baseline.
    #[arg(long, default_value_t = 1)]
    centroid_k: usize,
    #[arg(long, default_value_t = 1)]
    rouge_n: usize,
    /// Most-liked comments counted as salient in the features.
    #[arg(long, default_value_t = 1)]
    salient_k: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct CharacterizeArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Output JSONL (`-` for stdout).
    #[arg(long, value_name = "FILE", default_value = "-")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FoldArg::Test)]
    fold: FoldArg,
    #[arg(long, default_value_t = 1)]
    salient_k: usize,
}

fn open_output(path: &Path) -> anyhow::Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(io::BufWriter::new(f)))
}

fn load_fold(path: &Path, fold: FoldArg) -> anyhow::Result<Vec<CleanThread>> {
    let threads = fold.select(load_clean_corpus(path)?);
    if threads.is_empty() {
        bail!("no threads in fold {fold:?} of {}", path.display());
    }
    Ok(threads)
}

fn run_preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let raw = load_corpus(&a.input)?;
    let clean = preprocess(&raw, a.min_words)?;
    let clean = partition(&clean, a.ratios, a.seed);
    write_clean_corpus(&a.out, &clean)?;
    log::info!("kept {} of {} threads", clean.len(), raw.len());
    Ok(())
}

fn run_build_vocab(a: BuildVocabArgs) -> anyhow::Result<()> {
    let threads = load_fold(&a.corpus, a.fold)?;
    let opts = VocabOptions {
        vocab_size: a.vocab_size,
        min_freq: a.min_freq,
        lowercase: !a.no_lowercase,
    };
    let vocab = train_vocab(&threads, opts)?;
    vocab.save(&a.out)?;
    log::info!("vocabulary of {} tokens", vocab.len());
    Ok(())
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = load_clean_corpus(&a.corpus)?;
    let train_fold = FoldArg::Train.select(corpus.clone());
    let validation = FoldArg::Validation.select(corpus);
    let vocab = Vocab::load(&a.vocab)?;
    let mut state = match &a.resume {
        Some(path) => {
            let state = TrainState::resume(path, &vocab)?;
            log::info!("resuming at step {}", state.step);
            state
        }
        None => {
            let config = ModelConfig {
                d_model: a.d_model,
                n_enc_blocks: a.enc_blocks,
                n_dec_blocks: a.dec_blocks,
                n_heads: a.heads,
                d_ff: a.d_ff,
                max_len: a.max_len,
                vocab_size: vocab.len(),
                dropout: a.dropout,
                label_smoothing: a.label_smoothing,
            };
            let opt = OptimizerConfig {
                lr: a.lr,
                warmup_steps: a.warmup,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.adam_eps,
                batch_size: a.batch_size,
                clip_norm: a.clip_norm,
            };
            TrainState::new(config, opt, TaskVariant::from_id(a.variant)?, a.seed, &vocab)?
        }
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let plan = TrainPlan {
        max_steps: a.max_steps,
        eval_every: a.eval_every,
        out_dir: Some(a.out_dir.clone()),
        decode: a.decode.config()?,
        eval: EvalOptions {
            rouge_n: a.rouge_n,
            ..Default::default()
        },
        val_limit: a.val_limit,
    };
    let report = train(&mut state, &train_fold, &validation, &vocab, &plan)?;
    if let Some(best) = report.best_checkpoint {
        log::info!("best checkpoint {}", best.display());
    }
    Ok(())
}

fn run_summarize(a: SummarizeArgs) -> anyhow::Result<()> {
    let threads = load_fold(&a.corpus, a.fold)?;
    let vocab = Vocab::load(&a.vocab)?;
    let state = TrainState::resume(&a.checkpoint, &vocab)?;
    let cfg = a.decode.config()?;
    let summarizer = state.summarizer(&vocab);
    let checkpoint = a.checkpoint.display().to_string();
    let mut out = open_output(&a.out)?;
    for t in &threads {
        let s = summarizer.summarize(t, &cfg, a.provide_likes)?;
        let line = json!({
            "thread_id": t.id,
            "title_part": s.title_part,
            "comment_parts": s.comment_parts,
            "raw": s.raw,
            "variant": state.variant.id,
            "checkpoint": checkpoint,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let threads = load_fold(&a.corpus, a.fold)?;
    let vocab = Vocab::load(&a.vocab)?;
    let state = TrainState::resume(&a.checkpoint, &vocab)?;
    let cfg = a.decode.config()?;
    let opts = EvalOptions {
        rouge_n: a.rouge_n,
        salient_k: a.salient_k,
    };
    let (label, ev): (String, FoldEvaluation) = match a.baseline {
        Baseline::Model => (
            format!("variant-{}", state.variant.id),
            evaluate_fold(&state.summarizer(&vocab), &threads, &cfg, &opts)?,
        ),
        Baseline::Centroid => {
            if a.centroid_k == 0 {
                bail!("--centroid-k must be at least 1");
            }
            let embed = &state.params.token_emb;
            let ev = evaluate_with(&threads, &opts, |t| {
                let parts = centroid_baseline(t, &vocab, embed, a.centroid_k);
                Ok(Summary {
                    title_part: String::new(),
                    raw: parts.join(" "),
                    comment_parts: parts,
                })
            })?;
            ("centroid".to_string(), ev)
        }
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_reports_jsonl(a.out_dir.join("reports.jsonl"), &ev.reports)?;
    write_aggregate_csv(a.out_dir.join("aggregate.csv"), &[(label.clone(), &ev)])?;
    if ev.reports.len() >= 4 {
        write_quartile_csv(a.out_dir.join("quartiles.csv"), &quartile_report(&ev.reports)?)?;
    }
    let line = json!({
        "variant": label,
        "threads": ev.reports.len(),
        "skipped": ev.skipped.len(),
        "xent": ev.mean_xent,
        "recall_w": ev.mean_recall_w,
        "title_rouge": ev.mean_title_rouge,
    });
    println!("{line}");
    Ok(())
}

fn run_characterize(a: CharacterizeArgs) -> anyhow::Result<()> {
    let threads = load_fold(&a.corpus, a.fold)?;
    let mut out = open_output(&a.out)?;
    for t in &threads {
        let f = characterize(t, &salient_indices(t, a.salient_k))?;
        let mut line = serde_json::to_value(&f)?;
        line["thread_id"] = json!(t.id);
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

const COMMANDS: [&str; 6] = [
    "preprocess",
    "build-vocab",
    "train",
    "summarize",
    "evaluate",
    "characterize",
];

/// Splices `--key value` pairs from the `--config` file in right after the
/// subcommand, so later command-line flags override them.
fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = it.next();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let Some(at) = rest.iter().position(|a| COMMANDS.contains(&a.as_str())) else {
        return Ok(rest);
    };
    let root = Cli::command();
    let flags_of = |name: &str| -> BTreeSet<String> {
        root.find_subcommand(name)
            .map(|c| {
                c.get_arguments()
                    .filter_map(|a| a.get_long().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    };
    let mine = flags_of(&rest[at]);
    let anywhere: BTreeSet<String> = COMMANDS.iter().flat_map(|c| flags_of(c)).collect();

    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config {path} line {}: expected key = value", n + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if !anywhere.contains(&key) {
            bail!("config {path} line {}: unknown key {key:?}", n + 1);
        }
        if !mine.contains(&key) {
            continue;
        }
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            v => {
                injected.push(format!("--{key}"));
                injected.push(v.to_string());
            }
        }
    }
    rest.splice(at + 1..at + 1, injected);
    Ok(rest)
}

/// One machine-parsable line: `error: <kind>: <message>`.
fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<socsum_core::Error>())
        .map(|c| c.kind())
        .unwrap_or("other");
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error: {kind}: {msg}")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring worker threads")?;
    match cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::BuildVocab(a) => run_build_vocab(a),
        Command::Train(a) => run_train(a),
        Command::Summarize(a) => run_summarize(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Characterize(a) => run_characterize(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_keys_land_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(
            &cfg,
            "# run\nmax_steps = 50\nseed = 3\nprovide_likes = true\nvocab_size = 300\n",
        )
        .unwrap();
        let args = strings(&["socsum", "--config", cfg.to_str().unwrap(), "train", "--seed", "9"]);
        let out = expand_config(args).unwrap();
        assert_eq!(
            out,
            strings(&["socsum", "train", "--max-steps", "50", "--seed", "3", "--seed", "9"])
        );

        let mut full = out;
        full.extend(strings(&["--corpus", "c", "--vocab", "v", "--out-dir", "o"]));
        let Command::Train(t) = Cli::try_parse_from(full).unwrap().command else {
            panic!("expected train")
        };
        assert_eq!((t.max_steps, t.seed), (50, 9));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "max_stepz = 50\n").unwrap();
        let args = strings(&["socsum", "--config", cfg.to_str().unwrap(), "train"]);
        assert!(expand_config(args).is_err());
    }

    #[test]
    fn error_lines_carry_the_kind() {
        let e = anyhow::Error::from(socsum_core::Error::HashMismatch {
            artifact: "vocab".into(),
        });
        assert_eq!(error_line(&e), "error: hash_mismatch: vocab hash mismatch");
        let e = anyhow::anyhow!("plain");
        assert_eq!(error_line(&e), "error: other: plain");
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
