use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn socsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socsum"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running socsum")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn preprocess_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let raw = data("synthetic20.jsonl");
    ok(socsum(&["preprocess", "--in", s(&raw), "--out", s(&a), "--seed", "1"]));
    ok(socsum(&["preprocess", "--in", s(&raw), "--out", s(&b), "--seed", "1"]));
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn evaluate_without_checkpoint_is_a_usage_error() {
    let out = socsum(&["evaluate", "--corpus", "c.jsonl", "--vocab", "v.txt", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--checkpoint"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_command_and_flag_exit_2() {
    assert_eq!(socsum(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(socsum(&["preprocess", "--bogus"]).status.code(), Some(2));
    assert_eq!(socsum(&[]).status.code(), Some(2));
}

#[test]
fn pipeline_errors_are_one_line_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = socsum(&["preprocess", "--in", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: io: "), "{err}");
}

#[test]
fn help_shows_defaults() {
    let out = ok(socsum(&["train", "--help"]));
    let help = String::from_utf8_lossy(&out.stdout);
    // the default sits on the flag's line or in its description below
    let default_of = |help: &str, flag: &str| -> String {
        let lines: Vec<&str> = help.lines().map(str::trim_start).collect();
        let at = lines
            .iter()
            .position(|l| l.split([' ', '=']).next() == Some(flag))
            .unwrap_or_else(|| panic!("no {flag}"));
        let block: String = std::iter::once(lines[at])
            .chain(lines[at + 1..].iter().take_while(|l| !l.starts_with('-')).copied())
            .collect::<Vec<_>>()
            .join(" ");
        let tail = block
            .split("[default: ")
            .nth(1)
            .unwrap_or_else(|| panic!("{flag} has no default"));
        tail[..tail.find(']').unwrap()].to_string()
    };
    for (flag, default) in [
        ("--eval-every", "2000"),
        ("--lr", "0.0003"),
        ("--warmup", "400"),
        ("--beta1", "0.9"),
        ("--beta2", "0.998"),
        ("--batch-size", "8"),
        ("--beam-size", "5"),
        ("--block-ngram", "3"),
        ("--length-penalty-alpha", "0.6"),
        ("--d-model", "128"),
        ("--enc-blocks", "2"),
        ("--heads", "4"),
        ("--d-ff", "512"),
        ("--max-len", "512"),
        ("--dropout", "0.1"),
    ] {
        assert_eq!(default_of(&help, flag), default, "{flag}");
    }
    let out = ok(socsum(&["preprocess", "--help"]));
    assert_eq!(default_of(&String::from_utf8_lossy(&out.stdout), "--min-words"), "5");
}

#[test]
fn end_to_end_on_bundled_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clean = d.join("clean.jsonl");
    let vocab = d.join("vocab.txt");
    let run = d.join("run");
    let eval = d.join("eval");
    let conf = d.join("tiny.conf");
    std::fs::write(
        &conf,
        "d_model = 32\nenc_blocks = 1\ndec_blocks = 1\nheads = 2\nd_ff = 64\nmax_len = 256\n\
         lr = 1e-3\nwarmup = 50\nmax_out_len = 40\nvocab_size = 400\nmax_steps = 10\n",
    )
    .unwrap();
    let c = s(&conf);

    ok(socsum(&[
        "preprocess",
        "--in",
        s(&data("synthetic20.jsonl")),
        "--out",
        s(&clean),
        "--seed",
        "1",
    ]));
    ok(socsum(&[
        "--config",
        c,
        "build-vocab",
        "--corpus",
        s(&clean),
        "--out",
        s(&vocab),
    ]));
    // the command line overrides the config's max_steps
    ok(socsum(&[
        "--config",
        c,
        "train",
        "--corpus",
        s(&clean),
        "--vocab",
        s(&vocab),
        "--out-dir",
        s(&run),
        "--variant",
        "7",
        "--max-steps",
        "300",
        "--eval-every",
        "150",
    ]));
    assert!(run.join("step-300.ckpt").exists());
    assert!(run.join("best.ckpt").exists());
    assert!(!run.join("step-10.ckpt").exists());

    let out = ok(socsum(&[
        "--config",
        c,
        "evaluate",
        "--corpus",
        s(&clean),
        "--vocab",
        s(&vocab),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--out-dir",
        s(&eval),
    ]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let xent = summary["xent"].as_f64().unwrap();
    assert!(xent.is_finite() && xent >= 0.0, "{summary}");
    let recall = summary["recall_w"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall), "{summary}");
    assert!(eval.join("reports.jsonl").exists());
    let csv = std::fs::read_to_string(eval.join("aggregate.csv")).unwrap();
    assert!(
        csv.starts_with("variant,xent,recall_w,title_rouge\nvariant-7,"),
        "{csv}"
    );

    let out = ok(socsum(&[
        "--config",
        c,
        "summarize",
        "--corpus",
        s(&clean),
        "--vocab",
        s(&vocab),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--fold",
        "all",
    ]));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    for key in [
        "thread_id",
        "title_part",
        "comment_parts",
        "raw",
        "variant",
        "checkpoint",
    ] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(lines[0]["variant"], 7);

    let out = ok(socsum(&[
        "evaluate",
        "--corpus",
        s(&clean),
        "--vocab",
        s(&vocab),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--out-dir",
        s(&d.join("centroid")),
        "--baseline",
        "centroid",
        "--fold",
        "all",
    ]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["variant"], "centroid");
    assert!(d.join("centroid/quartiles.csv").exists());

    let out = ok(socsum(&["characterize", "--corpus", s(&clean), "--fold", "all"]));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 20);

    // a checkpoint tied to another vocabulary is refused
    let other = d.join("other.txt");
    ok(socsum(&[
        "build-vocab",
        "--corpus",
        s(&clean),
        "--out",
        s(&other),
        "--vocab-size",
        "300",
    ]));
    let out = socsum(&[
        "summarize",
        "--corpus",
        s(&clean),
        "--vocab",
        s(&other),
        "--checkpoint",
        s(&run.join("best.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        String::from_utf8_lossy(&out.stderr).trim(),
        "error: hash_mismatch: vocab hash mismatch"
    );
}
