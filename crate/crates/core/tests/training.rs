use std::path::Path;

use socsum_core::corpus::{load_corpus, preprocess, CleanThread};
use socsum_core::model::ModelConfig;
use socsum_core::tokenizer::{train_vocab, Vocab, VocabOptions};
use socsum_core::training::{train, OptimizerConfig, TaskVariant, TrainPlan, TrainState};
use socsum_core::Error;

fn toy() -> (Vec<CleanThread>, Vocab) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy5.jsonl");
    let corpus = preprocess(&load_corpus(path).unwrap(), 5).unwrap();
    let vocab = train_vocab(
        &corpus,
        VocabOptions {
            vocab_size: 150,
            min_freq: 2,
            lowercase: true,
        },
    )
    .unwrap();
    (corpus, vocab)
}

fn fresh(vocab: &Vocab, variant: u8, opt: OptimizerConfig) -> TrainState {
    let cfg = ModelConfig {
        d_model: 16,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 128,
        vocab_size: vocab.len(),
        dropout: 0.1,
        label_smoothing: 0.1,
    };
    TrainState::new(cfg, opt, TaskVariant::from_id(variant).unwrap(), 5, vocab).unwrap()
}

fn small_opt() -> OptimizerConfig {
    OptimizerConfig {
        batch_size: 2,
        warmup_steps: 20,
        ..Default::default()
    }
}

#[test]
fn resume_matches_a_straight_run() {
    let (corpus, vocab) = toy();
    let dir = tempfile::tempdir().unwrap();
    let plan = |max_steps| TrainPlan {
        max_steps,
        eval_every: 100,
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };

    let mut straight = fresh(&vocab, 8, small_opt());
    let straight_report = train(
        &mut straight,
        &corpus,
        &[],
        &vocab,
        &TrainPlan {
            out_dir: None,
            ..plan(200)
        },
    )
    .unwrap();

    let mut first = fresh(&vocab, 8, small_opt());
    train(&mut first, &corpus, &[], &vocab, &plan(100)).unwrap();
    let mut resumed = TrainState::resume(dir.path().join("step-100.ckpt"), &vocab).unwrap();
    assert_eq!(resumed, first);
    let second = train(&mut resumed, &corpus, &[], &vocab, &plan(200)).unwrap();

    assert_eq!(resumed.step, 200);
    assert_eq!(resumed.params.checksum(), straight.params.checksum());
    assert_eq!(resumed, straight);
    assert_eq!(second.step_losses, straight_report.step_losses[100..]);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn best_checkpoint_follows_validation_xent() {
    let (corpus, vocab) = toy();
    let dir = tempfile::tempdir().unwrap();
    let mut state = fresh(&vocab, 1, small_opt());
    let plan = TrainPlan {
        max_steps: 30,
        eval_every: 10,
        out_dir: Some(dir.path().to_path_buf()),
        decode: socsum_core::decoding::DecodeConfig {
            max_out_len: 12,
            beam_size: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = train(&mut state, &corpus, &corpus[..2], &vocab, &plan).unwrap();
    assert_eq!(report.metrics.len(), 3);
    let best = report
        .metrics
        .iter()
        .min_by(|a, b| a.val_xent.unwrap().total_cmp(&b.val_xent.unwrap()))
        .unwrap();
    assert_eq!(state.best_step, Some(best.step));
    let on_disk = TrainState::load(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(on_disk.step, best.step);
    assert_eq!(report.best_checkpoint, Some(dir.path().join("best.ckpt")));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_, vocab) = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    fresh(&vocab, 1, small_opt()).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(TrainState::resume(&path, &vocab).is_err());

    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(TrainState::resume(&path, &vocab).is_err());

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(TrainState::resume(&path, &vocab).is_err());

    std::fs::write(&path, &bytes).unwrap();
    assert!(TrainState::resume(&path, &vocab).is_ok());
}

#[test]
fn foreign_vocab_is_refused() {
    let (corpus, vocab) = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    fresh(&vocab, 1, small_opt()).save(&path).unwrap();
    let other = train_vocab(
        &corpus,
        VocabOptions {
            vocab_size: 80,
            min_freq: 2,
            lowercase: true,
        },
    )
    .unwrap();
    let err = TrainState::resume(&path, &other).unwrap_err();
    assert_eq!(err.to_string(), "vocab hash mismatch");
}

#[test]
fn divergence_names_the_last_good_checkpoint() {
    let (corpus, vocab) = toy();
    let dir = tempfile::tempdir().unwrap();
    let opt = OptimizerConfig {
        lr: 1e300,
        warmup_steps: 0,
        ..small_opt()
    };
    let mut state = fresh(&vocab, 1, opt);
    let plan = TrainPlan {
        max_steps: 50,
        eval_every: 1,
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    match train(&mut state, &corpus, &[], &vocab, &plan) {
        Err(Error::Diverged { step, last_good }) => {
            assert!(step >= 2, "step {step}");
            let last_good = last_good.expect("a checkpoint was written before divergence");
            assert_eq!(last_good, dir.path().join(format!("step-{}.ckpt", step - 1)));
            assert!(last_good.exists());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
