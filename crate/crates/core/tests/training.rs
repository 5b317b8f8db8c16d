use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsvqa::corpus::{generate_split, DataConfig, Example};
use rsvqa::model::{build_vocabulary, ModelConfig, PromptMode, VlmModel};
use rsvqa::tensor::Tape;
use rsvqa::tokenizer::Vocabulary;
use rsvqa::training::*;
use rsvqa::Error;

fn fixture(n: usize, seed: u64) -> (Vocabulary, Vec<Example>) {
    let split = generate_split("train", n, seed, &DataConfig::default()).unwrap();
    (build_vocabulary(&split.samples).unwrap(), split.examples())
}

fn model(vocab: &Vocabulary, seed: u64) -> VlmModel {
    VlmModel::init(ModelConfig::new(vocab.len()), seed).unwrap()
}

const NORM: LossNorm = LossNorm::PerToken;

#[test]
fn losses_are_non_negative_and_batch_means() {
    let (vocab, exs) = fixture(8, 3);
    let m = model(&vocab, 1);
    for f in [pretrain_loss, finetune_loss] {
        let one = f(&m, &vocab, &exs[..1], NORM).unwrap();
        assert!(one >= 0.0);
        let dup = vec![exs[0].clone(); 4];
        assert!((f(&m, &vocab, &dup, NORM).unwrap() - one).abs() < 1e-6);
        let two = f(&m, &vocab, &exs[..2], NORM).unwrap();
        let other = f(&m, &vocab, &exs[1..2], NORM).unwrap();
        assert!((two - (one + other) / 2.0).abs() < 1e-6);
    }
    assert!(matches!(pretrain_loss(&m, &vocab, &[], NORM), Err(Error::EmptyBatch)));
}

#[test]
fn finetune_and_pretrain_conditioning_differ() {
    let (vocab, exs) = fixture(4, 3);
    let m = model(&vocab, 1);
    let a = pretrain_loss(&m, &vocab, &exs, NORM).unwrap();
    let b = finetune_loss(&m, &vocab, &exs, NORM).unwrap();
    assert_ne!(a, b);
}

#[test]
fn per_sequence_loss_is_negative_log_likelihood() {
    let (vocab, exs) = fixture(3, 9);
    let m = model(&vocab, 2);
    let got = pretrain_loss(&m, &vocab, &exs, LossNorm::PerSequence).unwrap();
    let want: f64 = exs
        .iter()
        .map(|e| {
            let ids = vocab.encode(&e.sample.answer);
            -m.sequence_log_prob(&vocab, &e.image, &e.sample.question, &ids, PromptMode::Pretrain)
                .unwrap()
        })
        .sum::<f64>()
        / exs.len() as f64;
    assert!((got - want).abs() < 1e-4 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn total_loss_degenerate_weights() {
    let (vocab, exs) = fixture(6, 4);
    let m = model(&vocab, 1);
    let (pre, fin) = (&exs[..3], &exs[3..]);
    let lp = pretrain_loss(&m, &vocab, pre, NORM).unwrap();
    let lf = finetune_loss(&m, &vocab, fin, NORM).unwrap();
    assert_eq!(total_loss(&m, &vocab, pre, fin, 1.0, 0.0, NORM).unwrap(), lp);
    assert_eq!(total_loss(&m, &vocab, pre, fin, 0.0, 1.0, NORM).unwrap(), lf);
    let half = total_loss(&m, &vocab, pre, fin, 0.5, 0.5, NORM).unwrap();
    assert!((half - (lp + lf) / 2.0).abs() < 1e-7);
    assert!(matches!(
        total_loss(&m, &vocab, pre, fin, 0.0, 0.0, NORM),
        Err(Error::BothZero)
    ));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (vocab, exs) = fixture(8, 5);
    let m = model(&vocab, 1);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            batch_size: 4,
            optimizer,
            ..Default::default()
        };
        let out = train(m.clone(), &vocab, &exs, &cfg, |_| {}).unwrap();
        assert_eq!(out.checkpoint.model.params(), m.params());
        assert_eq!(out.log.len(), 3);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (vocab, exs) = fixture(12, 6);
    let run = |seed| {
        let cfg = TrainConfig {
            stage: Stage::Joint,
            steps: 3,
            batch_size: 5,
            seed,
            ..Default::default()
        };
        let out = train(model(&vocab, 1), &vocab, &exs, &cfg, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&out.checkpoint, dir.path()).unwrap();
        (
            fs::read(dir.path().join("weights.bin")).unwrap(),
            fs::read(dir.path().join("manifest.json")).unwrap(),
            out.log,
        )
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a.0, run(2).0);
}

#[test]
fn thread_count_does_not_change_results() {
    let (vocab, exs) = fixture(8, 6);
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 8,
        ..Default::default()
    };
    let run = |threads: &str| {
        std::env::set_var("RSVQA_THREADS", threads);
        let out = train(model(&vocab, 1), &vocab, &exs, &cfg, |_| {}).unwrap();
        std::env::remove_var("RSVQA_THREADS");
        out.checkpoint.model
    };
    assert_eq!(run("1").params(), run("3").params());
}

#[test]
fn single_sample_sgd_step_decreases_its_loss() {
    let (vocab, exs) = fixture(64, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for state in 0..20u64 {
        let m = model(&vocab, 100 + state);
        let ex = exs[rng.random_range(0..exs.len())].clone();
        let before = pretrain_loss(&m, &vocab, std::slice::from_ref(&ex), NORM).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            optimizer: OptimizerKind::Sgd,
            steps: 1,
            batch_size: 1,
            seed: state,
            ..Default::default()
        };
        let out = train(m, &vocab, std::slice::from_ref(&ex), &cfg, |_| {}).unwrap();
        let after = pretrain_loss(&out.checkpoint.model, &vocab, std::slice::from_ref(&ex), NORM).unwrap();
        assert!(after < before, "state {state}: {before} -> {after}");
    }
}

#[test]
fn every_parameter_tensor_receives_gradient() {
    let (vocab, exs) = fixture(16, 1);
    let m = model(&vocab, 1);
    let mut seen = vec![false; m.params().len()];
    for ex in &exs {
        for mode in [PromptMode::Pretrain, PromptMode::Finetune] {
            let mut tape = Tape::new();
            let mut fwd = m.forward(&mut tape);
            let prompt = rsvqa::model::build_prompt(&vocab, &ex.sample.question, mode);
            let loss = fwd.answer_loss(&ex.image, &prompt, &vocab.encode(&ex.sample.answer)).unwrap();
            let bound = fwd.bound().to_vec();
            let grads = tape.backward(loss).unwrap();
            for (i, v) in bound.iter().enumerate() {
                if let Some(g) = v.and_then(|v| grads.get(v)) {
                    seen[i] |= g.data().iter().any(|&x| x != 0.0);
                }
            }
        }
    }
    let dead: Vec<_> = m.names().iter().zip(&seen).filter(|(_, &s)| !s).map(|(n, _)| n).collect();
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}

#[test]
fn diverging_run_reports_step() {
    let (vocab, exs) = fixture(4, 2);
    let cfg = TrainConfig {
        lr: 1e30,
        optimizer: OptimizerKind::Sgd,
        grad_clip_norm: 0.0,
        steps: 5,
        batch_size: 4,
        ..Default::default()
    };
    match train(model(&vocab, 1), &vocab, &exs, &cfg, |_| {}) {
        Err(Error::Diverged { step, .. }) => assert!((1..=5).contains(&step)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (vocab, exs) = fixture(6, 2);
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 3,
        ..Default::default()
    };
    let ckpt = train(model(&vocab, 4), &vocab, &exs, &cfg, |_| {}).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.model, ckpt.model);
    for (x, y) in loaded.model.params().iter().zip(ckpt.model.params()) {
        let bits = |t: &rsvqa::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
    assert_eq!(loaded.vocab, vocab);
    assert_eq!((loaded.stage, loaded.step, loaded.rng.clone()), (Some(Stage::Pretrain), 2, ckpt.rng.clone()));
    ckpt.rng.as_ref().unwrap().restore().unwrap();

    let b = dir.path().join("b");
    save_checkpoint(&loaded, &b).unwrap();
    for f in ["manifest.json", "weights.bin", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let weights = fs::read(b.join("weights.bin")).unwrap();
    fs::write(b.join("weights.bin"), &weights[..weights.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::CorruptManifest(_))));

    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    fs::write(a.join("manifest.json"), &manifest[..manifest.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&a), Err(Error::CorruptManifest(_))));

    fs::write(
        a.join("manifest.json"),
        manifest.replacen("\"format_version\": 1", "\"format_version\": 9", 1),
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint(&a),
        Err(Error::VersionMismatch { found: 9, expected: 1 })
    ));

    let mut flipped = weights.clone();
    flipped[10] ^= 1;
    fs::write(b.join("weights.bin"), flipped).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::CorruptManifest(_))));

    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

/// Steps until a finetuning run's logged batch loss first drops below `threshold`.
fn steps_to_threshold(init: VlmModel, vocab: &Vocabulary, data: &[Example], seed: u64, threshold: f64, cap: usize) -> usize {
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        steps: cap,
        seed,
        ..Default::default()
    };
    let log = train(init, vocab, data, &cfg, |_| {}).unwrap().log;
    log.iter().find(|r| r.loss < threshold).map_or(cap + 1, |r| r.step)
}

#[test]
fn pretraining_speeds_up_finetuning() {
    let (vocab, exs) = fixture(64, 1);
    let mut warm = Vec::new();
    let mut cold = Vec::new();
    for seed in 1..=3 {
        let init = model(&vocab, seed);
        let pre = TrainConfig {
            stage: Stage::Pretrain,
            steps: 150,
            seed,
            ..Default::default()
        };
        let pretrained = train(init.clone(), &vocab, &exs, &pre, |_| {}).unwrap().checkpoint.model;
        warm.push(steps_to_threshold(pretrained, &vocab, &exs, seed, 0.05, 300));
        cold.push(steps_to_threshold(init, &vocab, &exs, seed, 0.05, 300));
    }
    warm.sort();
    cold.sort();
    assert!(warm[1] < cold[1], "warm {warm:?} cold {cold:?}");
}
