use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsvqa::corpus::{generate_scene, render_image, ImageDims, SceneConfig};
use rsvqa::decoding::*;
use rsvqa::model::{ModelConfig, VlmModel};
use rsvqa::tokenizer::{TokenId, Vocabulary, EOS, IMG};
use rsvqa::Error;

const VOCAB: usize = 8;

fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        patch_size: 4,
        max_seq_len: 12,
        vocab_size: VOCAB,
        image: ImageDims {
            height: 8,
            width: 8,
            channels: 4,
        },
    }
}

/// A random toy model with sharpened weights, plus a random image and prompt.
fn draw(seed: u64) -> (VlmModel, rsvqa::model::VisualFeatures, Vec<TokenId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VlmModel::init(toy_config(), seed).unwrap();
    let gain = rng.random_range(1.0..4.0f32);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = *v * gain + rng.random_range(-0.3..0.3);
        }
    }
    let scene = generate_scene(seed, &SceneConfig { grid: 4, ..Default::default() }).unwrap();
    let image = render_image(&scene, toy_config().image, 0.05, seed).unwrap();
    let features = model.encode_image(&image).unwrap();
    let mut prompt = vec![IMG];
    for _ in 0..rng.random_range(0..4) {
        prompt.push(rng.random_range(5..VOCAB as TokenId));
    }
    (model, features, prompt)
}

/// Every EOS-terminated sequence up to `cap` tokens, scored by teacher forcing.
fn reference_argmax(q: &Query, cap: usize) -> (Vec<TokenId>, f64) {
    let non_eos: Vec<TokenId> = (0..VOCAB as TokenId).filter(|&t| t != EOS && is_generable(t)).collect();
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..cap {
        let mut grown = Vec::new();
        for answer in &frontier {
            let score = q.score(answer).unwrap();
            let mut seq = answer.clone();
            seq.push(EOS);
            let better = match &best {
                None => true,
                Some((b, s)) => score > *s || (score == *s && seq < *b),
            };
            if better {
                best = Some((seq, score));
            }
            for &t in &non_eos {
                let mut a = answer.clone();
                a.push(t);
                grown.push(a);
            }
        }
        frontier = grown;
    }
    best.unwrap()
}

#[test]
fn exhaustive_matches_independent_enumerator() {
    for seed in 0..15 {
        let (model, features, prompt) = draw(seed);
        let q = Query::from_parts(&model, features, prompt);
        let cap = 3;
        let ex = exhaustive_argmax(&q, cap).unwrap();
        let (seq, score) = reference_argmax(&q, cap);
        assert!((ex.log_prob - score).abs() < 1e-5, "seed {seed}: {} vs {score}", ex.log_prob);
        assert_eq!(ex.tokens, seq, "seed {seed}");
        assert!(ex.finished && ex.log_prob <= 0.0);
    }
}

#[test]
fn saturated_beam_equals_exhaustive_and_k1_equals_greedy() {
    for seed in 100..130 {
        let (model, features, prompt) = draw(seed);
        let q = Query::from_parts(&model, features, prompt);
        let cap = 3;
        let ex = exhaustive_argmax(&q, cap).unwrap();
        let full = beam_search(&q, VOCAB.pow(cap as u32), cap, LengthNorm::None).unwrap();
        assert_eq!(full.hypothesis.tokens, ex.tokens, "seed {seed}");
        assert!((full.score - ex.log_prob).abs() < 1e-5);

        let greedy = greedy_decode(&q, cap).unwrap();
        let one = beam_search(&q, 1, cap, LengthNorm::None).unwrap();
        assert_eq!(one.hypothesis.tokens, greedy.tokens, "seed {seed}");

        for k in [1, 2, 3, 5, 16] {
            let b = beam_search(&q, k, cap, LengthNorm::None).unwrap();
            assert!(b.score <= 0.0);
            if b.hypothesis.finished {
                assert!(b.score <= ex.log_prob + 1e-9, "k={k}: {} > {}", b.score, ex.log_prob);
            }
            let rescored = q.rescore(&b.hypothesis).unwrap();
            assert!((rescored - b.hypothesis.log_prob).abs() < 1e-5);
        }
    }
}

#[test]
fn reported_scores_match_rescoring() {
    for seed in 200..210 {
        let (model, features, prompt) = draw(seed);
        let q = Query::from_parts(&model, features, prompt);
        let g = greedy_decode(&q, 6).unwrap();
        assert!((q.rescore(&g).unwrap() - g.log_prob).abs() < 1e-5);
        assert!(g.tokens.len() <= 6);
        if g.finished {
            assert_eq!(*g.tokens.last().unwrap(), EOS);
            assert!((q.score(g.answer()).unwrap() - g.log_prob).abs() < 1e-5);
        }
        let b = beam_search(&q, 4, 6, LengthNorm::ByLength).unwrap();
        assert!((q.rescore(&b.hypothesis).unwrap() - b.hypothesis.log_prob).abs() < 1e-5);
        assert!((b.score - b.hypothesis.log_prob / b.hypothesis.tokens.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn decoding_is_deterministic() {
    let (model, features, prompt) = draw(7);
    let q = Query::from_parts(&model, features, prompt);
    assert_eq!(beam_search(&q, 3, 5, LengthNorm::None).unwrap(), beam_search(&q, 3, 5, LengthNorm::None).unwrap());
}

#[test]
fn error_cases() {
    let (model, features, prompt) = draw(1);
    let q = Query::from_parts(&model, features.clone(), prompt);
    assert!(matches!(beam_search(&q, 0, 3, LengthNorm::None), Err(Error::BadBeamWidth)));
    assert!(matches!(exhaustive_argmax(&q, 7), Err(Error::SearchSpaceTooLarge { .. })));
    let long = Query::from_parts(&model, features, vec![IMG; 11]);
    assert!(matches!(greedy_decode(&long, 3), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn length_cap_is_limited_by_window() {
    let (model, features, _) = draw(3);
    let q = Query::from_parts(&model, features, vec![IMG; 8]);
    // 12 slots: 8 prompt + BOS leaves room for 3 hypothesis tokens.
    assert_eq!(q.effective_cap(8).unwrap(), 3);
    assert!(greedy_decode(&q, 8).unwrap().tokens.len() <= 3);
    assert!(beam_search(&q, 4, 8, LengthNorm::None).unwrap().hypothesis.tokens.len() <= 3);
}

#[test]
fn choice_scoring_ties_and_errors() {
    let vocab = Vocabulary::build(&["water forest urban"], 1).unwrap();
    let mut cfg = toy_config();
    cfg.vocab_size = vocab.len();
    let model = VlmModel::init(cfg.clone(), 3).unwrap();
    let scene = generate_scene(1, &SceneConfig { grid: 4, ..Default::default() }).unwrap();
    let image = render_image(&scene, cfg.image, 0.0, 1).unwrap();
    let q = Query::new(&model, &vocab, &image, "forest", rsvqa::model::PromptMode::Pretrain).unwrap();

    assert_eq!(score_choices(&q, &vocab, &["urban"], LengthNorm::ByLength).unwrap().index, 0);
    let s = score_choices(&q, &vocab, &["water", "forest", "urban"], LengthNorm::ByLength).unwrap();
    let best = ["water", "forest", "urban"][s.index];
    let others: Vec<&str> = ["water", "forest", "urban"].into_iter().filter(|c| *c != best).collect();
    let dup = [others[0], best, others[1], best];
    assert_eq!(score_choices(&q, &vocab, &dup, LengthNorm::ByLength).unwrap().index, 1);
    let raw = score_choices(&q, &vocab, &["water forest"], LengthNorm::None).unwrap();
    let norm = score_choices(&q, &vocab, &["water forest"], LengthNorm::ByLength).unwrap();
    assert!((raw.scores[0] / 3.0 - norm.scores[0]).abs() < 1e-12);
    assert!(matches!(
        score_choices::<&str>(&q, &vocab, &[], LengthNorm::ByLength),
        Err(Error::EmptyChoices)
    ));
}
