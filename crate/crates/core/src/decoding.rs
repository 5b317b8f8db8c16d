//! Answer generation: greedy and beam search over the decoder, scoring of
//! multiple-choice candidates, and exhaustive enumeration for small cases.
//!
//! Hypothesis tokens start after BOS and include the terminating EOS when
//! finished. `max_answer_len` caps that token count (EOS included), and is
//! further limited by the model's `max_seq_len`. The structural tokens
//! `<pad>`, `<bos>` and `<img>` are never generated.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageTensor;
use crate::error::{Error, Result};
use crate::model::{build_prompt, log_softmax_at, PromptMode, VisualFeatures, VlmModel};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, IMG, PAD};

pub const DEFAULT_MAX_ANSWER_LEN: usize = 8;
/// Largest `vocab_size^max_answer_len` that `exhaustive_argmax` will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    #[default]
    None,
    ByLength,
}

impl LengthNorm {
    fn apply(self, log_prob: f64, len: usize) -> f64 {
        match self {
            LengthNorm::None => log_prob,
            LengthNorm::ByLength => log_prob / len.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn answer(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Whether decoding may emit `t`.
pub fn is_generable(t: TokenId) -> bool {
    !matches!(t, PAD | BOS | IMG)
}

/// An encoded image plus the prompt, ready for repeated decoding.
pub struct Query<'m> {
    model: &'m VlmModel<f32>,
    features: VisualFeatures<f32>,
    prompt: Vec<TokenId>,
}

impl<'m> Query<'m> {
    pub fn new(
        model: &'m VlmModel<f32>,
        vocab: &Vocabulary,
        image: &ImageTensor,
        question: &str,
        mode: PromptMode,
    ) -> Result<Self> {
        Ok(Self {
            model,
            features: model.encode_image(image)?,
            prompt: build_prompt(vocab, question, mode),
        })
    }

    pub fn from_parts(model: &'m VlmModel<f32>, features: VisualFeatures<f32>, prompt: Vec<TokenId>) -> Self {
        Self {
            model,
            features,
            prompt,
        }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn model(&self) -> &VlmModel<f32> {
        self.model
    }

    /// Longest hypothesis (EOS included) that fits in the decoder window.
    pub fn effective_cap(&self, max_answer_len: usize) -> Result<usize> {
        let max_seq = self.model.config().max_seq_len;
        let room = max_seq.saturating_sub(self.prompt.len() + 1);
        if room == 0 {
            return Err(Error::SequenceTooLong {
                len: self.prompt.len() + 2,
                max: max_seq,
            });
        }
        Ok(max_answer_len.min(room))
    }

    /// Log-probabilities of every next token after `prompt ++ BOS ++ answer`.
    pub fn next_log_probs(&self, answer: &[TokenId]) -> Result<Vec<f64>> {
        let prefix: Vec<TokenId> = self
            .prompt
            .iter()
            .copied()
            .chain(std::iter::once(BOS))
            .chain(answer.iter().copied())
            .collect();
        let logits = self.model.decode_step(&self.features, &prefix)?;
        Ok((0..logits.len()).map(|t| log_softmax_at(&logits, t)).collect())
    }

    /// Σ log p(answer ++ EOS), teacher-forced in one pass.
    pub fn score(&self, answer_ids: &[TokenId]) -> Result<f64> {
        self.model.sequence_log_prob_with(&self.features, &self.prompt, answer_ids)
    }

    /// Teacher-forced log-probability of a hypothesis: with the EOS term when
    /// finished, without it otherwise.
    pub fn rescore(&self, h: &Hypothesis) -> Result<f64> {
        let answer = h.answer();
        let per_token = self
            .model
            .teacher_forced_log_probs(&self.features, &self.prompt, answer)?;
        let keep = if h.finished { per_token.len() } else { answer.len() };
        Ok(per_token[..keep].iter().sum())
    }
}

/// Repeated argmax (ties to the lowest id) until EOS or the length cap.
pub fn greedy_decode(q: &Query, max_answer_len: usize) -> Result<Hypothesis> {
    let cap = q.effective_cap(max_answer_len)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < cap {
        let lp = q.next_log_probs(&h.tokens)?;
        let mut best = EOS as usize;
        for (t, &v) in lp.iter().enumerate() {
            if is_generable(t as TokenId) && (v > lp[best] || (v == lp[best] && t < best)) {
                best = t;
            }
        }
        h.tokens.push(best as TokenId);
        h.log_prob += lp[best];
        if best as TokenId == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub hypothesis: Hypothesis,
    /// Selection score: `log_prob`, or `log_prob / len` under [`LengthNorm::ByLength`].
    pub score: f64,
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// Beam search with a completed pool. Every live hypothesis is expanded over
/// the full vocabulary and the top `k` candidates by accumulated log-prob are
/// kept; those ending in EOS leave the beam. The winner is the best completed
/// hypothesis under `norm` (the best live one if none completed).
pub fn beam_search(q: &Query, k: usize, max_answer_len: usize, norm: LengthNorm) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::BadBeamWidth);
    }
    let cap = q.effective_cap(max_answer_len)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..cap {
        // (total, step log-prob, parent, token)
        let mut cands: Vec<(f64, f64, usize, TokenId)> = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            for (t, lp) in q.next_log_probs(&h.tokens)?.into_iter().enumerate() {
                if is_generable(t as TokenId) {
                    cands.push((h.log_prob + lp, lp, pi, t as TokenId));
                }
            }
        }
        // Parents all have the same length, so comparing (parent tokens, token)
        // is the lexicographic order of the extended sequences. A sibling with
        // the larger step log-prob wins an exact tie in the rounded total, so
        // k=1 always follows the per-step argmax.
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| if a.2 == b.2 { b.1.total_cmp(&a.1) } else { Ordering::Equal })
                .then_with(|| live[a.2].tokens.cmp(&live[b.2].tokens))
                .then_with(|| a.3.cmp(&b.3))
        });
        cands.truncate(k);
        let mut next = Vec::with_capacity(cands.len());
        for (total, _, parent, tok) in cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: total,
                finished: tok == EOS,
            };
            if h.finished {
                completed.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let pool = if completed.is_empty() { live } else { completed };
    let best = pool
        .into_iter()
        .map(|h| (norm.apply(h.log_prob, h.tokens.len()), h))
        .min_by(|(sa, a), (sb, b)| rank(*sa, &a.tokens, *sb, &b.tokens))
        .expect("beam is never empty");
    Ok(BeamResult {
        score: best.0,
        hypothesis: best.1,
    })
}

/// Exact argmax of Σ log p over all EOS-terminated sequences of at most
/// `max_answer_len` tokens; ties go to the lexicographically smallest.
pub fn exhaustive_argmax(q: &Query, max_answer_len: usize) -> Result<Hypothesis> {
    let v = q.model().config().vocab_size as u128;
    let size = v.checked_pow(max_answer_len as u32).unwrap_or(u128::MAX);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchSpaceTooLarge { size });
    }
    let cap = q.effective_cap(max_answer_len)?;
    let mut best: Option<Hypothesis> = None;
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let next = q.next_log_probs(&prefix)?;
        for (t, step) in next.into_iter().enumerate() {
            if !is_generable(t as TokenId) {
                continue;
            }
            let mut tokens = prefix.clone();
            tokens.push(t as TokenId);
            let total = lp + step;
            if t as TokenId == EOS {
                let better = best
                    .as_ref()
                    .is_none_or(|b| rank(total, &tokens, b.log_prob, &b.tokens) == Ordering::Less);
                if better {
                    best = Some(Hypothesis {
                        tokens,
                        log_prob: total,
                        finished: true,
                    });
                }
            } else if tokens.len() < cap {
                stack.push((tokens, total));
            }
        }
    }
    Ok(best.expect("EOS is a candidate at every depth"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChoiceScores {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Scores each candidate answer by its sequence log-probability (divided by
/// the number of scored tokens, EOS included, under `ByLength`); ties go to
/// the lowest index.
pub fn score_choices<S: AsRef<str>>(q: &Query, vocab: &Vocabulary, choices: &[S], norm: LengthNorm) -> Result<ChoiceScores> {
    if choices.is_empty() {
        return Err(Error::EmptyChoices);
    }
    let mut scores = Vec::with_capacity(choices.len());
    for c in choices {
        let ids = vocab.encode(c.as_ref());
        scores.push(norm.apply(q.score(&ids)?, ids.len() + 1));
    }
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(ChoiceScores { index, scores })
}
