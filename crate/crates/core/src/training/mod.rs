//! Two-stage optimization (domain-adaptive pretraining, then prompt-based
//! finetuning) and the optional joint objective, plus checkpointing.

mod checkpoint;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{build_prompt, PromptMode, VlmModel};
use crate::rng;
use crate::tensor::{Tape, Var};
use crate::tokenizer::{TokenId, Vocabulary};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Joint => "joint",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Stage::Pretrain, Stage::Finetune, Stage::Joint]
            .into_iter()
            .find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// How a sample's answer log-likelihood is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Mean negative log-probability over answer tokens and EOS.
    PerToken,
    /// Negative log-probability of the whole answer sequence.
    PerSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Global L2 clipping threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub loss_norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 500,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            grad_clip_norm: 1.0,
            loss_norm: LossNorm::PerToken,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm {}", self.grad_clip_norm));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.stage == Stage::Joint {
            check_lambdas(self.lambda1, self.lambda2)?;
        }
        Ok(())
    }
}

fn check_lambdas(l1: f64, l2: f64) -> Result<()> {
    if !(l1.is_finite() && l2.is_finite() && l1 >= 0.0 && l2 >= 0.0) {
        return Err(Error::BadConfig(format!("lambdas must be non-negative, got {l1}, {l2}")));
    }
    if l1 == 0.0 && l2 == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(())
}

/// A sample with both prompt variants tokenized.
#[derive(Clone, Debug)]
struct Prepared {
    image: Arc<ImageTensor>,
    pretrain: Vec<TokenId>,
    finetune: Vec<TokenId>,
    answer: Vec<TokenId>,
}

impl Prepared {
    fn new(vocab: &Vocabulary, ex: &Example) -> Self {
        Self {
            image: ex.image.clone(),
            pretrain: build_prompt(vocab, &ex.sample.question, PromptMode::Pretrain),
            finetune: build_prompt(vocab, &ex.sample.question, PromptMode::Finetune),
            answer: vocab.encode(&ex.sample.answer),
        }
    }

    fn prompt(&self, mode: PromptMode) -> &[TokenId] {
        match mode {
            PromptMode::Pretrain => &self.pretrain,
            PromptMode::Finetune => &self.finetune,
        }
    }
}

/// Weighted sum of per-mode answer losses for one sample, sharing one image encoding.
fn sample_objective(
    model: &VlmModel<f32>,
    tape: &mut Tape<f32>,
    vars: Option<&[Var]>,
    s: &Prepared,
    terms: &[(PromptMode, f64)],
    norm: LossNorm,
) -> Result<Var> {
    let mut fwd = match vars {
        Some(v) => model.forward_with(tape, v),
        None => model.forward(tape),
    };
    let (seq, pooled) = fwd.encode(&s.image)?;
    let mut total: Option<Var> = None;
    for &(mode, weight) in terms {
        let ce = fwd.answer_loss_with(seq, pooled, s.prompt(mode), &s.answer)?;
        let scale = match norm {
            LossNorm::PerToken => weight,
            LossNorm::PerSequence => weight * (s.answer.len() + 1) as f64,
        };
        let term = fwd.tape.scale(ce, scale as f32)?;
        total = Some(match total {
            None => term,
            Some(t) => fwd.tape.add(t, term)?,
        });
    }
    total.ok_or(Error::EmptyBatch)
}

fn sample_value(model: &VlmModel<f32>, vocab: &Vocabulary, ex: &Example, mode: PromptMode, norm: LossNorm) -> Result<f64> {
    let s = Prepared::new(vocab, ex);
    let mut tape = Tape::new();
    let loss = sample_objective(model, &mut tape, None, &s, &[(mode, 1.0)], norm)?;
    Ok(tape.value(loss).item() as f64)
}

/// Mean over the batch of each sample's normalized negative answer log-likelihood.
pub fn batch_loss(model: &VlmModel<f32>, vocab: &Vocabulary, batch: &[Example], mode: PromptMode, norm: LossNorm) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        total += sample_value(model, vocab, ex, mode, norm)?;
    }
    Ok(total / batch.len() as f64)
}

/// Domain-adaptive pretraining loss: prompts are `<img> question`.
pub fn pretrain_loss(model: &VlmModel<f32>, vocab: &Vocabulary, batch: &[Example], norm: LossNorm) -> Result<f64> {
    batch_loss(model, vocab, batch, PromptMode::Pretrain, norm)
}

/// Prompt-based finetuning loss: prompts use the fixed template.
pub fn finetune_loss(model: &VlmModel<f32>, vocab: &Vocabulary, batch: &[Example], norm: LossNorm) -> Result<f64> {
    batch_loss(model, vocab, batch, PromptMode::Finetune, norm)
}

/// `λ1·pretrain_loss(pre_batch) + λ2·finetune_loss(fin_batch)`.
pub fn total_loss(
    model: &VlmModel<f32>,
    vocab: &Vocabulary,
    pre_batch: &[Example],
    fin_batch: &[Example],
    lambda1: f64,
    lambda2: f64,
    norm: LossNorm,
) -> Result<f64> {
    check_lambdas(lambda1, lambda2)?;
    let pre = pretrain_loss(model, vocab, pre_batch, norm)?;
    let fin = finetune_loss(model, vocab, fin_batch, norm)?;
    Ok(lambda1 * pre + lambda2 * fin)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "step,stage,loss").expect("write to vec");
    for r in records {
        writeln!(buf, "{},{},{}", r.step, r.stage, r.loss).expect("write to vec");
    }
    crate::fsutil::write_atomic(path, &buf)
}

/// Worker count for per-sample gradients: `RSVQA_THREADS` if set, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("RSVQA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, model: &VlmModel<f32>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        let adam = cfg.optimizer == OptimizerKind::Adam;
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: if adam { zeros() } else { Vec::new() },
            v: if adam { zeros() } else { Vec::new() },
        }
    }

    fn step(&mut self, model: &mut VlmModel<f32>, grads: &[Vec<f64>]) {
        self.t += 1;
        let (bc1, bc2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (i, (p, g)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in data.iter_mut().zip(g) {
                        *w = (*w as f64 - self.lr * g) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                        data[j] = (data[j] as f64 - self.lr * update) as f32;
                    }
                }
            }
        }
    }
}

/// Gradient of `Σ_i objective_i` with per-sample tapes, accumulated in index order.
fn batch_gradient(
    model: &VlmModel<f32>,
    batch: &[&Prepared],
    terms: &[(PromptMode, f64)],
    norm: LossNorm,
    pool: &rayon::ThreadPool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample = |s: &&Prepared| -> Result<(f64, Vec<Option<Vec<f32>>>)> {
        let mut tape = Tape::new();
        let vars = model
            .params()
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = sample_objective(model, &mut tape, Some(&vars), s, terms, norm)?;
        let value = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.take(v).map(|t| t.into_data())).collect()))
    };
    let results: Vec<Result<_>> = pool.install(|| batch.par_iter().map(per_sample).collect());

    let mut loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    for r in results {
        let (value, grads) = r?;
        loss += value;
        for (a, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g as f64);
            }
        }
    }
    Ok((loss, acc))
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Epoch-wise shuffled index batches drawn from one seeded stream.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Runs `config.steps` optimizer updates. The per-step callback sees each
/// logged loss as it is produced.
pub fn train(
    model: VlmModel<f32>,
    vocab: &Vocabulary,
    data: &[Example],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::BadConfig(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let prepared: Vec<Prepared> = data.iter().map(|ex| Prepared::new(vocab, ex)).collect();
    let terms: Vec<(PromptMode, f64)> = match config.stage {
        Stage::Pretrain => vec![(PromptMode::Pretrain, 1.0)],
        Stage::Finetune => vec![(PromptMode::Finetune, 1.0)],
        Stage::Joint => [(PromptMode::Pretrain, config.lambda1), (PromptMode::Finetune, config.lambda2)]
            .into_iter()
            .filter(|&(_, l)| l > 0.0)
            .collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::BadConfig(format!("thread pool: {e}")))?;

    let mut model = model;
    let mut optimizer = Optimizer::new(config, &model);
    let mut batcher = Batcher::new(prepared.len(), config.batch_size, rng::stream(config.seed, "shuffle"));
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx = batcher.next();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &prepared[i]).collect();
        let weighted: Vec<(PromptMode, f64)> =
            terms.iter().map(|&(m, l)| (m, l / batch.len() as f64)).collect();
        let (loss, mut grads) = batch_gradient(&model, &batch, &weighted, config.loss_norm, &pool).map_err(|e| match e {
            Error::Numerical { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        clip_global_norm(&mut grads, config.grad_clip_norm);
        optimizer.step(&mut model, &grads);
        let record = LossRecord {
            step,
            stage: config.stage,
            loss,
        };
        on_step(&record);
        log.push(record);
    }
    if let Some(bad) = model.params().iter().position(|p| !p.all_finite()) {
        return Err(Error::Diverged {
            step: config.steps,
            detail: format!("parameter {} became non-finite", model.names()[bad]),
        });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            model,
            vocab: vocab.clone(),
            stage: Some(config.stage),
            step: config.steps as u64,
            seed: config.seed,
            rng: Some(RngState::capture(&batcher.rng)),
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_epoch_before_repeating() {
        let mut b = Batcher::new(10, 4, rng::stream(1, "shuffle"));
        let mut seen: Vec<usize> = b.next().into_iter().chain(b.next()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn batch_larger_than_data_is_clamped() {
        let mut b = Batcher::new(3, 16, rng::stream(1, "shuffle"));
        assert_eq!(b.next().len(), 3);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn lambda_validation() {
        assert!(matches!(check_lambdas(0.0, 0.0), Err(Error::BothZero)));
        assert!(check_lambdas(-1.0, 1.0).is_err());
        assert!(check_lambdas(0.0, 2.0).is_ok());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Pretrain, Stage::Finetune, Stage::Joint] {
            assert_eq!(Stage::from_name(s.as_str()), Some(s));
        }
    }
}
