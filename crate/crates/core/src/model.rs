//! Vision-language model: a patch transformer encoder over the multispectral
//! image and a causal transformer decoder with cross-attention.
//!
//! The pooled visual vector fills the `<img>` slot of the prompt through a
//! learned projection; the full patch sequence feeds every decoder
//! cross-attention layer. Blocks are pre-layer-norm with learned positional
//! embeddings and an untied output projection.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageDims, ImageTensor, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Objective, Real, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, IMG, PAD};

const LN_EPS: f64 = 1e-5;

/// Words of the finetuning template around the image slot.
pub const TEMPLATE_PREFIX: &str = "given the image features";
pub const TEMPLATE_INFIX: &str = "answer the question:";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub image: ImageDims,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            patch_size: 4,
            max_seq_len: 48,
            vocab_size,
            image: ImageDims::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0
            || !self.image.height.is_multiple_of(self.patch_size)
            || !self.image.width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image.height, self.image.width, self.patch_size
            ));
        }
        if self.image.channels == 0 || self.d_ff == 0 || self.max_seq_len < 2 {
            return bad("channels, d_ff must be positive and max_seq_len at least 2".into());
        }
        if self.vocab_size <= IMG as usize {
            return bad(format!("vocab_size {} leaves no room for the reserved ids", self.vocab_size));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image.height / self.patch_size) * (self.image.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image.channels
    }

    /// (name, shape) of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{w}"), vec![d, d]);
            }
            // no key bias: it shifts every score in a row equally and softmax ignores it
            for b in ["bq", "bv", "bo"] {
                push(format!("{p}.{b}"), vec![d]);
            }
        };
        let ln = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gain"), vec![d]);
            push(format!("{p}.bias"), vec![d]);
        };
        let ff = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.w1"), vec![d, f]);
            push(format!("{p}.b1"), vec![f]);
            push(format!("{p}.w2"), vec![f, d]);
            push(format!("{p}.b2"), vec![d]);
        };

        push("patch.weight".into(), vec![self.patch_dim(), d]);
        push("patch.bias".into(), vec![d]);
        push("enc.pos".into(), vec![self.num_patches(), d]);
        for l in 0..self.n_enc_layers {
            ln(&mut push, &format!("enc.{l}.ln1"));
            attn(&mut push, &format!("enc.{l}.attn"));
            ln(&mut push, &format!("enc.{l}.ln2"));
            ff(&mut push, &format!("enc.{l}.ff"));
        }
        ln(&mut push, "enc.ln_f");
        push("tok_emb".into(), vec![self.vocab_size, d]);
        push("dec.pos".into(), vec![self.max_seq_len, d]);
        push("img_proj.weight".into(), vec![d, d]);
        push("img_proj.bias".into(), vec![d]);
        for l in 0..self.n_dec_layers {
            ln(&mut push, &format!("dec.{l}.ln1"));
            attn(&mut push, &format!("dec.{l}.self"));
            ln(&mut push, &format!("dec.{l}.ln2"));
            attn(&mut push, &format!("dec.{l}.cross"));
            ln(&mut push, &format!("dec.{l}.ln3"));
            ff(&mut push, &format!("dec.{l}.ff"));
        }
        ln(&mut push, "dec.ln_f");
        push("out.weight".into(), vec![d, self.vocab_size]);
        push("out.bias".into(), vec![self.vocab_size]);
        out
    }
}

/// Vocabulary covering every question, answer and choice in `samples`, the
/// generator's full lexicon, and the prompt template words.
pub fn build_vocabulary(samples: &[Sample]) -> Result<Vocabulary> {
    let mut texts = crate::corpus::lexicon();
    texts.push(TEMPLATE_PREFIX.to_string());
    texts.push(TEMPLATE_INFIX.to_string());
    for s in samples {
        texts.push(s.question.clone());
        texts.push(s.answer.clone());
        texts.extend(s.choices.iter().flatten().cloned());
    }
    Vocabulary::build(&texts, 1)
}

/// Which conditioning prefix precedes the answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// `<img> question`
    Pretrain,
    /// `given the image features <img> answer the question: question`
    Finetune,
}

pub fn build_prompt(vocab: &Vocabulary, question: &str, mode: PromptMode) -> Vec<TokenId> {
    match mode {
        PromptMode::Pretrain => std::iter::once(IMG).chain(vocab.encode(question)).collect(),
        PromptMode::Finetune => {
            let mut p = vocab.encode(TEMPLATE_PREFIX);
            p.push(IMG);
            p.extend(vocab.encode(TEMPLATE_INFIX));
            p.extend(vocab.encode(question));
            p
        }
    }
}

/// Encoder output: the patch feature sequence and its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures<T = f32> {
    pub sequence: Tensor<T>,
    pub pooled: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlmModel<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.rsplit('.').next().is_some_and(|last| last.starts_with('b'))
}

impl VlmModel<f32> {
    /// Weights ~ U(±√(6/(fan_in+fan_out))), biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if is_bias(&name) {
                vec![0.0; n]
            } else {
                let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Self::from_parts(config, names, params)
    }
}

impl<T: Real> VlmModel<T> {
    pub fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != names.len() || names.len() != params.len() {
            return Err(Error::BadConfig(format!(
                "expected {} parameters, got {}",
                expected.len(),
                names.len()
            )));
        }
        for ((en, es), (n, p)) in expected.iter().zip(names.iter().zip(&params)) {
            if en != n || es.as_slice() != p.shape() {
                return Err(Error::BadConfig(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    p.shape()
                )));
            }
            if !p.all_finite() {
                return Err(Error::Numerical { op: format!("parameter {n}") });
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> VlmModel<U> {
        VlmModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// A graph-building session over this model's parameters.
    pub fn forward<'a>(&'a self, tape: &'a mut Tape<T>) -> Forward<'a, T> {
        Forward {
            model: self,
            tape,
            bound: vec![None; self.params.len()],
        }
    }

    /// Like [`forward`](Self::forward), with parameters already on the tape
    /// (one var per parameter, canonical order).
    pub fn forward_with<'a>(&'a self, tape: &'a mut Tape<T>, vars: &[Var]) -> Forward<'a, T> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        Forward {
            model: self,
            tape,
            bound: vars.iter().copied().map(Some).collect(),
        }
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Result<VisualFeatures<T>> {
        let mut tape = Tape::new();
        let mut fwd = self.forward(&mut tape);
        let (seq, pooled) = fwd.encode(image)?;
        Ok(VisualFeatures {
            sequence: tape.value(seq).clone(),
            pooled: tape.value(pooled).clone(),
        })
    }

    /// Next-token logits after `prefix` (prompt, BOS, answer so far).
    pub fn decode_step(&self, features: &VisualFeatures<T>, prefix: &[TokenId]) -> Result<Vec<T>> {
        if prefix.is_empty() {
            return Err(Error::shape("decode_step", "empty prefix"));
        }
        if prefix.len() >= self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: prefix.len(),
                max: self.config.max_seq_len - 1,
            });
        }
        let mut tape = Tape::new();
        let mut fwd = self.forward(&mut tape);
        let seq = fwd.tape.constant(features.sequence.clone())?;
        let pooled = fwd.tape.constant(features.pooled.clone())?;
        let hidden = fwd.decode_hidden(seq, pooled, prefix)?;
        let last = fwd.tape.gather_rows(hidden, &[prefix.len() - 1])?;
        let logits = fwd.project(last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Per-position next-token log-probabilities of a full teacher-forced pass.
    pub fn teacher_forced_log_probs(
        &self,
        features: &VisualFeatures<T>,
        prompt: &[TokenId],
        answer_ids: &[TokenId],
    ) -> Result<Vec<f64>> {
        let (inputs, targets) = teacher_forcing(prompt, answer_ids, self.config.max_seq_len)?;
        let mut tape = Tape::new();
        let mut fwd = self.forward(&mut tape);
        let seq = fwd.tape.constant(features.sequence.clone())?;
        let pooled = fwd.tape.constant(features.pooled.clone())?;
        let hidden = fwd.decode_hidden(seq, pooled, &inputs)?;
        let logits = fwd.project(hidden)?;
        let v = tape.value(logits);
        Ok((prompt.len()..targets.len())
            .map(|i| log_softmax_at(v.row(i), targets[i] as usize))
            .collect())
    }

    /// Σ log p(answer tokens, then EOS | image, prompt), teacher-forced.
    pub fn sequence_log_prob(
        &self,
        vocab: &Vocabulary,
        image: &ImageTensor,
        question: &str,
        answer_ids: &[TokenId],
        mode: PromptMode,
    ) -> Result<f64> {
        let features = self.encode_image(image)?;
        let prompt = build_prompt(vocab, question, mode);
        self.sequence_log_prob_with(&features, &prompt, answer_ids)
    }

    pub fn sequence_log_prob_with(
        &self,
        features: &VisualFeatures<T>,
        prompt: &[TokenId],
        answer_ids: &[TokenId],
    ) -> Result<f64> {
        Ok(self.teacher_forced_log_probs(features, prompt, answer_ids)?.iter().sum())
    }
}

/// `log softmax(row)[target]`, evaluated in f64.
pub fn log_softmax_at<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row[target].as_f64() - lse
}

/// Decoder inputs `prompt ++ BOS ++ answer` and next-token targets
/// `PAD… ++ answer ++ EOS` (PAD marks unsupervised positions).
pub fn teacher_forcing(
    prompt: &[TokenId],
    answer_ids: &[TokenId],
    max_seq_len: usize,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let total = prompt.len() + answer_ids.len() + 2;
    if total > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: max_seq_len,
        });
    }
    let inputs: Vec<TokenId> = prompt
        .iter()
        .copied()
        .chain(std::iter::once(BOS))
        .chain(answer_ids.iter().copied())
        .collect();
    let targets: Vec<TokenId> = std::iter::repeat_n(PAD, prompt.len())
        .chain(answer_ids.iter().copied())
        .chain(std::iter::once(EOS))
        .collect();
    Ok((inputs, targets))
}

/// Builds the model graph on a tape, binding each parameter to a leaf on first use.
pub struct Forward<'a, T: Real> {
    model: &'a VlmModel<T>,
    pub tape: &'a mut Tape<T>,
    bound: Vec<Option<Var>>,
}

impl<T: Real> Forward<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let idx = *self
            .model
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        match self.bound[idx] {
            Some(v) => Ok(v),
            None => {
                let v = self.tape.param(self.model.params[idx].clone())?;
                self.bound[idx] = Some(v);
                Ok(v)
            }
        }
    }

    /// Parameter vars bound so far, by parameter index.
    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(&mut self, query: Var, memory: Var, prefix: &str, causal: bool) -> Result<Var> {
        let cfg = &self.model.config;
        let (heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let q = self.linear(query, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let wk = self.p(&format!("{prefix}.wk"))?;
        let k = self.tape.matmul(memory, wk)?;
        let v = self.linear(memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh)?,
                    self.tape.slice_cols(k, h * dh, dh)?,
                    self.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scores = self.tape.scale(scores, scale)?;
            let weights = if causal {
                self.tape.causal_softmax(scores)?
            } else {
                self.tape.softmax(scores, 1)?
            };
            outs.push(self.tape.matmul(weights, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Patch sequence `P×d` and pooled `1×d` features.
    pub fn encode(&mut self, image: &ImageTensor) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        if image.dims() != cfg.image {
            return Err(Error::shape(
                "encode_image",
                format!("image {:?} vs configured {:?}", image.dims(), cfg.image),
            ));
        }
        let patches = self.tape.constant(image.patches::<T>(cfg.patch_size)?)?;
        let mut x = self.linear(patches, "patch.weight", "patch.bias")?;
        let pos = self.p("enc.pos")?;
        x = self.tape.add(x, pos)?;
        for l in 0..self.model.config.n_enc_layers {
            let h = self.ln(x, &format!("enc.{l}.ln1"))?;
            let h = self.attention(h, h, &format!("enc.{l}.attn"), false)?;
            x = self.tape.add(x, h)?;
            let h = self.ln(x, &format!("enc.{l}.ln2"))?;
            let h = self.feed_forward(h, &format!("enc.{l}.ff"))?;
            x = self.tape.add(x, h)?;
        }
        let seq = self.ln(x, "enc.ln_f")?;
        let pooled = self.tape.mean_rows(seq)?;
        Ok((seq, pooled))
    }

    /// Final decoder hidden states (after the last layer norm), one row per input token.
    pub fn decode_hidden(&mut self, seq: Var, pooled: Var, tokens: &[TokenId]) -> Result<Var> {
        let cfg = &self.model.config;
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = self.p("tok_emb")?;
        let mut x = self.tape.gather_rows(emb, &ids)?;
        let img_positions: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == IMG as usize)
            .map(|(i, _)| i)
            .collect();
        if !img_positions.is_empty() {
            let visual = self.linear(pooled, "img_proj.weight", "img_proj.bias")?;
            for i in img_positions {
                x = self.tape.set_row(x, i, visual)?;
            }
        }
        let pos_table = self.p("dec.pos")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.tape.gather_rows(pos_table, &positions)?;
        x = self.tape.add(x, pos)?;
        for l in 0..self.model.config.n_dec_layers {
            let h = self.ln(x, &format!("dec.{l}.ln1"))?;
            let h = self.attention(h, h, &format!("dec.{l}.self"), true)?;
            x = self.tape.add(x, h)?;
            let h = self.ln(x, &format!("dec.{l}.ln2"))?;
            let h = self.attention(h, seq, &format!("dec.{l}.cross"), false)?;
            x = self.tape.add(x, h)?;
            let h = self.ln(x, &format!("dec.{l}.ln3"))?;
            let h = self.feed_forward(h, &format!("dec.{l}.ff"))?;
            x = self.tape.add(x, h)?;
        }
        self.ln(x, "dec.ln_f")
    }

    /// Output projection to vocabulary logits.
    pub fn project(&mut self, hidden: Var) -> Result<Var> {
        self.linear(hidden, "out.weight", "out.bias")
    }

    /// Per-token mean NLL of `answer ++ EOS` after `prompt ++ BOS`.
    pub fn answer_loss(&mut self, image: &ImageTensor, prompt: &[TokenId], answer_ids: &[TokenId]) -> Result<Var> {
        let (seq, pooled) = self.encode(image)?;
        self.answer_loss_with(seq, pooled, prompt, answer_ids)
    }

    pub fn answer_loss_with(&mut self, seq: Var, pooled: Var, prompt: &[TokenId], answer_ids: &[TokenId]) -> Result<Var> {
        let (inputs, targets) = teacher_forcing(prompt, answer_ids, self.model.config.max_seq_len)?;
        let hidden = self.decode_hidden(seq, pooled, &inputs)?;
        let logits = self.project(hidden)?;
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        self.tape.cross_entropy(logits, &targets, PAD as usize)
    }
}

/// Mean answer loss over a fixed set of examples, as a function of all
/// model parameters (canonical order). Used for gradient checking.
pub struct LossObjective {
    skeleton: VlmModel<f64>,
    examples: Vec<(ImageTensor, Vec<TokenId>, Vec<TokenId>)>,
}

impl LossObjective {
    pub fn new<T: Real>(model: &VlmModel<T>, examples: Vec<(ImageTensor, Vec<TokenId>, Vec<TokenId>)>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            skeleton: model.cast(),
            examples,
        })
    }
}

impl Objective for LossObjective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let skeleton = self.skeleton.cast::<T>();
        let mut fwd = skeleton.forward_with(tape, params);
        let mut total = None;
        for (image, prompt, answer) in &self.examples {
            let l = fwd.answer_loss(image, prompt, answer)?;
            total = Some(match total {
                None => l,
                Some(t) => fwd.tape.add(t, l)?,
            });
        }
        let total = total.expect("non-empty");
        fwd.tape.scale(total, T::from_f64_lossy(1.0 / self.examples.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_scene, render_image, SceneConfig};

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            patch_size: 4,
            max_seq_len: 24,
            vocab_size: vocab,
            image: ImageDims {
                height: 8,
                width: 8,
                channels: 4,
            },
        }
    }

    fn image(seed: u64, dims: ImageDims) -> ImageTensor {
        let scene = generate_scene(seed, &SceneConfig { grid: 4, ..Default::default() }).unwrap();
        render_image(&scene, dims, 0.02, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = ModelConfig::new(30);
        let a = VlmModel::init(cfg.clone(), 3).unwrap();
        let b = VlmModel::init(cfg, 3).unwrap();
        assert_eq!(a, b);
        for (n, p) in a.names().iter().zip(a.params()) {
            if is_bias(n) {
                assert!(p.data().iter().all(|&v| v == 0.0), "{n}");
            } else if n.ends_with(".gain") {
                assert!(p.data().iter().all(|&v| v == 1.0), "{n}");
            } else {
                assert!(p.data().iter().any(|&v| v != 0.0), "{n}");
            }
        }
    }

    #[test]
    fn weights_within_xavier_limit() {
        let m = VlmModel::init(ModelConfig::new(30), 1).unwrap();
        let w = m.param("patch.weight").unwrap();
        let limit = (6.0f32 / (64.0 + 64.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn bad_head_split() {
        let mut cfg = ModelConfig::new(30);
        cfg.d_model = 63;
        assert!(matches!(VlmModel::init(cfg, 0), Err(Error::BadConfig(_))));
    }

    #[test]
    fn default_image_gives_64_patches() {
        let cfg = ModelConfig::new(30);
        let m = VlmModel::init(cfg.clone(), 0).unwrap();
        let img = image(1, cfg.image);
        let f = m.encode_image(&img).unwrap();
        assert_eq!(f.sequence.shape(), &[64, 64]);
        assert_eq!(f.pooled.shape(), &[1, 64]);
    }

    #[test]
    fn pooled_is_mean_of_sequence() {
        let cfg = tiny_config(12);
        let m = VlmModel::init(cfg.clone(), 2).unwrap();
        let f = m.encode_image(&image(4, cfg.image)).unwrap();
        let d = cfg.d_model;
        for j in 0..d {
            let mean: f64 = (0..f.sequence.rows()).map(|i| f.sequence.row(i)[j] as f64).sum::<f64>()
                / f.sequence.rows() as f64;
            assert!((mean - f.pooled.data()[j] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_image_dims() {
        let cfg = tiny_config(12);
        let m = VlmModel::init(cfg, 2).unwrap();
        let img = image(1, ImageDims::default());
        assert!(matches!(m.encode_image(&img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn prompt_modes() {
        let vocab = Vocabulary::build(&[TEMPLATE_PREFIX, TEMPLATE_INFIX, "is there water"], 1).unwrap();
        assert_eq!(build_prompt(&vocab, "", PromptMode::Pretrain), vec![IMG]);
        let p = build_prompt(&vocab, "is there water", PromptMode::Finetune);
        let q = vocab.encode("is there water");
        assert_eq!(&p[p.len() - 3..], &q[..]);
        assert_eq!(p[4], IMG);
        assert_eq!(&p[..4], &vocab.encode(TEMPLATE_PREFIX)[..]);
        let other = build_prompt(&vocab, "is there forest", PromptMode::Finetune);
        assert_eq!(&other[..8], &p[..8]);
    }

    #[test]
    fn decode_step_shape_and_length_limit() {
        let cfg = tiny_config(12);
        let m = VlmModel::init(cfg.clone(), 5).unwrap();
        let f = m.encode_image(&image(2, cfg.image)).unwrap();
        let logits = m.decode_step(&f, &[IMG, 5, BOS]).unwrap();
        assert_eq!(logits.len(), 12);
        let long = vec![5; cfg.max_seq_len];
        assert!(matches!(m.decode_step(&f, &long), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn forced_uniform_two_tokens() {
        let cfg = tiny_config(8);
        let mut m = VlmModel::init(cfg.clone(), 5).unwrap();
        m.param_mut("out.weight").unwrap().data_mut().fill(0.0);
        let bias = m.param_mut("out.bias").unwrap().data_mut();
        bias.fill(-1e4);
        bias[EOS as usize] = 0.0;
        bias[6] = 0.0;
        let vocab = Vocabulary::build(&["yes no water"], 1).unwrap();
        let lp = m
            .sequence_log_prob(&vocab, &image(3, cfg.image), "water", &[6], PromptMode::Pretrain)
            .unwrap();
        assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-6, "{lp}");
    }

    #[test]
    fn teacher_forcing_layout() {
        let (i, t) = teacher_forcing(&[IMG, 7], &[9, 10], 10).unwrap();
        assert_eq!(i, vec![IMG, 7, BOS, 9, 10]);
        assert_eq!(t, vec![PAD, PAD, 9, 10, EOS]);
        assert!(matches!(
            teacher_forcing(&[IMG; 8], &[9], 10),
            Err(Error::SequenceTooLong { len: 11, max: 10 })
        ));
    }
}
