//! `rsvqa`: data generation, two-stage training, evaluation, ablation,
//! single-question answering and gradient checking.
//!
//! Exit codes: 0 success, 1 other failure (including a failed gradient
//! check), 2 usage, 3 I/O or malformed input, 4 numerical, 5 checkpoint
//! format or version.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsvqa::corpus::{generate_split, read_dataset, DataConfig, Example, ImageDims, ImageTensor, SceneConfig};
use rsvqa::decoding::{beam_search, LengthNorm, Query};
use rsvqa::eval::{
    aggregate_human_eval, evaluate, read_human_eval_csv, render_ablation_table, run_ablation, AblationConfig,
    DecodeConfig,
};
use rsvqa::fsutil::{sha256_hex, write_atomic};
use rsvqa::model::{build_vocabulary, LossObjective, ModelConfig, PromptMode, VlmModel};
use rsvqa::tensor::{grad_check, GradCheckOptions, Precision};
use rsvqa::tokenizer::Vocabulary;
use rsvqa::training::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, Checkpoint, LossNorm, OptimizerKind, Stage,
    TrainConfig,
};
use rsvqa::{rng, Error};
use serde::Serialize;

use manifest::{now_ms, RunManifest, RUN_MANIFEST};

#[derive(Parser, Debug)]
#[command(name = "rsvqa", version, about = "Generative remote-sensing visual question answering")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test splits of the synthetic corpus.
    GenData(GenDataArgs),
    /// Domain-adaptive pretraining (image + question prompts).
    Pretrain(TrainArgs),
    /// Prompt-based finetuning; needs --init unless --from-scratch.
    Finetune(FinetuneArgs),
    /// Both objectives at once, weighted by --lambda1 and --lambda2.
    TrainJoint(JointArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and evaluate the full / w/o DAP / w/o PBF variants.
    Ablation(AblationArgs),
    /// Answer one question about one image.
    Answer(AnswerArgs),
    /// Compare backward-pass gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Aggregate human evaluation scores from a CSV file.
    HumanEval(HumanEvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Output directory; receives train/, val/ and test/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    train: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    val: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    test: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Land-cover grid size per scene.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    /// key=value or JSON file of flag defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 2)]
    n_enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_dec_layers: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 48)]
    max_seq_len: usize,
}

impl ModelArgs {
    fn config(&self, vocab_size: usize, image: ImageDims) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            patch_size: self.patch_size,
            max_seq_len: self.max_seq_len,
            vocab_size,
            image,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    optimizer: String,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    grad_clip_norm: f64,
    #[arg(long, default_value = "per-token", value_parser = ["per-token", "per-sequence"])]
    loss_norm: String,
}

impl OptimArgs {
    fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            lr: self.lr,
            optimizer: if self.optimizer == "sgd" { OptimizerKind::Sgd } else { OptimizerKind::Adam },
            batch_size: self.batch_size as usize,
            steps: self.steps,
            seed: self.seed,
            grad_clip_norm: self.grad_clip_norm,
            loss_norm: if self.loss_norm == "per-sequence" {
                LossNorm::PerSequence
            } else {
                LossNorm::PerToken
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training split directory (contains samples.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from; a fresh model is initialized otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Finetune a freshly initialized model (skips pretraining).
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args, Debug, Serialize)]
struct JointArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Weight of the pretraining objective.
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    /// Weight of the finetuning objective.
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    /// Beam width.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    beam: u64,
    #[arg(long, default_value_t = 8)]
    max_answer_len: usize,
    /// Prompt template; auto picks pretrain prompts for pretrain-stage checkpoints.
    #[arg(long, default_value = "auto", value_parser = ["auto", "pretrain", "finetune"])]
    prompt_mode: String,
    /// Divide beam scores by hypothesis length.
    #[arg(long)]
    length_norm: bool,
}

impl DecodeArgs {
    fn prompt_mode(&self, stage: Option<Stage>) -> PromptMode {
        match (self.prompt_mode.as_str(), stage) {
            ("pretrain", _) | ("auto", Some(Stage::Pretrain)) => PromptMode::Pretrain,
            _ => PromptMode::Finetune,
        }
    }

    fn config(&self, stage: Option<Stage>) -> DecodeConfig {
        DecodeConfig {
            beam_width: self.beam as usize,
            max_answer_len: self.max_answer_len,
            prompt_mode: self.prompt_mode(stage),
            beam_norm: if self.length_norm { LengthNorm::ByLength } else { LengthNorm::None },
            ..DecodeConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; the text table goes next to it with a .txt extension.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AblationArgs {
    /// Dataset root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "test")]
    eval_split: String,
    /// Steps per training phase (pretraining and finetuning each).
    #[arg(long, default_value_t = 500)]
    budget: usize,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Output directory for ablation.json and ablation.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AnswerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image file in the corpus tensor format.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates to check, spread over every parameter tensor.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value = "both", value_parser = ["f32", "f64", "both"])]
    precision: String,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Threshold for 32-bit analytic gradients.
    #[arg(long, default_value_t = 1e-3)]
    tol_f32: f64,
    /// Threshold for 64-bit analytic gradients.
    #[arg(long, default_value_t = 1e-5)]
    tol_f64: f64,
    /// Samples in the loss.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct HumanEvalArgs {
    /// CSV with header method,criterion,score,annotator,question_id.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Schema { .. } => 3,
        Error::Numerical { .. } | Error::Diverged { .. } => 4,
        Error::VersionMismatch { .. } | Error::CorruptManifest(_) => 5,
        Error::BadConfig(_) | Error::BothZero | Error::BadBeamWidth => 2,
        _ => 1,
    }
}

/// Split vocabulary from `vocab.txt` when present, else built from the samples.
fn split_vocab(dir: &Path, data: &[Example]) -> CliResult<Vocabulary> {
    let path = dir.join("vocab.txt");
    if path.exists() {
        return Ok(Vocabulary::load(&path)?);
    }
    let samples: Vec<_> = data.iter().map(|e| e.sample.clone()).collect();
    Ok(build_vocabulary(&samples)?)
}

fn load_examples(dir: &Path) -> CliResult<Vec<Example>> {
    let ds = read_dataset(dir)?;
    let ex = ds.examples()?;
    if ex.is_empty() {
        return Err(Failure::Core(Error::schema(dir.display().to_string(), "dataset has no samples")));
    }
    Ok(ex)
}

fn file_id(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn gen_data(a: &GenDataArgs) -> CliResult {
    let started = now_ms();
    let config = DataConfig {
        scene: SceneConfig {
            grid: a.grid,
            ..SceneConfig::default()
        },
        image: ImageDims {
            height: a.image_size,
            width: a.image_size,
            channels: 4,
        },
        noise_sigma: a.noise,
    };
    let splits: Vec<_> = [("train", a.train), ("val", a.val), ("test", a.test)]
        .into_iter()
        .map(|(name, n)| {
            generate_split(name, n as usize, rng::derive_seed(a.seed, &format!("data/{name}")), &config)
                .map(|s| (name, s))
        })
        .collect::<Result<_, _>>()?;
    let all: Vec<_> = splits.iter().flat_map(|(_, s)| s.samples.iter().cloned()).collect();
    let vocab = build_vocabulary(&all)?;
    for (name, split) in &splits {
        let dir = a.out.join(name);
        rsvqa::corpus::write_dataset(&split.samples, &split.images, &dir)?;
        vocab.save(&dir.join("vocab.txt"))?;
        eprintln!("{name}: {} samples, {} images", split.samples.len(), split.images.len());
    }
    let dirs: Vec<PathBuf> = splits.iter().map(|(n, _)| a.out.join(n)).collect();
    let dir_refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    RunManifest::new("gen-data", a, Some(a.seed), &[], started).finish(&dir_refs, &a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn run_training(name: &str, a: &TrainArgs, config: TrainConfig, init_required: bool, all: &impl Serialize) -> CliResult {
    let started = now_ms();
    let data = load_examples(&a.data)?;
    let (model, vocab) = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.model, ck.vocab)
        }
        None if init_required => {
            return Err(Failure::Usage(
                "finetune continues from a pretrained checkpoint (two-stage contract: pretrain, then finetune); \
                 pass --init CKPT, or --from-scratch to finetune a fresh model"
                    .into(),
            ))
        }
        None => {
            let vocab = split_vocab(&a.data, &data)?;
            let cfg = a.model.config(vocab.len(), data[0].image.dims());
            (VlmModel::init(cfg, a.optim.seed)?, vocab)
        }
    };
    let every = (config.steps / 20).max(1);
    let out = train(model, &vocab, &data, &config, |r| {
        if r.step % every == 0 || r.step == config.steps {
            eprintln!("{} step {:>5}  loss {:.6}", r.stage, r.step, r.loss);
        }
    })?;
    save_checkpoint(&out.checkpoint, &a.out)?;
    write_loss_csv(&out.log, &a.out.join("loss.csv"))?;
    if let Some(last) = out.log.last() {
        println!("final loss {:.6}", last.loss);
    }
    let mut inputs = vec![a.data.as_path()];
    if let Some(p) = &a.init {
        inputs.push(p);
    }
    RunManifest::new(name, all, Some(config.seed), &inputs, started).finish(&[&a.out], &a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult {
    let started = now_ms();
    let ck = load_checkpoint(&a.ckpt)?;
    let data = load_examples(&a.data)?;
    let decode = a.decode.config(ck.stage);
    let mut report = evaluate(&ck.model, &ck.vocab, &data, &decode)?;
    report.metadata.checkpoint = Some(file_id(&a.ckpt.join("weights.bin"))?);
    report.metadata.dataset = Some(file_id(&a.data.join(rsvqa::corpus::MANIFEST_FILE))?);
    report.metadata.seed = Some(ck.seed);
    write_atomic(&a.report, report.to_json().as_bytes())?;
    let label = a.ckpt.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned());
    let table = report.to_table(&label);
    let table_path = a.report.with_extension("txt");
    write_atomic(&table_path, table.as_bytes())?;
    print!("{table}");
    let dest = PathBuf::from(format!("{}.manifest.json", a.report.display()));
    RunManifest::new("eval", a, Some(ck.seed), &[&a.ckpt, &a.data], started).finish(&[&a.report, &table_path], &dest)?;
    Ok(())
}

fn ablation_cmd(a: &AblationArgs) -> CliResult {
    let started = now_ms();
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--seeds must be comma-separated integers, got {:?}", a.seeds)))?;
    if seeds.is_empty() {
        return Err(Failure::Usage("--seeds is empty".into()));
    }
    let train_dir = a.data.join(&a.train_split);
    let eval_dir = a.data.join(&a.eval_split);
    let train_data = load_examples(&train_dir)?;
    let eval_data = load_examples(&eval_dir)?;
    let vocab = split_vocab(&train_dir, &train_data)?;
    let config = AblationConfig {
        model: a.model.config(vocab.len(), train_data[0].image.dims()),
        train: TrainConfig {
            lr: a.lr,
            batch_size: a.batch_size as usize,
            ..TrainConfig::default()
        },
        pretrain_steps: a.budget,
        finetune_steps: a.budget,
        decode: a.decode.config(None),
    };
    let mut reports = Vec::new();
    for &seed in &seeds {
        eprintln!("ablation seed {seed}");
        reports.push(run_ablation(&vocab, &train_data, &eval_data, &config, seed)?);
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut json = serde_json::to_vec_pretty(&reports).expect("reports serialize");
    json.push(b'\n');
    write_atomic(&a.out.join("ablation.json"), &json)?;
    let table = render_ablation_table(&reports);
    write_atomic(&a.out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    RunManifest::new("ablation", a, None, &[&train_dir, &eval_dir], started).finish(&[&a.out], &a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn answer_cmd(a: &AnswerArgs) -> CliResult {
    let ck: Checkpoint = load_checkpoint(&a.ckpt)?;
    let image = ImageTensor::load(&a.image)?;
    let q = Query::new(&ck.model, &ck.vocab, &image, &a.question, a.decode.prompt_mode(ck.stage))?;
    let d = a.decode.config(ck.stage);
    let best = beam_search(&q, d.beam_width, d.max_answer_len, d.beam_norm)?;
    println!("{}\t{:.6}", ck.vocab.decode(best.hypothesis.answer())?, best.score);
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult {
    let image = ImageDims::default();
    let data_cfg = DataConfig {
        image,
        ..DataConfig::default()
    };
    let split = generate_split("gradcheck", a.batch.max(1), rng::derive_seed(a.seed, "data"), &data_cfg)?;
    let vocab = build_vocabulary(&split.samples)?;
    let model = VlmModel::init(a.model.config(vocab.len(), image), a.seed)?;
    let examples = split
        .examples()
        .into_iter()
        .map(|e| {
            let prompt = rsvqa::model::build_prompt(&vocab, &e.sample.question, PromptMode::Finetune);
            ((*e.image).clone(), prompt, vocab.encode(&e.sample.answer))
        })
        .collect();
    let objective = LossObjective::new(&model, examples)?;
    let params: Vec<_> = model.params().iter().map(|p| p.cast::<f64>()).collect();
    let runs: Vec<(Precision, f64)> = match a.precision.as_str() {
        "f32" => vec![(Precision::F32, a.tol_f32)],
        "f64" => vec![(Precision::F64, a.tol_f64)],
        _ => vec![(Precision::F32, a.tol_f32), (Precision::F64, a.tol_f64)],
    };
    let mut failed = Vec::new();
    for (precision, tol) in runs {
        let opts = GradCheckOptions {
            eps: a.eps,
            samples: Some(a.samples),
            seed: a.seed,
            precision,
        };
        let r = grad_check(&objective, &params, &opts)?;
        let worst = r
            .worst
            .map(|(t, c)| format!("{}[{c}]", model.names()[t]))
            .unwrap_or_default();
        let ok = r.max_rel_error < tol;
        println!(
            "precision={} checked={} tensors={}/{} max_rel_error={:.3e} threshold={tol:.0e} worst={worst} {}",
            serde_json::to_value(precision).expect("serializes").as_str().unwrap_or("?"),
            r.checked,
            r.tensors_covered,
            params.len(),
            r.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(format!("{precision:?} max relative error {:.3e} >= {tol:.0e}", r.max_rel_error));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

fn human_eval_cmd(a: &HumanEvalArgs) -> CliResult {
    let records = read_human_eval_csv(&a.input)?;
    print!("{}", aggregate_human_eval(&records)?.render());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_training("pretrain", a, a.optim.train_config(Stage::Pretrain), false, a),
        Command::Finetune(a) => run_training(
            "finetune",
            &a.train,
            a.train.optim.train_config(Stage::Finetune),
            !a.from_scratch,
            a,
        ),
        Command::TrainJoint(a) => {
            let cfg = TrainConfig {
                lambda1: a.lambda1,
                lambda2: a.lambda2,
                ..a.train.optim.train_config(Stage::Joint)
            };
            run_training("train-joint", &a.train, cfg, false, a)
        }
        Command::Eval(a) => eval_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
        Command::Answer(a) => answer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::HumanEval(a) => human_eval_cmd(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("gradient check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
