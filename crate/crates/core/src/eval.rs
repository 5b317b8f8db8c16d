//! Per-type metrics, evaluation reports, the ablation runner and human-score
//! aggregation.
//!
//! Metrics are fractions in [0, 1]; rendered tables show percentages with one
//! decimal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, QuestionType};
use crate::decoding::{beam_search, score_choices, LengthNorm, Query, DEFAULT_MAX_ANSWER_LEN};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PromptMode, VlmModel};
use crate::tokenizer::{normalize, Vocabulary};
use crate::training::{train, worker_threads, Stage, TrainConfig};

pub const F1_DEFINITION: &str =
    "macro-averaged token-multiset F1 over normalized answers; 1 when both sides are empty, 0 when only one is";

pub const METRIC_COLUMNS: [&str; 3] = ["Yes/No ACC (%)", "Multiple-Choice ACC (%)", "Open-Ended F1 (%)"];

fn check_lengths(pred: usize, gold: usize) -> Result<()> {
    if pred != gold {
        return Err(Error::LengthMismatch { pred, gold });
    }
    if pred == 0 {
        return Err(Error::EmptySet);
    }
    Ok(())
}

/// Exact match after normalization; anything but "yes"/"no" is wrong.
pub fn yesno_accuracy<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gold: &[G]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| {
            let p = normalize(p.as_ref());
            (p == "yes" || p == "no") && p == normalize(g.as_ref())
        })
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn mc_accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Token-multiset F1 of one pair of normalized answers.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn open_f1<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gold: &[G]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let total: f64 = pred.iter().zip(gold).map(|(p, g)| token_f1(p.as_ref(), g.as_ref())).sum();
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_answer_len: usize,
    pub prompt_mode: PromptMode,
    pub beam_norm: LengthNorm,
    pub choice_norm: LengthNorm,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 3,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            prompt_mode: PromptMode::Finetune,
            beam_norm: LengthNorm::None,
            choice_norm: LengthNorm::ByLength,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub yesno: usize,
    pub mc: usize,
    pub open: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub decode: DecodeConfig,
    pub f1_definition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question_type: QuestionType,
    pub prediction: String,
    pub gold: String,
}

/// A metric is `None` when its question type has no samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub yesno_acc: Option<f64>,
    pub mc_acc: Option<f64>,
    pub open_f1: Option<f64>,
    pub counts: TypeCounts,
    pub metadata: ReportMetadata,
    pub predictions: Vec<Prediction>,
}

impl MetricsReport {
    pub fn metrics(&self) -> [Option<f64>; 3] {
        [self.yesno_acc, self.mc_acc, self.open_f1]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self, label: &str) -> String {
        render_metrics_table("Method", &[(label.to_string(), self.metrics())])
    }
}

enum Answer {
    Text(String),
    Choice(usize, usize),
}

fn predict(model: &VlmModel, vocab: &Vocabulary, ex: &Example, config: &DecodeConfig) -> Result<Answer> {
    let s = &ex.sample;
    let q = Query::new(model, vocab, &ex.image, &s.question, config.prompt_mode)?;
    match s.question_type {
        QuestionType::Mc => {
            let choices = s.choices.as_deref().unwrap_or_default();
            let gold = s
                .gold_choice()
                .ok_or_else(|| Error::schema(&s.id, "answer is not among the choices"))?;
            let picked = score_choices(&q, vocab, choices, config.choice_norm)?;
            Ok(Answer::Choice(picked.index, gold))
        }
        _ => {
            let best = beam_search(&q, config.beam_width, config.max_answer_len, config.beam_norm)?;
            Ok(Answer::Text(vocab.decode(best.hypothesis.answer())?))
        }
    }
}

/// Decodes every sample (yes/no and open by beam search, multiple choice by
/// choice scoring) and reduces metrics in sample order.
pub fn evaluate(model: &VlmModel, vocab: &Vocabulary, data: &[Example], config: &DecodeConfig) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::BadConfig(format!("thread pool: {e}")))?;
    let answers: Vec<Answer> = pool.install(|| {
        data.par_iter()
            .map(|ex| predict(model, vocab, ex, config))
            .collect::<Result<Vec<_>>>()
    })?;

    let (mut yn_pred, mut yn_gold) = (Vec::new(), Vec::new());
    let (mut mc_pred, mut mc_gold) = (Vec::new(), Vec::new());
    let (mut op_pred, mut op_gold) = (Vec::new(), Vec::new());
    let mut predictions = Vec::with_capacity(data.len());
    for (ex, a) in data.iter().zip(answers) {
        let s = &ex.sample;
        let text = match a {
            Answer::Choice(idx, gold) => {
                mc_pred.push(idx);
                mc_gold.push(gold);
                s.choices.as_ref().map(|c| c[idx].clone()).unwrap_or_default()
            }
            Answer::Text(t) => {
                if s.question_type == QuestionType::Yesno {
                    yn_pred.push(t.clone());
                    yn_gold.push(s.answer.clone());
                } else {
                    op_pred.push(t.clone());
                    op_gold.push(s.answer.clone());
                }
                t
            }
        };
        predictions.push(Prediction {
            id: s.id.clone(),
            question_type: s.question_type,
            prediction: text,
            gold: s.answer.clone(),
        });
    }
    let absent_if_empty = |r: Result<f64>| match r {
        Err(Error::EmptySet) => Ok(None),
        other => other.map(Some),
    };
    Ok(MetricsReport {
        yesno_acc: absent_if_empty(yesno_accuracy(&yn_pred, &yn_gold))?,
        mc_acc: absent_if_empty(mc_accuracy(&mc_pred, &mc_gold))?,
        open_f1: absent_if_empty(open_f1(&op_pred, &op_gold))?,
        counts: TypeCounts {
            yesno: yn_pred.len(),
            mc: mc_pred.len(),
            open: op_pred.len(),
        },
        metadata: ReportMetadata {
            checkpoint: None,
            dataset: None,
            seed: None,
            decode: config.clone(),
            f1_definition: F1_DEFINITION.to_string(),
        },
        predictions,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn render_table(first: &str, columns: &[&str], rows: &[(String, Vec<String>)]) -> String {
    let mut widths: Vec<usize> = std::iter::once(first.len()).chain(columns.iter().map(|c| c.len())).collect();
    for (label, cells) in rows {
        widths[0] = widths[0].max(label.len());
        for (w, c) in widths[1..].iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, label: &str, cells: &[String]| {
        let _ = write!(out, "{label:<w$}", w = widths[0]);
        for (c, w) in cells.iter().zip(&widths[1..]) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    };
    let header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
    line(&mut out, first, &header);
    let total = widths.iter().sum::<usize>() + 2 * columns.len();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (label, cells) in rows {
        line(&mut out, label, cells);
    }
    out
}

/// Aligned table with the three metric columns, one row per labelled report.
pub fn render_metrics_table(first_column: &str, rows: &[(String, [Option<f64>; 3])]) -> String {
    let rows: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(l, m)| (l.clone(), m.iter().map(|&v| pct(v)).collect()))
        .collect();
    render_table(first_column, &METRIC_COLUMNS, &rows)
}

/// Row labels of the ablation table, in display order.
pub const ABLATION_ROWS: [&str; 3] = ["w/o DAP", "w/o PBF", "Full"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// Shared optimizer settings; `stage` and `steps` are set per phase.
    pub train: TrainConfig,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub without_dap: MetricsReport,
    pub without_pbf: MetricsReport,
    pub full: MetricsReport,
}

impl AblationReport {
    /// Reports in [`ABLATION_ROWS`] order.
    pub fn rows(&self) -> [&MetricsReport; 3] {
        [&self.without_dap, &self.without_pbf, &self.full]
    }
}

/// Trains the three variants from one initialization and evaluates each on
/// `test`. The pretrained model is shared by "full" (which continues with
/// finetuning) and "w/o PBF" (which is evaluated with pretraining prompts).
pub fn run_ablation(
    vocab: &Vocabulary,
    train_data: &[Example],
    test: &[Example],
    config: &AblationConfig,
    seed: u64,
) -> Result<AblationReport> {
    let init = VlmModel::init(config.model.clone(), seed)?;
    let phase = |model: VlmModel, stage: Stage, steps: usize| -> Result<VlmModel> {
        let cfg = TrainConfig {
            stage,
            steps,
            seed,
            ..config.train.clone()
        };
        Ok(train(model, vocab, train_data, &cfg, |_| {})?.checkpoint.model)
    };
    let pretrained = phase(init.clone(), Stage::Pretrain, config.pretrain_steps)?;
    let full = phase(pretrained.clone(), Stage::Finetune, config.finetune_steps)?;
    let scratch = phase(init, Stage::Finetune, config.finetune_steps)?;

    let finetune_decode = DecodeConfig {
        prompt_mode: PromptMode::Finetune,
        ..config.decode.clone()
    };
    let pretrain_decode = DecodeConfig {
        prompt_mode: PromptMode::Pretrain,
        ..config.decode.clone()
    };
    let tag = |mut r: MetricsReport| {
        r.metadata.seed = Some(seed);
        r
    };
    Ok(AblationReport {
        seed,
        without_dap: tag(evaluate(&scratch, vocab, test, &finetune_decode)?),
        without_pbf: tag(evaluate(&pretrained, vocab, test, &pretrain_decode)?),
        full: tag(evaluate(&full, vocab, test, &finetune_decode)?),
    })
}

/// Median of the present values; the mean of the two middle values for an
/// even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-row, per-metric medians over seeds, in [`ABLATION_ROWS`] order.
pub fn ablation_medians(reports: &[AblationReport]) -> [[Option<f64>; 3]; 3] {
    let mut out = [[None; 3]; 3];
    for (row, slot) in out.iter_mut().enumerate() {
        for (m, cell) in slot.iter_mut().enumerate() {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.rows()[row].metrics()[m]).collect();
            *cell = median(&vals);
        }
    }
    out
}

pub fn render_ablation_table(reports: &[AblationReport]) -> String {
    let medians = ablation_medians(reports);
    let rows: Vec<(String, [Option<f64>; 3])> = ABLATION_ROWS
        .iter()
        .zip(medians)
        .map(|(l, m)| (l.to_string(), m))
        .collect();
    render_metrics_table("Configuration", &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Correctness,
    Relevance,
    LanguageQuality,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Correctness, Criterion::Relevance, Criterion::LanguageQuality];

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "correctness" => Some(Criterion::Correctness),
            "relevance" => Some(Criterion::Relevance),
            "language_quality" => Some(Criterion::LanguageQuality),
            _ => None,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Criterion::Correctness => "Correctness",
            Criterion::Relevance => "Relevance",
            Criterion::LanguageQuality => "Language Quality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvalRecord {
    pub method: String,
    pub criterion: Criterion,
    pub score: u8,
    pub annotator: String,
    pub question_id: String,
}

pub const HUMAN_EVAL_HEADER: [&str; 5] = ["method", "criterion", "score", "annotator", "question_id"];

/// Parses the human-score CSV; the header must be exactly [`HUMAN_EVAL_HEADER`].
pub fn parse_human_eval_csv(text: &str, origin: &str) -> Result<Vec<HumanEvalRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::schema(origin, e.to_string()))?
        .clone();
    if header.iter().ne(HUMAN_EVAL_HEADER) {
        return Err(Error::schema(
            origin,
            format!("header must be {}", HUMAN_EVAL_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let loc = format!("{origin} record {}", i + 1);
        let row = row.map_err(|e| Error::schema(&loc, e.to_string()))?;
        let criterion = Criterion::from_name(&row[1])
            .ok_or_else(|| Error::schema(&loc, format!("unknown criterion {:?}", &row[1])))?;
        let score: u8 = row[2]
            .parse()
            .map_err(|_| Error::schema(&loc, format!("score {:?} is not an integer 1-5", &row[2])))?;
        let rec = HumanEvalRecord {
            method: row[0].to_string(),
            criterion,
            score,
            annotator: row[3].to_string(),
            question_id: row[4].to_string(),
        };
        validate_record(&rec, &loc)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_human_eval_csv(path: &Path) -> Result<Vec<HumanEvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_human_eval_csv(&text, &path.display().to_string())
}

fn validate_record(r: &HumanEvalRecord, loc: &str) -> Result<()> {
    if !(1..=5).contains(&r.score) {
        return Err(Error::schema(loc, format!("score {} outside 1..5", r.score)));
    }
    if r.method.is_empty() {
        return Err(Error::schema(loc, "empty method"));
    }
    Ok(())
}

/// Means per (method, criterion), rounded to one decimal. Methods keep their
/// order of first appearance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HumanEvalTable {
    pub rows: Vec<(String, [Option<f64>; 3])>,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn aggregate_human_eval(records: &[HumanEvalRecord]) -> Result<HumanEvalTable> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: HashMap<(String, Criterion), (u64, u64)> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        validate_record(r, &format!("record {}", i + 1))?;
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        let e = sums.entry((r.method.clone(), r.criterion)).or_default();
        e.0 += r.score as u64;
        e.1 += 1;
    }
    let rows = order
        .into_iter()
        .map(|m| {
            let cells = Criterion::ALL.map(|c| sums.get(&(m.clone(), c)).map(|&(s, n)| round1(s as f64 / n as f64)));
            (m, cells)
        })
        .collect();
    Ok(HumanEvalTable { rows })
}

impl HumanEvalTable {
    pub fn render(&self) -> String {
        let columns = Criterion::ALL.map(Criterion::title);
        let rows: Vec<(String, Vec<String>)> = self
            .rows
            .iter()
            .map(|(m, cells)| {
                (
                    m.clone(),
                    cells
                        .iter()
                        .map(|c| c.map_or_else(|| "-".to_string(), |v| format!("{v:.1}")))
                        .collect(),
                )
            })
            .collect();
        render_table("Method", &columns, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(yesno_accuracy(&["yes", "no", "yes", "no"], &["yes", "no", "no", "no"]).unwrap(), 0.75);
        assert_eq!(yesno_accuracy(&["Yes."], &["yes"]).unwrap(), 1.0);
        assert_eq!(yesno_accuracy(&["maybe"], &["maybe"]).unwrap(), 0.0);
        assert_eq!(mc_accuracy(&[0, 0, 0], &[0, 1, 2]).unwrap(), 1.0 / 3.0);
        assert!(matches!(mc_accuracy(&[], &[]), Err(Error::EmptySet)));
        assert!(matches!(mc_accuracy(&[1], &[1, 2]), Err(Error::LengthMismatch { .. })));
        assert_eq!(open_f1(&["water body"], &["water"]).unwrap(), 2.0 / 3.0);
        assert_eq!(open_f1(&[""], &["ten"]).unwrap(), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
    }

    #[test]
    fn multiset_overlap_counts_repeats_once() {
        assert_eq!(token_f1("a a", "a"), 2.0 / 3.0);
    }

    #[test]
    fn human_eval_rounding() {
        let rec = |s| HumanEvalRecord {
            method: "m".into(),
            criterion: Criterion::Relevance,
            score: s,
            annotator: "a".into(),
            question_id: "q".into(),
        };
        let t = aggregate_human_eval(&[rec(4), rec(5), rec(4)]).unwrap();
        assert_eq!(t.rows[0].1, [None, Some(4.3), None]);
        assert!(matches!(aggregate_human_eval(&[rec(6)]), Err(Error::Schema { .. })));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 4.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
