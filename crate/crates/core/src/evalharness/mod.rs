//! Exact-match evaluation, multi-seed ablations and breakdown reports.

mod ablation;
mod report;
pub mod stubs;

pub use ablation::{run_ablation, AblationCell, AblationSpec, AblationTable, VariantSpec, VariantSummary};
pub use report::{accuracy_over_depths, depth_and_type_report, render_markdown_report, Band, ComparisonTables};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{direct_infer, self_question_infer, InferenceTrace, LanguageModel};
use crate::model::vocab::SPECIALS;
use crate::model::Vocabulary;
use crate::taskgen::grammar::oracle_answer_in_chain;
use crate::taskgen::{AnswerType, AugmentedExample, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    SelfQuestion,
    Direct,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::SelfQuestion => "self_question",
            EvalMode::Direct => "direct",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "self_question" => Ok(EvalMode::SelfQuestion),
            "direct" => Ok(EvalMode::Direct),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected self_question or direct)"
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Drops structural markers and re-splits on whitespace.
pub fn normalize<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| t.as_ref().split_whitespace())
        .filter(|w| !SPECIALS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Exact-match rate after normalization.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[Vec<S>], golds: &[Vec<T>]) -> Result<f64> {
    if predictions.is_empty() && golds.is_empty() {
        return Err(Error::EmptyEval);
    }
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p) == normalize(g))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub overall_accuracy: f64,
    pub by_depth: BTreeMap<usize, f64>,
    pub by_answer_type: BTreeMap<AnswerType, f64>,
    pub depth_counts: BTreeMap<usize, usize>,
    pub type_counts: BTreeMap<AnswerType, usize>,
    /// Generated sub-answers that match the oracle on the generated sub-question.
    pub chain_step_accuracy: f64,
    pub chain_steps_scored: usize,
    pub well_formed_rate: f64,
    pub n_examples: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Checks rate bounds and that both breakdowns re-aggregate to the overall accuracy.
    pub fn validate(&self) -> Result<()> {
        let rates = [self.overall_accuracy, self.chain_step_accuracy, self.well_formed_rate];
        let all = rates
            .iter()
            .chain(self.by_depth.values())
            .chain(self.by_answer_type.values());
        if all.into_iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Validation("rate outside [0, 1]".into()));
        }
        let check = |name: &str, weighted: f64, total: usize| {
            if total != self.n_examples {
                return Err(Error::Validation(format!(
                    "{name} counts sum to {total}, not {}",
                    self.n_examples
                )));
            }
            if (weighted / total as f64 - self.overall_accuracy).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "{name} breakdown does not aggregate to overall accuracy"
                )));
            }
            Ok(())
        };
        let depth_w: f64 = self.by_depth.iter().map(|(k, a)| a * self.depth_counts[k] as f64).sum();
        check("depth", depth_w, self.depth_counts.values().sum())?;
        let type_w: f64 = self
            .by_answer_type
            .iter()
            .map(|(k, a)| a * self.type_counts[k] as f64)
            .sum();
        check("answer-type", type_w, self.type_counts.values().sum())
    }
}

/// Per-example outcome in the trace dump format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub sub_questions: Vec<String>,
    pub sub_answers: Vec<String>,
    pub final_answer: String,
    pub well_formed: bool,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub traces: Vec<TraceRecord>,
}

struct Scored {
    record: TraceRecord,
    depth: usize,
    answer_type: AnswerType,
    steps_scored: usize,
    steps_correct: usize,
}

/// Model ids past the vocabulary (unused head rows) decode as `<unk>`.
fn words(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(UNKNOWN).to_string())
        .collect()
}

const UNKNOWN: &str = "<unk>";

fn score_example(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    example: &AugmentedExample,
    mode: EvalMode,
    k_max: usize,
) -> Result<Scored> {
    let question = vocab.encode(&example.question)?;
    let trace: InferenceTrace = match mode {
        EvalMode::SelfQuestion => self_question_infer(model, &example.image, &question, k_max)?,
        EvalMode::Direct => direct_infer(model, &example.image, &question)?,
    };
    let prediction = words(vocab, &trace.final_answer);
    let correct = normalize(&prediction) == normalize(&example.answer);

    let mut earlier: Vec<Vec<String>> = Vec::new();
    let (mut steps_scored, mut steps_correct) = (0, 0);
    let mut sub_questions = Vec::new();
    let mut sub_answers = Vec::new();
    for (q, a) in trace.sub_questions.iter().zip(&trace.sub_answers) {
        let (q, a) = (words(vocab, q), words(vocab, a));
        if let Ok(expected) = oracle_answer_in_chain(&example.scene, &earlier, &q) {
            steps_scored += 1;
            if expected == a {
                steps_correct += 1;
            }
        }
        sub_questions.push(q.join(" "));
        sub_answers.push(a.join(" "));
        earlier.push(a);
    }
    Ok(Scored {
        record: TraceRecord {
            id: example.id.clone(),
            sub_questions,
            sub_answers,
            final_answer: prediction.join(" "),
            well_formed: trace.well_formed,
            correct,
        },
        depth: example.depth,
        answer_type: example.answer_type,
        steps_scored,
        steps_correct,
    })
}

/// Runs `mode` inference over every example and aggregates the report.
pub fn evaluate(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    mode: EvalMode,
    k_max: usize,
    workers: usize,
    seed: u64,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyEval);
    }
    let examples = &dataset.examples;
    let scored: Vec<Scored> = if workers <= 1 {
        examples
            .iter()
            .map(|e| score_example(model, vocab, e, mode, k_max))
            .collect::<Result<_>>()?
    } else {
        let chunk = examples.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = examples
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|e| score_example(model, vocab, e, mode, k_max))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(examples.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };

    let n = scored.len();
    let mut depth_hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut type_hits: BTreeMap<AnswerType, (usize, usize)> = AnswerType::ALL.iter().map(|&t| (t, (0, 0))).collect();
    let (mut hits, mut well_formed, mut steps_scored, mut steps_correct) = (0, 0, 0, 0);
    for s in &scored {
        let c = usize::from(s.record.correct);
        hits += c;
        well_formed += usize::from(s.record.well_formed);
        steps_scored += s.steps_scored;
        steps_correct += s.steps_correct;
        let d = depth_hits.entry(s.depth).or_insert((0, 0));
        d.0 += c;
        d.1 += 1;
        let t = type_hits.get_mut(&s.answer_type).expect("all types present");
        t.0 += c;
        t.1 += 1;
    }
    let rate = |h: usize, c: usize| if c == 0 { 0.0 } else { h as f64 / c as f64 };
    let report = MetricsReport {
        mode,
        overall_accuracy: rate(hits, n),
        by_depth: depth_hits.iter().map(|(&k, &(h, c))| (k, rate(h, c))).collect(),
        by_answer_type: type_hits.iter().map(|(&k, &(h, c))| (k, rate(h, c))).collect(),
        depth_counts: depth_hits.iter().map(|(&k, &(_, c))| (k, c)).collect(),
        type_counts: type_hits.iter().map(|(&k, &(_, c))| (k, c)).collect(),
        chain_step_accuracy: rate(steps_correct, steps_scored),
        chain_steps_scored: steps_scored,
        well_formed_rate: rate(well_formed, n),
        n_examples: n,
        seed,
    };
    Ok(Evaluation {
        report,
        traces: scored.into_iter().map(|s| s.record).collect(),
    })
}
