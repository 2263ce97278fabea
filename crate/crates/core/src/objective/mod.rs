//! Supervised token layout for augmented examples and the three-term loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{BOS, EOS, FINAL, SUBA, SUBQ};
use crate::model::Vocabulary;
use crate::segment::Segment;
use crate::taskgen::AugmentedExample;
use crate::tensor::{Graph, Tensor, Var};

/// Token stream after the visual prefix, one segment label per token.
///
/// Logits row `t` predicts `token_ids[t + 1]`, and that prediction is charged
/// to the loss term named by `segments[t + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub example_id: String,
    pub token_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub num_steps: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    /// Target for each input row.
    pub fn targets(&self) -> &[usize] {
        &self.token_ids[1..]
    }

    /// Loss term for each input row.
    pub fn target_segments(&self) -> &[Segment] {
        &self.segments[1..]
    }

    /// Segment labels of the input rows, for strict conditioning.
    pub fn input_segments(&self) -> &[Segment] {
        &self.segments[..self.segments.len() - 1]
    }

    /// Number of tokens labeled with each segment.
    pub fn segment_counts(&self) -> BTreeMap<Segment, usize> {
        let mut counts = BTreeMap::new();
        for &s in &self.segments {
            *counts.entry(s).or_insert(0) += 1;
        }
        counts
    }
}

/// `[BOS Q (SUBQ q_i SUBA a_i)* FINAL A EOS]`, with chain steps only if `with_chain`.
pub fn build_sequence(
    example: &AugmentedExample,
    vocab: &Vocabulary,
    max_text_len: usize,
    with_chain: bool,
) -> Result<SequenceLayout> {
    let mut ids = vec![BOS];
    let mut segments = vec![Segment::Context];
    let mut push = |marker: Option<usize>, words: &[String], seg: Segment| -> Result<()> {
        if let Some(m) = marker {
            ids.push(m);
            segments.push(seg);
        }
        for id in vocab.encode(words)? {
            ids.push(id);
            segments.push(seg);
        }
        Ok(())
    };
    push(None, &example.question, Segment::Context)?;
    let steps = if with_chain {
        example.chain.steps.as_slice()
    } else {
        &[]
    };
    for (i, step) in steps.iter().enumerate() {
        push(Some(SUBQ), &step.question, Segment::SubQuestion(i + 1))?;
        push(Some(SUBA), &step.answer, Segment::SubAnswer(i + 1))?;
    }
    push(Some(FINAL), &example.answer, Segment::Final)?;
    ids.push(EOS);
    segments.push(Segment::Final);
    if ids.len() > max_text_len {
        return Err(Error::Length(format!(
            "example {}: layout of {} tokens exceeds the {max_text_len}-token text budget",
            example.id,
            ids.len()
        )));
    }
    Ok(SequenceLayout {
        example_id: example.id.clone(),
        token_ids: ids,
        segments,
        num_steps: steps.len(),
    })
}

/// Teacher-forced layout including the gold reasoning chain.
pub fn build_training_sequence(
    example: &AugmentedExample,
    vocab: &Vocabulary,
    max_text_len: usize,
) -> Result<SequenceLayout> {
    build_sequence(example, vocab, max_text_len, true)
}

/// Weights of the three terms. The sub-question weight is 1 unless ablated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sub_q: f64,
    pub lambda_ans: f64,
    pub lambda_final: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sub_q: 1.0,
            lambda_ans: 0.8,
            lambda_final: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sub_q", self.lambda_sub_q),
            ("lambda_ans", self.lambda_ans),
            ("lambda_final", self.lambda_final),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sub_q: f64,
    pub l_sub_ans: f64,
    pub l_final: f64,
    pub total: f64,
    pub per_step: Vec<(f64, f64)>,
}

fn check_rows(g: &Graph, logits: Var, layout: &SequenceLayout) -> Result<usize> {
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    if layout.len() < 2 || (rows != layout.len() && rows != layout.len() - 1) {
        return Err(Error::Shape(format!(
            "{rows} logits rows for a layout of {} tokens",
            layout.len()
        )));
    }
    Ok(rows)
}

/// Summed negative log-likelihood of every prediction charged to `segment`.
fn segment_nll(g: &mut Graph, logits: Var, layout: &SequenceLayout, segment: Segment) -> Result<Var> {
    let rows = check_rows(g, logits, layout)?;
    let mut targets = vec![0; rows];
    let mut weights = vec![0.0; rows];
    for (t, (&tok, &seg)) in layout.targets().iter().zip(layout.target_segments()).enumerate() {
        targets[t] = tok;
        if seg == segment {
            weights[t] = 1.0;
        }
    }
    g.cross_entropy(logits, &targets, &weights)
}

fn zero(g: &mut Graph) -> Result<Var> {
    g.constant(Tensor::scalar(0.0))
}

fn stepwise_loss(
    g: &mut Graph,
    logits: Var,
    layout: &SequenceLayout,
    segment: fn(usize) -> Segment,
) -> Result<(Var, Vec<f64>)> {
    check_rows(g, logits, layout)?;
    let k = layout.num_steps;
    if k == 0 {
        return Ok((zero(g)?, Vec::new()));
    }
    let mut per_step = Vec::with_capacity(k);
    let mut acc: Option<Var> = None;
    for i in 1..=k {
        let l = segment_nll(g, logits, layout, segment(i))?;
        per_step.push(g.scalar_value(l));
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let mean = g.scale(acc.expect("k >= 1"), 1.0 / k as f64)?;
    Ok((mean, per_step))
}

/// Mean over chain steps of the summed sub-question token NLL; zero when K = 0.
pub fn sub_question_loss(g: &mut Graph, logits: Var, layout: &SequenceLayout) -> Result<(Var, Vec<f64>)> {
    stepwise_loss(g, logits, layout, Segment::SubQuestion)
}

/// Mean over chain steps of the summed sub-answer token NLL; zero when K = 0.
pub fn sub_answer_loss(g: &mut Graph, logits: Var, layout: &SequenceLayout) -> Result<(Var, Vec<f64>)> {
    stepwise_loss(g, logits, layout, Segment::SubAnswer)
}

/// Summed NLL over the final marker, answer tokens and EOS.
pub fn final_answer_loss(g: &mut Graph, logits: Var, layout: &SequenceLayout) -> Result<Var> {
    if !layout.target_segments().contains(&Segment::Final) {
        return Err(Error::Layout(format!(
            "example {} has no final-answer segment",
            layout.example_id
        )));
    }
    segment_nll(g, logits, layout, Segment::Final)
}

/// Weighted combination of already-computed term values.
pub fn total_loss(
    l_sub_q: f64,
    l_sub_ans: f64,
    l_final: f64,
    per_step: Vec<(f64, f64)>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let inputs = [
        l_sub_q,
        l_sub_ans,
        l_final,
        weights.lambda_sub_q,
        weights.lambda_ans,
        weights.lambda_final,
    ];
    if inputs
        .iter()
        .chain(per_step.iter().flat_map(|(a, b)| [a, b]))
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite loss term or weight".into()));
    }
    let total = weights.lambda_sub_q * l_sub_q + weights.lambda_ans * l_sub_ans + weights.lambda_final * l_final;
    Ok(LossBreakdown {
        l_sub_q,
        l_sub_ans,
        l_final,
        total,
        per_step,
    })
}

/// Builds the weighted total on `g` and reports every term.
pub fn objective(
    g: &mut Graph,
    logits: Var,
    layout: &SequenceLayout,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (lq, q_steps) = sub_question_loss(g, logits, layout)?;
    let (la, a_steps) = sub_answer_loss(g, logits, layout)?;
    let lf = final_answer_loss(g, logits, layout)?;
    let wq = g.scale(lq, weights.lambda_sub_q)?;
    let wa = g.scale(la, weights.lambda_ans)?;
    let wf = g.scale(lf, weights.lambda_final)?;
    let partial = g.add(wq, wa)?;
    let total = g.add(partial, wf)?;
    let per_step = q_steps.into_iter().zip(a_steps).collect();
    let breakdown = total_loss(
        g.scalar_value(lq),
        g.scalar_value(la),
        g.scalar_value(lf),
        per_step,
        weights,
    )?;
    Ok((total, breakdown))
}

/// Argmax hits and counts over rows whose term has a nonzero weight.
pub fn token_hits(logits: &[f64], vocab_size: usize, layout: &SequenceLayout, weights: &LossWeights) -> (usize, usize) {
    let mut hits = 0;
    let mut count = 0;
    for (t, (&tok, &seg)) in layout.targets().iter().zip(layout.target_segments()).enumerate() {
        let w = match seg {
            Segment::Context => 0.0,
            Segment::SubQuestion(_) => weights.lambda_sub_q,
            Segment::SubAnswer(_) => weights.lambda_ans,
            Segment::Final => weights.lambda_final,
        };
        if w == 0.0 {
            continue;
        }
        let row = &logits[t * vocab_size..(t + 1) * vocab_size];
        count += 1;
        if argmax(row) == tok {
            hits += 1;
        }
    }
    (hits, count)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
