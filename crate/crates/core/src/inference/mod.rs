//! Greedy staged self-questioning and the direct-answer baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{BOS, EOS, FINAL, SUBA, SUBQ};
use crate::model::{DecoderState, ModelParams, Vocabulary};
use crate::objective::argmax;
use crate::segment::Segment;
use crate::taskgen::{Image, K_MAX};

/// Incremental next-token scorer for one image.
pub trait Session {
    /// Feeds a token and returns the logits for the following position.
    fn push(&mut self, token: usize, segment: Segment) -> Result<Vec<f64>>;
    /// Tokens that can still be fed.
    fn remaining(&self) -> usize;
}

/// Anything that can open a decoding session on an image.
pub trait LanguageModel: Sync {
    fn start<'a>(&'a self, image: &Image) -> Result<Box<dyn Session + 'a>>;
}

/// The transformer, decoded through its key/value cache.
#[derive(Clone, Copy)]
pub struct CachedModel<'p> {
    pub params: &'p ModelParams,
    pub strict: bool,
}

impl<'p> CachedModel<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self { params, strict: false }
    }
}

impl Session for DecoderState<'_> {
    fn push(&mut self, token: usize, segment: Segment) -> Result<Vec<f64>> {
        DecoderState::push(self, token, segment).map(<[f64]>::to_vec)
    }

    fn remaining(&self) -> usize {
        DecoderState::remaining(self)
    }
}

impl LanguageModel for CachedModel<'_> {
    fn start<'a>(&'a self, image: &Image) -> Result<Box<dyn Session + 'a>> {
        Ok(Box::new(DecoderState::new(self.params, image, self.strict)?))
    }
}

/// Generated chain and answer for one question.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub sub_questions: Vec<Vec<usize>>,
    pub sub_answers: Vec<Vec<usize>>,
    pub final_answer: Vec<usize>,
    pub well_formed: bool,
    pub steps_taken: usize,
}

impl InferenceTrace {
    /// Tokens generated after the question, including markers and EOS.
    pub fn generated_len(&self) -> usize {
        let chain: usize = self
            .sub_questions
            .iter()
            .chain(&self.sub_answers)
            .map(|s| s.len() + 1)
            .sum();
        chain + 1 + self.final_answer.len() + 1
    }
}

fn feed_context(session: &mut dyn Session, question: &[usize]) -> Result<Vec<f64>> {
    if question.len() + 1 > session.remaining() {
        return Err(Error::Length(format!(
            "question of {} tokens does not fit in {} text positions",
            question.len(),
            session.remaining()
        )));
    }
    let mut logits = session.push(BOS, Segment::Context)?;
    for &t in question {
        logits = session.push(t, Segment::Context)?;
    }
    Ok(logits)
}

/// Appends argmax tokens until one is in `stop` (kept) or `max_new` are produced.
pub fn greedy_decode(
    model: &dyn LanguageModel,
    image: &Image,
    prefix: &[usize],
    stop: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut session = model.start(image)?;
    if prefix.is_empty() || prefix.len() > session.remaining() {
        return Err(Error::Length(format!(
            "prefix of {} tokens does not fit in {} text positions",
            prefix.len(),
            session.remaining()
        )));
    }
    let mut logits = Vec::new();
    for &t in prefix {
        logits = session.push(t, Segment::Context)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = argmax(&logits);
        out.push(next);
        if stop.contains(&next) || out.len() == max_new {
            break;
        }
        if session.remaining() == 0 {
            return Err(Error::Length("context overflow during greedy decoding".into()));
        }
        logits = session.push(next, Segment::Context)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    AfterContext,
    SubQuestion,
    SubAnswer,
    Final,
}

/// Staged greedy generation: sub-question / sub-answer rounds, then the answer.
///
/// Structural slips (a word where a marker belongs, a marker out of place,
/// or more than `k_max` rounds) force the final-answer marker and mark the
/// trace as not well formed. Running out of context ends the trace early.
pub fn self_question_infer(
    model: &dyn LanguageModel,
    image: &Image,
    question: &[usize],
    k_max: usize,
) -> Result<InferenceTrace> {
    let mut session = model.start(image)?;
    let mut logits = feed_context(session.as_mut(), question)?;
    let mut trace = InferenceTrace {
        well_formed: true,
        ..InferenceTrace::default()
    };
    let mut phase = Phase::AfterContext;
    let budget = session.remaining();
    let mut generated = 0;

    loop {
        if generated == budget {
            trace.well_formed = false;
            break;
        }
        let mut next = argmax(&logits);
        generated += 1;
        let segment = match (phase, next) {
            (Phase::Final, EOS) => break,
            (Phase::Final, t) if Vocabulary::is_special(t) => {
                trace.well_formed = false;
                break;
            }
            (Phase::Final, t) => {
                trace.final_answer.push(t);
                Segment::Final
            }
            (Phase::AfterContext | Phase::SubAnswer, SUBQ) if trace.steps_taken < k_max => {
                trace.steps_taken += 1;
                trace.sub_questions.push(Vec::new());
                trace.sub_answers.push(Vec::new());
                phase = Phase::SubQuestion;
                Segment::SubQuestion(trace.steps_taken)
            }
            (Phase::SubQuestion, SUBA) => {
                phase = Phase::SubAnswer;
                Segment::SubAnswer(trace.steps_taken)
            }
            (Phase::SubQuestion, t) if !Vocabulary::is_special(t) => {
                trace.sub_questions.last_mut().expect("in a round").push(t);
                Segment::SubQuestion(trace.steps_taken)
            }
            (Phase::SubAnswer, t) if !Vocabulary::is_special(t) => {
                trace.sub_answers.last_mut().expect("in a round").push(t);
                Segment::SubAnswer(trace.steps_taken)
            }
            (Phase::AfterContext | Phase::SubAnswer, FINAL) => {
                phase = Phase::Final;
                Segment::Final
            }
            _ => {
                trace.well_formed = false;
                next = FINAL;
                phase = Phase::Final;
                Segment::Final
            }
        };
        logits = session.push(next, segment)?;
    }
    Ok(trace)
}

/// Answers without a chain by forcing the final-answer marker after the question.
pub fn direct_infer(model: &dyn LanguageModel, image: &Image, question: &[usize]) -> Result<InferenceTrace> {
    let mut session = model.start(image)?;
    feed_context(session.as_mut(), question)?;
    let mut trace = InferenceTrace {
        well_formed: true,
        ..InferenceTrace::default()
    };
    if session.remaining() == 0 {
        trace.well_formed = false;
        return Ok(trace);
    }
    let mut logits = session.push(FINAL, Segment::Final)?;
    loop {
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        if Vocabulary::is_special(next) || session.remaining() == 0 {
            trace.well_formed = false;
            break;
        }
        trace.final_answer.push(next);
        logits = session.push(next, Segment::Final)?;
    }
    Ok(trace)
}

/// Default round limit, matching the corpus.
pub const DEFAULT_K_MAX: usize = K_MAX;
