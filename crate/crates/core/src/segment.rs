use serde::{Deserialize, Serialize};

/// Role of a token in the supervised stream. Steps are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Context,
    SubQuestion(usize),
    SubAnswer(usize),
    Final,
}

impl Segment {
    pub fn step(self) -> Option<usize> {
        match self {
            Segment::SubQuestion(i) | Segment::SubAnswer(i) => Some(i),
            _ => None,
        }
    }
}

/// Strict conditioning: a sub-question sees the image, the question and its
/// own tokens; a sub-answer sees the image and its own step; everything else
/// sees the whole causal prefix. Causality is enforced separately.
pub fn strict_visible(query: Segment, key: Segment) -> bool {
    match query {
        Segment::SubQuestion(i) => matches!(key, Segment::Context) || key == Segment::SubQuestion(i),
        Segment::SubAnswer(i) => key == Segment::SubQuestion(i) || key == Segment::SubAnswer(i),
        Segment::Context | Segment::Final => true,
    }
}
