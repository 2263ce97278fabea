//! Reference models for sanity-checking the harness.

use std::collections::HashMap;

use crate::error::Result;
use crate::inference::{LanguageModel, Session};
use crate::model::vocab::{EOS, FINAL};
use crate::model::Vocabulary;
use crate::objective::build_training_sequence;
use crate::seed;
use crate::segment::Segment;
use crate::taskgen::{Dataset, Image};

fn image_key(image: &Image) -> Vec<u64> {
    image.pixels().iter().map(|p| p.to_bits()).collect()
}

fn one_hot(size: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; size];
    v[at] = 1.0;
    v
}

/// Replays each example's gold chain and answer.
pub struct OracleModel {
    vocab_size: usize,
    capacity: usize,
    by_image: HashMap<Vec<u64>, Vec<(Vec<usize>, Vec<usize>)>>,
}

impl OracleModel {
    pub fn new(dataset: &Dataset, vocab: &Vocabulary, vocab_size: usize, capacity: usize) -> Result<Self> {
        let mut by_image: HashMap<Vec<u64>, Vec<(Vec<usize>, Vec<usize>)>> = HashMap::new();
        for e in &dataset.examples {
            let layout = build_training_sequence(e, vocab, capacity)?;
            let q_end = 1 + e.question.len();
            let entry = (layout.token_ids[1..q_end].to_vec(), layout.token_ids[q_end..].to_vec());
            by_image.entry(image_key(&e.image)).or_default().push(entry);
        }
        Ok(Self {
            vocab_size,
            capacity,
            by_image,
        })
    }
}

struct OracleSession<'a> {
    model: &'a OracleModel,
    candidates: &'a [(Vec<usize>, Vec<usize>)],
    tokens: Vec<usize>,
}

impl Session for OracleSession<'_> {
    fn push(&mut self, token: usize, _segment: Segment) -> Result<Vec<f64>> {
        self.tokens.push(token);
        let prefix = &self.tokens[1..];
        let next = self
            .candidates
            .iter()
            .find(|(q, _)| prefix.len() >= q.len() && prefix[..q.len()] == q[..])
            .map(|(q, cont)| cont.get(prefix.len() - q.len()).copied().unwrap_or(EOS))
            .unwrap_or(EOS);
        Ok(one_hot(self.model.vocab_size, next))
    }

    fn remaining(&self) -> usize {
        self.model.capacity - self.tokens.len()
    }
}

impl LanguageModel for OracleModel {
    fn start<'a>(&'a self, image: &Image) -> Result<Box<dyn Session + 'a>> {
        let candidates = self.by_image.get(&image_key(image)).map(Vec::as_slice).unwrap_or(&[]);
        Ok(Box::new(OracleSession {
            model: self,
            candidates,
            tokens: Vec::new(),
        }))
    }
}

/// Answers immediately with a seeded uniform guess: yes or no for
/// existence and comparison questions, any word otherwise.
pub struct GuessModel {
    vocab_size: usize,
    capacity: usize,
    seed: u64,
    yes_no: [usize; 2],
    polar_openers: [usize; 2],
    words: Vec<usize>,
}

impl GuessModel {
    pub fn new(vocab: &Vocabulary, vocab_size: usize, capacity: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            vocab_size,
            capacity,
            seed,
            yes_no: [vocab.id("yes")?, vocab.id("no")?],
            polar_openers: [vocab.id("is")?, vocab.id("are")?],
            words: (0..vocab.len()).filter(|&i| !Vocabulary::is_special(i)).collect(),
        })
    }
}

struct GuessSession<'a> {
    model: &'a GuessModel,
    image_hash: u64,
    tokens: Vec<usize>,
    guess: Option<usize>,
}

impl Session for GuessSession<'_> {
    fn push(&mut self, token: usize, _segment: Segment) -> Result<Vec<f64>> {
        self.tokens.push(token);
        let m = self.model;
        let next = if token == FINAL {
            let mut h = seed::derive(m.seed, "guess") ^ self.image_hash;
            for &t in &self.tokens {
                h = seed::derive_indexed(h, "token", t as u64);
            }
            let polar = self.tokens.get(1).is_some_and(|t| m.polar_openers.contains(t));
            let g = if polar {
                m.yes_no[(h >> 32) as usize % 2]
            } else {
                m.words[(h >> 32) as usize % m.words.len()]
            };
            self.guess = Some(g);
            g
        } else if self.guess.is_some() {
            EOS
        } else {
            FINAL
        };
        Ok(one_hot(m.vocab_size, next))
    }

    fn remaining(&self) -> usize {
        self.model.capacity - self.tokens.len()
    }
}

impl LanguageModel for GuessModel {
    fn start<'a>(&'a self, image: &Image) -> Result<Box<dyn Session + 'a>> {
        let image_hash = image_key(image)
            .iter()
            .fold(0u64, |h, &b| seed::derive_indexed(h, "px", b));
        Ok(Box::new(GuessSession {
            model: self,
            image_hash,
            tokens: Vec::new(),
            guess: None,
        }))
    }
}
