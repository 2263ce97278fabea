//! Line-delimited JSON dataset files. Keys are emitted in sorted order and
//! pixels are not stored: images are re-rendered from the scene on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    render_scene, tokens, AnswerType, AugmentedExample, ChainStep, Color, Dataset, ReasoningChain, Scene, SceneObject,
    Shape, Size,
};
use crate::error::{Error, Result};

// Field order is alphabetical so serialization is key-sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    col: usize,
    color: String,
    row: usize,
    shape: String,
    size: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    a: String,
    q: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    answer: String,
    answer_type: String,
    chain: Vec<StepRecord>,
    depth: usize,
    id: String,
    question: String,
    scene: Vec<ObjectRecord>,
    seed: u64,
}

impl From<&AugmentedExample> for ExampleRecord {
    fn from(e: &AugmentedExample) -> Self {
        Self {
            answer: e.answer.join(" "),
            answer_type: e.answer_type.name().into(),
            chain: e
                .chain
                .steps
                .iter()
                .map(|s| StepRecord {
                    a: s.answer.join(" "),
                    q: s.question.join(" "),
                })
                .collect(),
            depth: e.depth,
            id: e.id.clone(),
            question: e.question.join(" "),
            scene: e
                .scene
                .objects()
                .iter()
                .map(|o| ObjectRecord {
                    col: o.col,
                    color: o.color.word().into(),
                    row: o.row,
                    shape: o.shape.word().into(),
                    size: o.size.word().into(),
                })
                .collect(),
            seed: e.seed,
        }
    }
}

impl ExampleRecord {
    fn into_example(self, image_side: usize) -> std::result::Result<AugmentedExample, String> {
        let objects = self
            .scene
            .iter()
            .map(|o| {
                Ok(SceneObject::new(
                    Shape::from_word(&o.shape).ok_or_else(|| format!("unknown shape {:?}", o.shape))?,
                    Color::from_word(&o.color).ok_or_else(|| format!("unknown color {:?}", o.color))?,
                    Size::from_word(&o.size).ok_or_else(|| format!("unknown size {:?}", o.size))?,
                    o.row,
                    o.col,
                ))
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let scene = Scene::new(objects, self.seed).map_err(|e| e.to_string())?;
        let image = render_scene(&scene, image_side).map_err(|e| e.to_string())?;
        let answer_type = AnswerType::from_name(&self.answer_type)
            .ok_or_else(|| format!("unknown answer_type {:?}", self.answer_type))?;
        let chain = ReasoningChain {
            steps: self
                .chain
                .iter()
                .map(|s| ChainStep {
                    question: tokens(&s.q),
                    answer: tokens(&s.a),
                })
                .collect(),
        };
        if chain.len() != self.depth {
            return Err(format!("depth {} but chain has {} steps", self.depth, chain.len()));
        }
        Ok(AugmentedExample {
            id: self.id,
            seed: self.seed,
            scene,
            image,
            question: tokens(&self.question),
            chain,
            answer: tokens(&self.answer),
            depth: self.depth,
            answer_type,
        })
    }
}

/// Serializes a dataset, one canonical JSON object per line.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for e in &dataset.examples {
        let line = serde_json::to_string(&ExampleRecord::from(e)).expect("records always serialize");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_dataset_to(dataset, BufWriter::new(file))
}

/// Reads a dataset written by [`write_dataset`], rendering images at `image_side`.
pub fn read_dataset(path: impl AsRef<Path>, image_side: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let record: ExampleRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        examples.push(record.into_example(image_side).map_err(parse_err)?);
    }
    Dataset::new(examples)
}
