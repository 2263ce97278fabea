//! Synthetic visual-reasoning corpus: grid scenes, rendered images, templated
//! questions of controlled depth, and oracle-checked reasoning chains.

mod generate;
pub mod grammar;
mod io;

pub use generate::{
    answer_from_chain, decompose, generate_dataset, generate_example, instantiate, verify_example, DataConfig,
    IMAGE_SIDE,
};
pub use io::{read_dataset, write_dataset, write_dataset_to};

use rand::{seq::index, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Side length of the scene grid in cells.
pub const GRID: usize = 4;
/// Largest chain length the templates produce.
pub const K_MAX: usize = 4;
pub const MAX_OBJECTS: usize = 6;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Size { Small => "small", Large => "large" });

impl Shape {
    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }

    pub fn from_plural(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.plural() == w)
    }
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn new(shape: Shape, color: Color, size: Size, row: usize, col: usize) -> Self {
        Self {
            shape,
            color,
            size,
            row,
            col,
        }
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    /// Validates cells and sorts objects row-major.
    pub fn new(mut objects: Vec<SceneObject>, seed: u64) -> Result<Self> {
        if objects.len() > MAX_OBJECTS {
            return Err(Error::Validation(format!(
                "{} objects exceed the limit of {MAX_OBJECTS}",
                objects.len()
            )));
        }
        objects.sort_by_key(SceneObject::cell);
        for w in objects.windows(2) {
            if w[0].cell() == w[1].cell() {
                return Err(Error::Validation(format!("two objects share cell {:?}", w[0].cell())));
            }
        }
        if let Some(o) = objects.iter().find(|o| o.row >= GRID || o.col >= GRID) {
            return Err(Error::Validation(format!(
                "cell {:?} outside the {GRID}x{GRID} grid",
                o.cell()
            )));
        }
        Ok(Self { objects, seed })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }
}

/// Random scene with 1-6 objects on distinct cells.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=MAX_OBJECTS);
    let cells = index::sample(&mut rng, GRID * GRID, n);
    let objects = cells
        .iter()
        .map(|c| {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
            SceneObject::new(shape, color, size, c / GRID, c % GRID)
        })
        .collect();
    Scene::new(objects, seed).expect("sampled cells are distinct and in range")
}

/// Height x width x channel pixel array with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side * channels {
            return Err(Error::Shape(format!(
                "{} pixels for a {side}x{side}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("pixel outside [0, 1]".into()));
        }
        Ok(Self { side, channels, pixels })
    }

    pub fn blank(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            pixels: vec![0.0; side * side * channels],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.side + x) * self.channels + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.side + x) * self.channels + c] = v;
    }
}

fn glyph(shape: Shape, s: usize, y: usize, x: usize) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle if s <= 2 => y == x,
        Shape::Circle => {
            let c = s as f64 / 2.0;
            let (dy, dx) = (y as f64 + 0.5 - c, x as f64 + 0.5 - c);
            dy * dy + dx * dx <= c * c
        }
        Shape::Triangle if s <= 2 => y == s - 1 || x == 0,
        Shape::Triangle => (x as f64 + 0.5 - s as f64 / 2.0).abs() <= (y as f64 + 1.0) / 2.0,
    }
}

/// Draws each object as a filled glyph inside its grid cell.
///
/// Large objects fill the cell block, small ones its centered half-size block;
/// color is coded per RGB channel and the background is 0.
pub fn render_scene(scene: &Scene, side: usize) -> Result<Image> {
    if side % GRID != 0 || side == 0 {
        return Err(Error::Config(format!(
            "image side {side} is not a multiple of the grid size {GRID}"
        )));
    }
    let cell = side / GRID;
    let mut img = Image::blank(side, 3);
    for o in scene.objects() {
        let (extent, offset) = match o.size {
            Size::Large => (cell, 0),
            Size::Small => ((cell / 2).max(1), (cell - (cell / 2).max(1)) / 2),
        };
        let rgb = o.color.rgb();
        for dy in 0..extent {
            for dx in 0..extent {
                if glyph(o.shape, extent, dy, dx) {
                    let (y, x) = (o.row * cell + offset + dy, o.col * cell + offset + dx);
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(y, x, c, v);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Answer-surface categories used by the per-type breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other];

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::YesNo => "yes_no",
            AnswerType::Number => "number",
            AnswerType::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Category implied by an answer's surface form.
    pub fn of_answer<S: AsRef<str>>(answer: &[S]) -> Self {
        match answer {
            [w] if matches!(w.as_ref(), "yes" | "no") => AnswerType::YesNo,
            [w] if w.as_ref().parse::<u32>().is_ok() => AnswerType::Number,
            _ => AnswerType::Other,
        }
    }
}

/// Splits a space-separated string into tokens.
pub fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainStep {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReasoningChain {
    pub steps: Vec<ChainStep>,
}

impl ReasoningChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One `(image, question, sub-questions, sub-answers, answer)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedExample {
    pub id: String,
    pub seed: u64,
    pub scene: Scene,
    pub image: Image,
    pub question: Vec<String>,
    pub chain: ReasoningChain,
    pub answer: Vec<String>,
    pub depth: usize,
    pub answer_type: AnswerType,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<AugmentedExample>,
}

impl Dataset {
    pub fn new(examples: Vec<AugmentedExample>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate example id {:?}", e.id)));
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[cfg(test)]
mod tests;
