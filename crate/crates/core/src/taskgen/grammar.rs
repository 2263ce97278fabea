//! Closed question grammar and the brute-force oracle that answers it.
//!
//! ```text
//! what ATTR is the F              where is the F            is there a F
//! which shapes are F              how many F                how many is that
//! which cell is DIR of row R col C                          what ATTR is at row R col C
//! what ATTR is DIR of the F       are there more F than F
//!
//! F    := [size] [color] [noun]   (at least one word)
//! noun := shape | shapes | circle | circles | square | squares | triangle | triangles
//! ```
//!
//! `how many is that` refers to the answer of the previous chain step and
//! only has a meaning inside a chain.

use super::{tokens, Color, Scene, SceneObject, Shape, Size, GRID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Color,
    Shape,
    Size,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Shape, Attribute::Size];

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Size => "size",
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.word() == w)
    }

    pub fn of(self, o: &SceneObject) -> &'static str {
        match self {
            Attribute::Color => o.color.word(),
            Attribute::Shape => o.shape.word(),
            Attribute::Size => o.size.word(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Above, Direction::Below];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.word() == w)
    }

    /// The adjacent cell in this direction, if it lies on the grid.
    pub fn step(self, (row, col): (usize, usize)) -> Option<(usize, usize)> {
        let (r, c) = match self {
            Direction::Left => (Some(row), col.checked_sub(1)),
            Direction::Right => (Some(row), Some(col + 1)),
            Direction::Above => (row.checked_sub(1), Some(col)),
            Direction::Below => (Some(row + 1), Some(col)),
        };
        match (r, c) {
            (Some(r), Some(c)) if r < GRID && c < GRID => Some((r, c)),
            _ => None,
        }
    }
}

/// Head noun of a filter phrase; carries number only for surface rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Noun {
    None,
    Generic { plural: bool },
    Shape { shape: Shape, plural: bool },
}

/// Conjunctive object filter, e.g. `small red circles`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Filter {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub noun: Noun,
}

impl Filter {
    pub fn color(color: Color, noun: Noun) -> Self {
        Self {
            size: None,
            color: Some(color),
            noun,
        }
    }

    pub fn size(size: Size, noun: Noun) -> Self {
        Self {
            size: Some(size),
            color: None,
            noun,
        }
    }

    pub fn shape(shape: Shape, plural: bool) -> Self {
        Self {
            size: None,
            color: None,
            noun: Noun::Shape { shape, plural },
        }
    }

    pub fn shape_value(&self) -> Option<Shape> {
        match self.noun {
            Noun::Shape { shape, .. } => Some(shape),
            _ => None,
        }
    }

    pub fn matches(&self, o: &SceneObject) -> bool {
        self.size.is_none_or(|s| s == o.size)
            && self.color.is_none_or(|c| c == o.color)
            && self.shape_value().is_none_or(|s| s == o.shape)
    }

    pub fn with_noun(mut self, noun: Noun) -> Self {
        self.noun = noun;
        self
    }

    fn render(&self, out: &mut Vec<String>) {
        if let Some(s) = self.size {
            out.push(s.word().into());
        }
        if let Some(c) = self.color {
            out.push(c.word().into());
        }
        match self.noun {
            Noun::None => {}
            Noun::Generic { plural } => out.push(if plural { "shapes" } else { "shape" }.into()),
            Noun::Shape { shape, plural } => out.push(if plural { shape.plural() } else { shape.word() }.into()),
        }
    }

    fn parse(words: &[&str]) -> Option<Self> {
        let mut rest = words;
        let mut f = Filter {
            size: None,
            color: None,
            noun: Noun::None,
        };
        if let Some(s) = rest.first().and_then(|w| Size::from_word(w)) {
            f.size = Some(s);
            rest = &rest[1..];
        }
        if let Some(c) = rest.first().and_then(|w| Color::from_word(w)) {
            f.color = Some(c);
            rest = &rest[1..];
        }
        if let Some(&w) = rest.first() {
            f.noun = match w {
                "shape" => Noun::Generic { plural: false },
                "shapes" => Noun::Generic { plural: true },
                _ => match (Shape::from_word(w), Shape::from_plural(w)) {
                    (Some(shape), _) => Noun::Shape { shape, plural: false },
                    (_, Some(shape)) => Noun::Shape { shape, plural: true },
                    _ => return None,
                },
            };
            rest = &rest[1..];
        }
        let empty = f.size.is_none() && f.color.is_none() && f.noun == Noun::None;
        (rest.is_empty() && !empty).then_some(f)
    }
}

/// Parsed question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Question {
    Attribute {
        attribute: Attribute,
        filter: Filter,
    },
    Where {
        filter: Filter,
    },
    Exists {
        filter: Filter,
    },
    Which {
        filter: Filter,
    },
    Count {
        filter: Filter,
    },
    CountThat,
    Neighbor {
        direction: Direction,
        cell: (usize, usize),
    },
    AttributeAt {
        attribute: Attribute,
        cell: (usize, usize),
    },
    Relative {
        attribute: Attribute,
        direction: Direction,
        filter: Filter,
    },
    More {
        first: Filter,
        second: Filter,
    },
}

fn cell_words(cell: (usize, usize)) -> [String; 4] {
    ["row".into(), cell.0.to_string(), "col".into(), cell.1.to_string()]
}

fn parse_cell(words: &[&str]) -> Option<(usize, usize)> {
    match words {
        ["row", r, "col", c] => {
            let (r, c) = (r.parse().ok()?, c.parse().ok()?);
            (r < GRID && c < GRID).then_some((r, c))
        }
        _ => None,
    }
}

impl Question {
    /// Surface tokens of this question.
    pub fn render(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut words = |s: &str| out.extend(tokens(s));
        match self {
            Question::Attribute { attribute, filter } => {
                words(&format!("what {} is the", attribute.word()));
                filter.render(&mut out);
            }
            Question::Where { filter } => {
                words("where is the");
                filter.render(&mut out);
            }
            Question::Exists { filter } => {
                words("is there a");
                filter.render(&mut out);
            }
            Question::Which { filter } => {
                words("which shapes are");
                filter.render(&mut out);
            }
            Question::Count { filter } => {
                words("how many");
                filter.render(&mut out);
            }
            Question::CountThat => words("how many is that"),
            Question::Neighbor { direction, cell } => {
                words(&format!("which cell is {} of", direction.word()));
                out.extend(cell_words(*cell));
            }
            Question::AttributeAt { attribute, cell } => {
                words(&format!("what {} is at", attribute.word()));
                out.extend(cell_words(*cell));
            }
            Question::Relative {
                attribute,
                direction,
                filter,
            } => {
                words(&format!("what {} is {} of the", attribute.word(), direction.word()));
                filter.render(&mut out);
            }
            Question::More { first, second } => {
                words("are there more");
                first.render(&mut out);
                out.push("than".into());
                second.render(&mut out);
            }
        }
        out
    }

    pub fn parse<S: AsRef<str>>(question: &[S]) -> Result<Self> {
        let words: Vec<&str> = question.iter().map(AsRef::as_ref).collect();
        Self::parse_words(&words).ok_or_else(|| Error::Grammar(format!("cannot parse question {:?}", words.join(" "))))
    }

    fn parse_words(w: &[&str]) -> Option<Self> {
        let filter = Filter::parse;
        match w {
            ["how", "many", "is", "that"] => Some(Question::CountThat),
            ["how", "many", rest @ ..] => Some(Question::Count { filter: filter(rest)? }),
            ["where", "is", "the", rest @ ..] => Some(Question::Where { filter: filter(rest)? }),
            ["is", "there", "a", rest @ ..] => Some(Question::Exists { filter: filter(rest)? }),
            ["which", "shapes", "are", rest @ ..] => Some(Question::Which { filter: filter(rest)? }),
            ["which", "cell", "is", dir, "of", rest @ ..] => Some(Question::Neighbor {
                direction: Direction::parse(dir)?,
                cell: parse_cell(rest)?,
            }),
            ["what", attr, "is", "at", rest @ ..] => Some(Question::AttributeAt {
                attribute: Attribute::parse(attr)?,
                cell: parse_cell(rest)?,
            }),
            ["what", attr, "is", "the", rest @ ..] => Some(Question::Attribute {
                attribute: Attribute::parse(attr)?,
                filter: filter(rest)?,
            }),
            ["what", attr, "is", dir, "of", "the", rest @ ..] => Some(Question::Relative {
                attribute: Attribute::parse(attr)?,
                direction: Direction::parse(dir)?,
                filter: filter(rest)?,
            }),
            ["are", "there", "more", rest @ ..] => {
                let split = rest.iter().position(|&x| x == "than")?;
                Some(Question::More {
                    first: filter(&rest[..split])?,
                    second: filter(&rest[split + 1..])?,
                })
            }
            _ => None,
        }
    }
}

fn matching<'a>(scene: &'a Scene, f: &Filter) -> Vec<&'a SceneObject> {
    scene.objects().iter().filter(|o| f.matches(o)).collect()
}

fn unique<'a>(scene: &'a Scene, f: &Filter) -> Option<&'a SceneObject> {
    match matching(scene, f).as_slice() {
        [o] => Some(o),
        _ => None,
    }
}

fn none() -> Vec<String> {
    vec!["none".into()]
}

fn yes_no(b: bool) -> Vec<String> {
    vec![if b { "yes" } else { "no" }.into()]
}

fn word(s: &str) -> Vec<String> {
    vec![s.into()]
}

/// Answers `question` by exhaustive evaluation over `scene.objects`.
///
/// Context-dependent questions (`how many is that`) are rejected; use
/// [`oracle_answer_in_chain`] for those.
pub fn oracle_answer<S: AsRef<str>>(scene: &Scene, question: &[S]) -> Result<Vec<String>> {
    oracle_answer_in_chain(scene, &[], question)
}

/// Like [`oracle_answer`], with the answers of earlier chain steps as context.
pub fn oracle_answer_in_chain<S: AsRef<str>>(
    scene: &Scene,
    earlier_answers: &[Vec<String>],
    question: &[S],
) -> Result<Vec<String>> {
    let q = Question::parse(question)?;
    Ok(match q {
        Question::Attribute { attribute, filter } => {
            unique(scene, &filter).map_or_else(none, |o| word(attribute.of(o)))
        }
        Question::Where { filter } => unique(scene, &filter).map_or_else(none, |o| cell_words(o.cell()).to_vec()),
        Question::Exists { filter } => yes_no(!matching(scene, &filter).is_empty()),
        Question::Which { filter } => {
            let m = matching(scene, &filter);
            if m.is_empty() {
                none()
            } else {
                m.iter().map(|o| o.shape.word().to_string()).collect()
            }
        }
        Question::Count { filter } => vec![matching(scene, &filter).len().to_string()],
        Question::CountThat => {
            let prev = earlier_answers
                .last()
                .ok_or_else(|| Error::Grammar("'how many is that' has no earlier step to refer to".into()))?;
            let n = if prev.len() == 1 && prev[0] == "none" {
                0
            } else {
                prev.len()
            };
            vec![n.to_string()]
        }
        Question::Neighbor { direction, cell } => direction.step(cell).map_or_else(none, |c| cell_words(c).to_vec()),
        Question::AttributeAt { attribute, cell } => {
            scene.at(cell.0, cell.1).map_or_else(none, |o| word(attribute.of(o)))
        }
        Question::Relative {
            attribute,
            direction,
            filter,
        } => unique(scene, &filter)
            .and_then(|o| direction.step(o.cell()))
            .and_then(|(r, c)| scene.at(r, c))
            .map_or_else(none, |o| word(attribute.of(o))),
        Question::More { first, second } => yes_no(matching(scene, &first).len() > matching(scene, &second).len()),
    })
}
