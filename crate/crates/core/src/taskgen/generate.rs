use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grammar::{oracle_answer, oracle_answer_in_chain, Attribute, Direction, Filter, Noun, Question};
use super::{
    generate_scene, render_scene, AnswerType, AugmentedExample, ChainStep, Color, Dataset, ReasoningChain, Scene,
    Shape, Size, K_MAX,
};
use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::seed;

const MAX_TRIES: u64 = 100;
pub const IMAGE_SIDE: usize = 16;

/// Corpus-level generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_examples: usize,
    pub k_max: usize,
    /// Relative weight of each depth `1..=k_max`.
    pub depth_mix: Vec<f64>,
    pub image_side: usize,
    pub id_prefix: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_examples: 1000,
            k_max: K_MAX,
            depth_mix: vec![1.0; K_MAX],
            image_side: IMAGE_SIDE,
            id_prefix: "ex".into(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 || self.k_max > K_MAX {
            return Err(Error::Config(format!(
                "k_max must be in 1..={K_MAX}, got {}",
                self.k_max
            )));
        }
        if self.depth_mix.len() != self.k_max {
            return Err(Error::Config(format!(
                "depth_mix needs {} weights (one per depth), got {}",
                self.k_max,
                self.depth_mix.len()
            )));
        }
        if self.depth_mix.iter().any(|w| !w.is_finite() || *w < 0.0) || self.depth_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "depth_mix weights must be nonnegative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    fn sample_depth(&self, rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = self.depth_mix.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.depth_mix.iter().enumerate() {
            if u < *w {
                return i + 1;
            }
            u -= w;
        }
        self.depth_mix.iter().rposition(|w| *w > 0.0).unwrap() + 1
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Noun used when a counting filter is restated as an enumeration (`which shapes are ...`).
fn enumeration_filter(f: Filter) -> Filter {
    match f.noun {
        Noun::Generic { .. } => f.with_noun(Noun::None),
        Noun::Shape { shape, .. } => f.with_noun(Noun::Shape { shape, plural: true }),
        Noun::None => f,
    }
}

fn plural_filter(f: Filter) -> Filter {
    match f.noun {
        Noun::Shape { shape, .. } => f.with_noun(Noun::Shape { shape, plural: true }),
        _ => f.with_noun(Noun::Generic { plural: true }),
    }
}

/// Chooses a question template for `depth` over `scene`.
fn propose(depth: usize, scene: &Scene, rng: &mut ChaCha8Rng) -> Option<Question> {
    let objects = scene.objects();
    match depth {
        1 if rng.random_bool(0.5) => {
            let o = pick(rng, objects);
            let descriptions = [
                Filter::shape(o.shape, false),
                Filter {
                    size: None,
                    color: Some(o.color),
                    noun: Noun::Shape {
                        shape: o.shape,
                        plural: false,
                    },
                },
                Filter {
                    size: Some(o.size),
                    color: Some(o.color),
                    noun: Noun::Shape {
                        shape: o.shape,
                        plural: false,
                    },
                },
            ];
            let filter = *descriptions
                .iter()
                .find(|f| objects.iter().filter(|x| f.matches(x)).count() == 1)?;
            let free: Vec<Attribute> = Attribute::ALL
                .into_iter()
                .filter(|a| match a {
                    Attribute::Color => filter.color.is_none(),
                    Attribute::Size => filter.size.is_none(),
                    Attribute::Shape => false,
                })
                .collect();
            (!free.is_empty()).then(|| Question::Attribute {
                attribute: pick(rng, &free),
                filter,
            })
        }
        1 => {
            let (color, shape) = if rng.random_bool(0.5) {
                let o = pick(rng, objects);
                (o.color, o.shape)
            } else {
                (pick(rng, Color::ALL), pick(rng, Shape::ALL))
            };
            Some(Question::Exists {
                filter: Filter::color(color, Noun::Shape { shape, plural: false }),
            })
        }
        2 => {
            let from_scene = rng.random_bool(0.7);
            let o = pick(rng, objects);
            let plural = Noun::Generic { plural: true };
            let filter = match rng.random_range(0..3) {
                0 => Filter::color(if from_scene { o.color } else { pick(rng, Color::ALL) }, plural),
                1 => Filter::shape(if from_scene { o.shape } else { pick(rng, Shape::ALL) }, true),
                _ => Filter::size(if from_scene { o.size } else { pick(rng, Size::ALL) }, plural),
            };
            Some(Question::Count { filter })
        }
        3 => {
            let o = pick(rng, objects);
            let filter = Filter::color(
                o.color,
                Noun::Shape {
                    shape: o.shape,
                    plural: false,
                },
            );
            if objects.iter().filter(|x| filter.matches(x)).count() != 1 {
                return None;
            }
            let dirs: Vec<Direction> = Direction::ALL
                .into_iter()
                .filter(|d| d.step(o.cell()).is_some_and(|(r, c)| scene.at(r, c).is_some()))
                .collect();
            if dirs.is_empty() {
                return None;
            }
            Some(Question::Relative {
                attribute: pick(rng, &Attribute::ALL),
                direction: pick(rng, &dirs),
                filter,
            })
        }
        _ => {
            let (first, second) = if rng.random_bool(0.5) {
                let a = pick(rng, Color::ALL);
                let b = pick(rng, &Color::ALL.iter().copied().filter(|c| *c != a).collect::<Vec<_>>());
                let plural = Noun::Generic { plural: true };
                (Filter::color(a, plural), Filter::color(b, plural))
            } else {
                let a = pick(rng, Shape::ALL);
                let b = pick(rng, &Shape::ALL.iter().copied().filter(|s| *s != a).collect::<Vec<_>>());
                (Filter::shape(a, true), Filter::shape(b, true))
            };
            let count = |f: &Filter| objects.iter().filter(|x| f.matches(x)).count();
            (count(&first) + count(&second) > 0).then_some(Question::More { first, second })
        }
    }
}

fn ask(scene: &Scene, chain: &mut ReasoningChain, q: Question) -> Result<Vec<String>> {
    let question = q.render();
    let earlier: Vec<Vec<String>> = chain.steps.iter().map(|s| s.answer.clone()).collect();
    let answer = oracle_answer_in_chain(scene, &earlier, &question)?;
    chain.steps.push(ChainStep {
        question,
        answer: answer.clone(),
    });
    Ok(answer)
}

fn ill_posed(what: &str) -> Error {
    Error::Validation(format!("question is not well-posed: {what}"))
}

fn parse_cell(answer: &[String]) -> Option<(usize, usize)> {
    match answer {
        [r, rv, c, cv] if r == "row" && c == "col" => Some((rv.parse().ok()?, cv.parse().ok()?)),
        _ => None,
    }
}

/// Rule-based decomposition of a question into sub-question/answer steps.
///
/// Every sub-answer comes from the oracle, with earlier answers as context.
pub fn decompose(scene: &Scene, question: &Question) -> Result<ReasoningChain> {
    let mut chain = ReasoningChain::default();
    match question {
        Question::Attribute { filter, .. } => {
            let loc = ask(scene, &mut chain, Question::Where { filter: *filter })?;
            parse_cell(&loc).ok_or_else(|| ill_posed("referent is not unique"))?;
        }
        Question::Exists { filter } => {
            ask(
                scene,
                &mut chain,
                Question::Count {
                    filter: plural_filter(*filter),
                },
            )?;
        }
        Question::Count { filter } => {
            ask(
                scene,
                &mut chain,
                Question::Which {
                    filter: enumeration_filter(*filter),
                },
            )?;
            ask(scene, &mut chain, Question::CountThat)?;
        }
        Question::Relative {
            attribute,
            direction,
            filter,
        } => {
            let loc = ask(scene, &mut chain, Question::Where { filter: *filter })?;
            let cell = parse_cell(&loc).ok_or_else(|| ill_posed("referent is not unique"))?;
            let next = ask(
                scene,
                &mut chain,
                Question::Neighbor {
                    direction: *direction,
                    cell,
                },
            )?;
            let cell = parse_cell(&next).ok_or_else(|| ill_posed("neighbor cell is off the grid"))?;
            let attr = ask(
                scene,
                &mut chain,
                Question::AttributeAt {
                    attribute: *attribute,
                    cell,
                },
            )?;
            if attr == ["none"] {
                return Err(ill_posed("neighbor cell is empty"));
            }
        }
        Question::More { first, second } => {
            ask(
                scene,
                &mut chain,
                Question::Which {
                    filter: enumeration_filter(*first),
                },
            )?;
            ask(scene, &mut chain, Question::CountThat)?;
            ask(
                scene,
                &mut chain,
                Question::Which {
                    filter: enumeration_filter(*second),
                },
            )?;
            ask(scene, &mut chain, Question::CountThat)?;
        }
        other => return Err(Error::Grammar(format!("no decomposition template for {other:?}"))),
    }
    Ok(chain)
}

/// Derives the final answer from chain answers alone (plus a cell lookup for
/// attribute questions), independently of the oracle's direct evaluation.
pub fn answer_from_chain(scene: &Scene, question: &Question, chain: &ReasoningChain) -> Result<Vec<String>> {
    let answers: Vec<&[String]> = chain.steps.iter().map(|s| s.answer.as_slice()).collect();
    let count = |a: &[String]| -> Result<usize> {
        a.first()
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| Error::Validation(format!("expected a count, got {a:?}")))
    };
    let bad = || Error::Validation("chain does not match the question template".into());
    let yes_no = |b: bool| vec![if b { "yes" } else { "no" }.to_string()];
    Ok(match (question, answers.as_slice()) {
        (Question::Attribute { attribute, .. }, [loc]) => {
            let (r, c) = parse_cell(loc).ok_or_else(bad)?;
            vec![attribute.of(scene.at(r, c).ok_or_else(bad)?).to_string()]
        }
        (Question::Exists { .. }, [n]) => yes_no(count(n)? > 0),
        (Question::Count { .. }, [_, n]) => vec![count(n)?.to_string()],
        (Question::Relative { .. }, [_, _, attr]) => attr.to_vec(),
        (Question::More { .. }, [_, a, _, b]) => yes_no(count(a)? > count(b)?),
        _ => return Err(bad()),
    })
}

/// Builds a fully checked example for a given scene and question.
pub fn instantiate<S: AsRef<str>>(
    id: &str,
    seed: u64,
    scene: &Scene,
    question: &[S],
    image_side: usize,
) -> Result<AugmentedExample> {
    let parsed = Question::parse(question)?;
    let chain = decompose(scene, &parsed)?;
    let answer = oracle_answer(scene, question)?;
    let example = AugmentedExample {
        id: id.to_string(),
        seed,
        scene: scene.clone(),
        image: render_scene(scene, image_side)?,
        question: question.iter().map(|s| s.as_ref().to_string()).collect(),
        depth: chain.len(),
        answer_type: AnswerType::of_answer(&answer),
        chain,
        answer,
    };
    verify_example(&example)?;
    Ok(example)
}

/// Checks every label of an example against the oracle.
pub fn verify_example(e: &AugmentedExample) -> Result<()> {
    let fail = |what: String| Err(Error::Validation(format!("example {}: {what}", e.id)));
    let oracle = oracle_answer(&e.scene, &e.question)?;
    if oracle != e.answer {
        return fail(format!("answer {:?} but oracle says {:?}", e.answer, oracle));
    }
    let mut earlier = Vec::new();
    for (i, step) in e.chain.steps.iter().enumerate() {
        let expected = oracle_answer_in_chain(&e.scene, &earlier, &step.question)?;
        if expected != step.answer {
            return fail(format!(
                "step {} answer {:?} but oracle says {:?}",
                i + 1,
                step.answer,
                expected
            ));
        }
        earlier.push(step.answer.clone());
    }
    if e.depth != e.chain.len() {
        return fail(format!("depth {} but chain has {} steps", e.depth, e.chain.len()));
    }
    if e.answer_type != AnswerType::of_answer(&e.answer) {
        return fail(format!("answer type {:?} does not match {:?}", e.answer_type, e.answer));
    }
    if !e.chain.is_empty() {
        let derived = answer_from_chain(&e.scene, &Question::parse(&e.question)?, &e.chain)?;
        if derived != e.answer {
            return fail(format!("chain leads to {derived:?}, not {:?}", e.answer));
        }
    }
    let vocab = Vocabulary::default();
    let all = e
        .question
        .iter()
        .chain(&e.answer)
        .chain(e.chain.steps.iter().flat_map(|s| s.question.iter().chain(&s.answer)));
    for t in all {
        vocab.id(t)?;
    }
    Ok(())
}

/// Deterministic example of the requested depth; scenes are resampled until
/// the chosen template is well-posed.
pub fn generate_example(seed: u64, depth: usize) -> Result<AugmentedExample> {
    generate_example_sized(&format!("ex-{seed:016x}"), seed, depth, IMAGE_SIDE)
}

fn generate_example_sized(id: &str, seed: u64, depth: usize, image_side: usize) -> Result<AugmentedExample> {
    if !(1..=K_MAX).contains(&depth) {
        return Err(Error::Config(format!("depth {depth} outside 1..={K_MAX}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "template"));
    for attempt in 0..MAX_TRIES {
        let mut scene = generate_scene(seed::derive_indexed(seed, "scene", attempt));
        scene.seed = seed;
        let Some(q) = propose(depth, &scene, &mut rng) else {
            continue;
        };
        match instantiate(id, seed, &scene, &q.render(), image_side) {
            Ok(e) => return Ok(e),
            Err(Error::Validation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Validation(format!(
        "no well-posed depth-{depth} question after {MAX_TRIES} scenes (seed {seed})"
    )))
}

/// `config.n_examples` examples with depths drawn from `config.depth_mix`.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let examples = (0..config.n_examples)
        .map(|i| {
            let ex_seed = seed::derive_indexed(seed, "example", i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(ex_seed, "depth"));
            let depth = config.sample_depth(&mut rng);
            generate_example_sized(
                &format!("{}-{i:06}", config.id_prefix),
                ex_seed,
                depth,
                config.image_side,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}
