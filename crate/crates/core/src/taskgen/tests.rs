use super::grammar::{oracle_answer, oracle_answer_in_chain, Question};
use super::*;
use crate::error::Error;

fn hand_scene() -> Scene {
    Scene::new(
        vec![
            SceneObject::new(Shape::Circle, Color::Red, Size::Large, 0, 0),
            SceneObject::new(Shape::Square, Color::Blue, Size::Small, 1, 1),
            SceneObject::new(Shape::Circle, Color::Blue, Size::Large, 2, 3),
        ],
        0,
    )
    .unwrap()
}

fn ask(scene: &Scene, q: &str) -> String {
    oracle_answer(scene, &tokens(q)).unwrap().join(" ")
}

#[test]
fn scenes_are_deterministic_and_valid() {
    assert_eq!(generate_scene(42), generate_scene(42));
    let mut seen_counts = [0usize; MAX_OBJECTS + 1];
    for seed in 0..1000 {
        let s = generate_scene(seed);
        let n = s.objects().len();
        assert!((1..=MAX_OBJECTS).contains(&n));
        seen_counts[n] += 1;
        // Canonical order and distinct cells are re-checked by the constructor.
        assert_eq!(Scene::new(s.objects().to_vec(), seed).unwrap(), s);
    }
    assert!(seen_counts[1..].iter().all(|&c| c > 0), "{seen_counts:?}");
}

#[test]
fn scene_rejects_shared_cells() {
    let o = SceneObject::new(Shape::Circle, Color::Red, Size::Large, 1, 1);
    assert!(matches!(Scene::new(vec![o, o], 0), Err(Error::Validation(_))));
}

#[test]
fn rendering_rules() {
    let empty = Scene::new(vec![], 0).unwrap();
    assert!(render_scene(&empty, 16).unwrap().pixels().iter().all(|&p| p == 0.0));

    let red_square = Scene::new(vec![SceneObject::new(Shape::Square, Color::Red, Size::Large, 0, 0)], 0).unwrap();
    let img = render_scene(&red_square, 16).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(img.get(y, x, 0), 1.0);
            assert_eq!(img.get(y, x, 1), 0.0);
        }
    }
    assert_eq!(img.get(4, 4, 0), 0.0);

    let small = Scene::new(
        vec![SceneObject::new(Shape::Square, Color::Green, Size::Small, 0, 0)],
        0,
    )
    .unwrap();
    let img = render_scene(&small, 16).unwrap();
    let lit: Vec<(usize, usize)> = (0..4)
        .flat_map(|y| (0..4).map(move |x| (y, x)))
        .filter(|&(y, x)| img.get(y, x, 1) == 1.0)
        .collect();
    assert_eq!(lit, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
}

#[test]
fn rendering_is_local_to_the_changed_cell() {
    let a = hand_scene();
    let mut objects = a.objects().to_vec();
    objects[1].color = Color::Yellow;
    let b = Scene::new(objects, 0).unwrap();
    let (ia, ib) = (render_scene(&a, 16).unwrap(), render_scene(&b, 16).unwrap());
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                if ia.get(y, x, c) != ib.get(y, x, c) {
                    assert!((4..8).contains(&y) && (4..8).contains(&x), "pixel ({y},{x}) changed");
                }
            }
        }
    }
}

#[test]
fn glyphs_distinguish_shapes_at_both_sizes() {
    for size in Size::ALL {
        let masks: Vec<Vec<f64>> = Shape::ALL
            .iter()
            .map(|&s| {
                let scene = Scene::new(vec![SceneObject::new(s, Color::Red, *size, 0, 0)], 0).unwrap();
                render_scene(&scene, 16).unwrap().pixels().to_vec()
            })
            .collect();
        assert_ne!(masks[0], masks[1]);
        assert_ne!(masks[1], masks[2]);
        assert_ne!(masks[0], masks[2]);
    }
}

#[test]
fn hand_built_counting_example() {
    let scene = hand_scene();
    let e = instantiate("hand", 0, &scene, &tokens("how many blue shapes"), 16).unwrap();
    let chain: Vec<(String, String)> = e
        .chain
        .steps
        .iter()
        .map(|s| (s.question.join(" "), s.answer.join(" ")))
        .collect();
    assert_eq!(
        chain,
        vec![
            ("which shapes are blue".to_string(), "square circle".to_string()),
            ("how many is that".to_string(), "2".to_string()),
        ]
    );
    assert_eq!(e.answer, vec!["2"]);
    assert_eq!(e.answer_type, AnswerType::Number);
    assert_eq!(e.depth, 2);
}

#[test]
fn hand_built_existence_and_lookup() {
    let scene = hand_scene();
    let e = instantiate("hand", 0, &scene, &tokens("is there a red square"), 16).unwrap();
    assert_eq!(e.answer, vec!["no"]);
    assert_eq!(e.answer_type, AnswerType::YesNo);
    assert_eq!(ask(&scene, "what color is the square"), "blue");
    assert_eq!(ask(&scene, "what size is the red circle"), "large");
    assert_eq!(ask(&scene, "how many green shapes"), "0");
    assert_eq!(ask(&scene, "which shapes are green"), "none");
    assert_eq!(ask(&scene, "what color is the circle"), "none");
}

#[test]
fn hand_built_relational_and_comparison() {
    let scene = Scene::new(
        vec![
            SceneObject::new(Shape::Triangle, Color::Green, Size::Small, 1, 0),
            SceneObject::new(Shape::Square, Color::Blue, Size::Large, 1, 1),
            SceneObject::new(Shape::Circle, Color::Red, Size::Small, 3, 3),
            SceneObject::new(Shape::Circle, Color::Red, Size::Large, 0, 2),
        ],
        0,
    )
    .unwrap();
    assert_eq!(ask(&scene, "what shape is left of the blue square"), "triangle");
    assert_eq!(ask(&scene, "what color is right of the blue square"), "none");
    // Two red shapes against one blue shape, counted by hand.
    assert_eq!(ask(&scene, "are there more red shapes than blue shapes"), "yes");
    assert_eq!(ask(&scene, "are there more squares than circles"), "no");
    assert_eq!(ask(&scene, "are there more triangles than squares"), "no");

    let e = instantiate("rel", 0, &scene, &tokens("what shape is left of the blue square"), 16).unwrap();
    let qs: Vec<String> = e.chain.steps.iter().map(|s| s.question.join(" ")).collect();
    assert_eq!(
        qs,
        [
            "where is the blue square",
            "which cell is left of row 1 col 1",
            "what shape is at row 1 col 0"
        ]
    );
    assert_eq!(e.depth, 3);

    let e = instantiate(
        "cmp",
        0,
        &scene,
        &tokens("are there more red shapes than blue shapes"),
        16,
    )
    .unwrap();
    let answers: Vec<String> = e.chain.steps.iter().map(|s| s.answer.join(" ")).collect();
    assert_eq!(answers, ["circle circle", "2", "square", "1"]);
    assert_eq!(e.depth, 4);
}

#[test]
fn ill_posed_questions_are_rejected() {
    let scene = hand_scene();
    // Two circles: no unique referent.
    assert!(matches!(
        instantiate("x", 0, &scene, &tokens("what color is the circle"), 16),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        oracle_answer(&scene, &tokens("what is love")),
        Err(Error::Grammar(_))
    ));
    assert!(matches!(
        oracle_answer(&scene, &tokens("how many is that")),
        Err(Error::Grammar(_))
    ));
    assert_eq!(
        oracle_answer_in_chain(&scene, &[tokens("none")], &tokens("how many is that")).unwrap(),
        vec!["0"]
    );
}

#[test]
fn grammar_round_trips_generated_questions() {
    for seed in 0..200 {
        let e = generate_example(seed, (seed % 4 + 1) as usize).unwrap();
        for q in std::iter::once(&e.question).chain(e.chain.steps.iter().map(|s| &s.question)) {
            assert_eq!(&Question::parse(q).unwrap().render(), q);
        }
    }
}

#[test]
fn examples_are_deterministic_and_depth_matches_chain() {
    for depth in 1..=K_MAX {
        let a = generate_example(99, depth).unwrap();
        assert_eq!(a, generate_example(99, depth).unwrap());
        assert_eq!(a.depth, depth);
        assert_eq!(a.chain.len(), depth);
    }
    assert!(matches!(generate_example(1, 0), Err(Error::Config(_))));
    assert!(matches!(generate_example(1, K_MAX + 1), Err(Error::Config(_))));
}

#[test]
fn dataset_covers_all_answer_types() {
    let d = generate_dataset(
        &DataConfig {
            n_examples: 200,
            ..DataConfig::default()
        },
        5,
    )
    .unwrap();
    for t in AnswerType::ALL {
        assert!(d.examples.iter().any(|e| e.answer_type == t), "{t:?} missing");
    }
    for depth in 1..=K_MAX {
        assert!(d.examples.iter().any(|e| e.depth == depth));
    }
}

#[test]
fn depth_mix_is_validated_and_respected() {
    let bad = DataConfig {
        depth_mix: vec![1.0, 1.0],
        ..DataConfig::default()
    };
    assert!(matches!(generate_dataset(&bad, 0), Err(Error::Config(_))));
    let neg = DataConfig {
        depth_mix: vec![1.0, -1.0, 1.0, 1.0],
        ..DataConfig::default()
    };
    assert!(matches!(generate_dataset(&neg, 0), Err(Error::Config(_))));
    let only3 = DataConfig {
        n_examples: 30,
        depth_mix: vec![0.0, 0.0, 1.0, 0.0],
        ..DataConfig::default()
    };
    assert!(generate_dataset(&only3, 0)
        .unwrap()
        .examples
        .iter()
        .all(|e| e.depth == 3));
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = std::env::temp_dir().join(format!("selfq-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("d.jsonl");
    let d = generate_dataset(
        &DataConfig {
            n_examples: 50,
            ..DataConfig::default()
        },
        3,
    )
    .unwrap();
    write_dataset(&d, &path).unwrap();
    assert_eq!(read_dataset(&path, 16).unwrap(), d);

    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("{\"answer\":"));
    assert!(!text.lines().any(|l| l.ends_with(' ')));

    let truncated = &text[..text.len() - 10];
    std::fs::write(&path, truncated).unwrap();
    match read_dataset(&path, 16) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 50),
        other => panic!("expected parse error, got {other:?}"),
    }

    let dup = format!("{first}\n{first}\n");
    std::fs::write(&path, dup).unwrap();
    assert!(matches!(read_dataset(&path, 16), Err(Error::Validation(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}
