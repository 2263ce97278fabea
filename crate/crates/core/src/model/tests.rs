use super::*;
use crate::taskgen::{generate_example, render_scene};
use crate::tensor::finite_difference_check_sampled;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 40,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn sample_image() -> Image {
    let e = generate_example(11, 3).unwrap();
    render_scene(&e.scene, 16).unwrap()
}

#[test]
fn parameter_count_of_reference_config() {
    // patch 48*64+64, token 64*64, positions (16+112)*64, 2 layers of 12*64^2+13*64,
    // final norm 2*64, head 64*64+64.
    assert_eq!(param_count(&ModelConfig::default()), 119_680);
    let params = init_params(&ModelConfig::default()).unwrap();
    assert_eq!(params.num_values(), 119_680);
}

#[test]
fn config_validation() {
    let bad_heads = ModelConfig {
        n_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let bad_patch = ModelConfig {
        patch_size: 5,
        ..ModelConfig::default()
    };
    assert!(matches!(init_params(&bad_patch), Err(Error::Config(_))));
    let short = ModelConfig {
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    assert!(matches!(short.validate(), Err(Error::Config(_))));
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let a = init_params(&small_config()).unwrap();
    assert_eq!(a, init_params(&small_config()).unwrap());
    let b = init_params(&ModelConfig {
        seed: 4,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.get("head.weight"), b.get("head.weight"));
    assert!(a.get("layers.0.ln1.gain").values().iter().all(|&v| v == 1.0));
    assert!(a.get("layers.1.mlp.fc.bias").values().iter().all(|&v| v == 0.0));
}

#[test]
fn blank_image_embeds_to_positional_embeddings() {
    let params = init_params(&ModelConfig::default()).unwrap();
    let mut g = Graph::new();
    let vars = params.attach(&mut g, false).unwrap();
    let v = encode_image(&mut g, &vars, params.config(), &Image::blank(16, 3)).unwrap();
    assert_eq!(g.shape(v), &[16, 64]);
    assert_eq!(g.value(v), params.get("embed.pos_visual").values());
}

#[test]
fn image_shape_mismatch_is_rejected() {
    let params = init_params(&small_config()).unwrap();
    assert!(matches!(
        forward(&params, &Image::blank(8, 3), &[1, 6]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn fresh_model_predicts_near_uniform() {
    let params = init_params(&ModelConfig::default()).unwrap();
    let ids: Vec<usize> = (0..20).map(|i| 6 + i % 40).collect();
    let logits = forward(&params, &sample_image(), &ids).unwrap();
    assert_eq!(logits.shape(), &[20, 64]);
    let mut g = Graph::new();
    let l = g.constant(logits).unwrap();
    let targets: Vec<usize> = (0..20).map(|i| (7 * i) % 64).collect();
    let ce = g.cross_entropy(l, &targets, &[1.0 / 20.0; 20]).unwrap();
    let ln_v = (64f64).ln();
    assert!(
        (g.scalar_value(ce) - ln_v).abs() < 0.15 * ln_v,
        "{} vs {ln_v}",
        g.scalar_value(ce)
    );
}

#[test]
fn logits_are_causal() {
    let params = init_params(&small_config()).unwrap();
    let img = sample_image();
    let a = [1, 6, 7, 8, 9, 10, 11];
    let mut b = a;
    b[5] = 40;
    b[6] = 41;
    let (la, lb) = (forward(&params, &img, &a).unwrap(), forward(&params, &img, &b).unwrap());
    let v = params.config().vocab_size;
    for (x, y) in la.values()[..5 * v].iter().zip(&lb.values()[..5 * v]) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_ne!(la.values()[5 * v..], lb.values()[5 * v..]);
}

#[test]
fn length_and_token_limits() {
    let params = init_params(&small_config()).unwrap();
    let img = sample_image();
    let max = params.config().max_text_len();
    assert!(forward(&params, &img, &vec![6; max]).is_ok());
    assert!(matches!(
        forward(&params, &img, &vec![6; max + 1]),
        Err(Error::Length(_))
    ));
    assert!(matches!(forward(&params, &img, &[1, 64]), Err(Error::Index(_))));
    assert!(matches!(forward(&params, &img, &[]), Err(Error::Length(_))));
}

#[test]
fn decoder_matches_graph_forward() {
    let params = init_params(&small_config()).unwrap();
    let img = sample_image();
    let ids = [1, 6, 9, 12, 3, 20, 21, 4, 30, 5, 33];
    let full = forward(&params, &img, &ids).unwrap();
    let v = params.config().vocab_size;
    let mut dec = DecoderState::new(&params, &img, false).unwrap();
    for (t, &id) in ids.iter().enumerate() {
        let row = dec.push(id, Segment::Context).unwrap();
        for (a, b) in row.iter().zip(&full.values()[t * v..(t + 1) * v]) {
            assert!((a - b).abs() <= 1e-12, "position {t}: {a} vs {b}");
        }
    }
}

#[test]
fn strict_decoder_matches_strict_graph() {
    let params = init_params(&small_config()).unwrap();
    let img = sample_image();
    let ids = [1, 6, 9, 3, 20, 21, 4, 30, 3, 22, 4, 31, 5, 33];
    use Segment::*;
    let segs = [
        Context,
        Context,
        Context,
        SubQuestion(1),
        SubQuestion(1),
        SubQuestion(1),
        SubAnswer(1),
        SubAnswer(1),
        SubQuestion(2),
        SubQuestion(2),
        SubAnswer(2),
        SubAnswer(2),
        Final,
        Final,
    ];
    let mut g = Graph::new();
    let vars = params.attach(&mut g, false).unwrap();
    let logits = forward_on_graph(&mut g, &vars, params.config(), &img, &ids, Some(&segs)).unwrap();
    let full = g.tensor(logits);
    let v = params.config().vocab_size;
    let mut dec = DecoderState::new(&params, &img, true).unwrap();
    for (t, (&id, &s)) in ids.iter().zip(&segs).enumerate() {
        let row = dec.push(id, s).unwrap();
        assert_eq!(row, &full.values()[t * v..(t + 1) * v]);
    }
    let loose = forward(&params, &img, &ids).unwrap();
    assert_ne!(loose.values()[9 * v..10 * v], full.values()[9 * v..10 * v]);
}

#[test]
fn decoder_rejects_overflow() {
    let params = init_params(&small_config()).unwrap();
    let mut dec = DecoderState::new(&params, &sample_image(), false).unwrap();
    for _ in 0..params.config().max_text_len() {
        dec.push(6, Segment::Context).unwrap();
    }
    assert_eq!(dec.remaining(), 0);
    assert!(matches!(dec.push(6, Segment::Context), Err(Error::Length(_))));
}

#[test]
fn gradient_spot_checks_through_the_model() {
    let params = init_params(&ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ..small_config()
    })
    .unwrap();
    let img = sample_image();
    let ids = [1usize, 6, 9, 12, 5];
    let targets = [6usize, 9, 12, 5, 2];
    for path in [
        "layers.0.attn.qkv.weight",
        "layers.0.mlp.fc.weight",
        "patch.weight",
        "embed.token",
        "final_ln.gain",
    ] {
        let report = finite_difference_check_sampled(
            path,
            |g, x| {
                let mut vars = params.attach(g, false)?;
                vars.replace(path, x);
                let logits = forward_on_graph(g, &vars, params.config(), &img, &ids, None)?;
                g.cross_entropy(logits, &targets, &[1.0; 5])
            },
            params.get(path),
            1e-5,
            12,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{path}: {}", report.max_rel_err);
    }
}

#[test]
fn patch_embeddings_are_local() {
    let params = init_params(&ModelConfig::default()).unwrap();
    let a = Image::blank(16, 3);
    let mut pixels = a.pixels().to_vec();
    // Pixel (5, 9) lies in patch row 1, column 2.
    pixels[(5 * 16 + 9) * 3 + 1] = 1.0;
    let b = Image::new(16, 3, pixels).unwrap();
    let embed = |img: &Image| {
        let mut g = Graph::new();
        let vars = params.attach(&mut g, false).unwrap();
        let v = encode_image(&mut g, &vars, params.config(), img).unwrap();
        g.value(v).to_vec()
    };
    let (ea, eb) = (embed(&a), embed(&b));
    for r in 0..16 {
        assert_eq!(ea[r * 64..(r + 1) * 64] != eb[r * 64..(r + 1) * 64], r == 6, "row {r}");
    }
}

#[test]
fn each_layer_adds_a_fixed_block() {
    let base = ModelConfig::default();
    let one = param_count(&ModelConfig {
        n_layers: 1,
        ..base.clone()
    });
    let two = param_count(&base);
    let four = param_count(&ModelConfig { n_layers: 4, ..base });
    assert_eq!(two - one, 12 * 64 * 64 + 13 * 64);
    assert_eq!(four - two, 2 * (two - one));
}

#[test]
fn every_parameter_receives_gradient() {
    let params = init_params(&small_config()).unwrap();
    let mut g = Graph::new();
    let vars = params.attach(&mut g, true).unwrap();
    let ids = [1, 6, 9, 12, 5];
    let logits = forward_on_graph(&mut g, &vars, params.config(), &sample_image(), &ids, None).unwrap();
    let loss = g.cross_entropy(logits, &[6, 9, 12, 5, 2], &[1.0; 5]).unwrap();
    g.backward(loss).unwrap();
    for (path, &v) in vars.iter() {
        let grad = g.grad(v).unwrap();
        assert!(grad.iter().any(|&x| x != 0.0), "{path} has no gradient");
    }
}

#[test]
fn argmax_ignores_positive_rescaling() {
    let params = init_params(&small_config()).unwrap();
    let logits = forward(&params, &sample_image(), &[1, 6, 9, 12]).unwrap();
    let v = params.config().vocab_size;
    for row in logits.values().chunks(v) {
        let scaled: Vec<f64> = row.iter().map(|x| x * 3.7).collect();
        assert_eq!(crate::objective::argmax(row), crate::objective::argmax(&scaled));
    }
}
