//! Miniature prefix-LM vision-language model: patch-embedded image tokens
//! followed by a causal pre-norm transformer decoder over a closed vocabulary.

mod decode;
pub mod vocab;

pub use decode::DecoderState;
pub use vocab::Vocabulary;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::segment::{strict_visible, Segment};
use crate::taskgen::Image;
use crate::tensor::{AttentionMask, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 64,
            image_side: 16,
            channels: 3,
            patch_size: 4,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_side {}",
                self.patch_size, self.image_side
            )));
        }
        if self.max_seq_len < self.num_patches() + 2 {
            return Err(Error::Config(format!(
                "max_seq_len {} leaves no room for text after {} visual tokens",
                self.max_seq_len,
                self.num_patches()
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Longest token stream the model accepts after the visual prefix.
    pub fn max_text_len(&self) -> usize {
        self.max_seq_len - self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter path with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = FFN_MULT * d;
        let mut shapes = vec![
            ("patch.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch.bias".to_string(), vec![d]),
            ("embed.token".to_string(), vec![self.vocab_size, d]),
            ("embed.pos_visual".to_string(), vec![self.num_patches(), d]),
            ("embed.pos_text".to_string(), vec![self.max_text_len(), d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            shapes.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, f]),
                (p("mlp.fc.bias"), vec![f]),
                (p("mlp.proj.weight"), vec![f, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        shapes.extend([
            ("final_ln.gain".to_string(), vec![d]),
            ("final_ln.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.vocab_size]),
            ("head.bias".to_string(), vec![self.vocab_size]),
        ]);
        shapes
    }
}

/// Total number of scalar parameters implied by `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// All learnable weights, keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn is_gain(path: &str) -> bool {
    path.ends_with(".gain")
}

fn is_bias(path: &str) -> bool {
    path.ends_with(".bias")
}

/// Deterministic initialization: N(0, 0.02) weights, unit gains, zero biases.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = BTreeMap::new();
    for (path, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let values = if is_gain(&path) {
            vec![1.0; n]
        } else if is_bias(&path) {
            vec![0.0; n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &path));
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.insert(path, Tensor::new(shape, values)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Assembles parameters, checking every path and shape against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (path, shape) in &expected {
            match tensors.get(path) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Shape(format!("{path}: expected {shape:?}, got {:?}", t.shape()))),
                None => return Err(Error::Validation(format!("missing parameter {path}"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, path: &str) -> &Tensor {
        &self.tensors[path]
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `graph`, trainable or frozen.
    pub fn attach(&self, graph: &mut Graph, trainable: bool) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (path, t) in &self.tensors {
            let t = if trainable {
                t.clone().requiring_grad()
            } else {
                t.clone()
            };
            vars.insert(path.clone(), graph.leaf(t)?);
        }
        Ok(ParamVars { vars })
    }
}

/// Graph handles for every parameter.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Var {
        self.vars[path]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Substitutes the handle used for `path`.
    pub fn replace(&mut self, path: &str, var: Var) {
        if let Some(v) = self.vars.get_mut(path) {
            *v = var;
        }
    }
}

/// Flattens an image into `[num_patches, patch_dim]` rows, patches row-major,
/// pixels within a patch ordered by (row, column, channel).
pub fn image_patches(config: &ModelConfig, image: &Image) -> Result<Tensor> {
    if image.side() != config.image_side || image.channels() != config.channels {
        return Err(Error::Shape(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.side(),
            image.side(),
            image.channels(),
            config.image_side,
            config.image_side,
            config.channels
        )));
    }
    let (p, c, per_side) = (
        config.patch_size,
        config.channels,
        config.image_side / config.patch_size,
    );
    let mut values = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        values.push(image.get(py * p + dy, px * p + dx, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![config.num_patches(), config.patch_dim()], values)
}

/// Visual tokens: projected patches plus visual positional embeddings.
pub fn encode_image(graph: &mut Graph, params: &ParamVars, config: &ModelConfig, image: &Image) -> Result<Var> {
    let patches = graph.constant(image_patches(config, image)?)?;
    let projected = graph.linear(patches, params.get("patch.weight"), Some(params.get("patch.bias")))?;
    graph.add(projected, params.get("embed.pos_visual"))
}

fn check_tokens(config: &ModelConfig, token_ids: &[usize]) -> Result<()> {
    if token_ids.is_empty() {
        return Err(Error::Length("empty token sequence".into()));
    }
    if token_ids.len() > config.max_text_len() {
        return Err(Error::Length(format!(
            "{} tokens + {} visual tokens exceed max_seq_len {}",
            token_ids.len(),
            config.num_patches(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Attention mask over `[visual | text]`: the visual prefix is bidirectional,
/// text is causal and, when `segments` is given, also strictly conditioned.
pub fn prefix_lm_mask(num_patches: usize, segments: &[Segment], strict: bool) -> AttentionMask {
    AttentionMask::from_fn(num_patches + segments.len(), |q, k| {
        if q < num_patches {
            k < num_patches
        } else if k < num_patches {
            true
        } else {
            k <= q && (!strict || strict_visible(segments[q - num_patches], segments[k - num_patches]))
        }
    })
}

/// Builds the forward pass on `graph`; returns `[len(token_ids), vocab_size]` logits.
///
/// `segments` (same length as `token_ids`) switches on strict conditioning.
pub fn forward_on_graph(
    graph: &mut Graph,
    params: &ParamVars,
    config: &ModelConfig,
    image: &Image,
    token_ids: &[usize],
    segments: Option<&[Segment]>,
) -> Result<Var> {
    check_tokens(config, token_ids)?;
    let t = token_ids.len();
    let np = config.num_patches();
    let mask = match segments {
        Some(s) if s.len() == t => prefix_lm_mask(np, s, true),
        Some(s) => return Err(Error::Shape(format!("{} segment labels for {t} tokens", s.len()))),
        None => prefix_lm_mask(np, &vec![Segment::Context; t], false),
    };

    let visual = encode_image(graph, params, config, image)?;
    let tok = graph.embedding(params.get("embed.token"), token_ids)?;
    let pos = graph.slice_rows(params.get("embed.pos_text"), 0, t)?;
    let text = graph.add(tok, pos)?;
    let mut x = graph.concat_rows(&[visual, text])?;

    for l in 0..config.n_layers {
        let p = |s: &str| params.get(&format!("layers.{l}.{s}"));
        let h = graph.layer_norm(x, p("ln1.gain"), p("ln1.bias"), LN_EPS)?;
        let qkv = graph.linear(h, p("attn.qkv.weight"), Some(p("attn.qkv.bias")))?;
        let attn = graph.attention(qkv, config.n_heads, &mask)?;
        let o = graph.linear(attn, p("attn.out.weight"), Some(p("attn.out.bias")))?;
        x = graph.add(x, o)?;
        let h = graph.layer_norm(x, p("ln2.gain"), p("ln2.bias"), LN_EPS)?;
        let f = graph.linear(h, p("mlp.fc.weight"), Some(p("mlp.fc.bias")))?;
        let f = graph.gelu(f)?;
        let f = graph.linear(f, p("mlp.proj.weight"), Some(p("mlp.proj.bias")))?;
        x = graph.add(x, f)?;
    }

    let text_rows = graph.slice_rows(x, np, t)?;
    let h = graph.layer_norm(
        text_rows,
        params.get("final_ln.gain"),
        params.get("final_ln.bias"),
        LN_EPS,
    )?;
    graph.linear(h, params.get("head.weight"), Some(params.get("head.bias")))
}

/// Logits for every text position, with frozen parameters.
pub fn forward(params: &ModelParams, image: &Image, token_ids: &[usize]) -> Result<Tensor> {
    let mut graph = Graph::new();
    let vars = params.attach(&mut graph, false)?;
    let logits = forward_on_graph(&mut graph, &vars, params.config(), image, token_ids, None)?;
    Ok(graph.tensor(logits))
}

#[cfg(test)]
mod tests;
