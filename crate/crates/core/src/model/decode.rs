use super::{image_patches, ModelParams, FFN_MULT, LN_EPS};
use crate::error::{Error, Result};
use crate::segment::{strict_visible, Segment};
use crate::taskgen::Image;
use crate::tensor::kernels;

/// Incremental decoder with cached keys and values.
///
/// Runs the same row kernels, in the same order, as the graph forward pass,
/// so logits match [`super::forward`] exactly.
pub struct DecoderState<'a> {
    params: &'a ModelParams,
    strict: bool,
    /// Per layer: keys and values of every position so far, `d_model` each.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    segments: Vec<Segment>,
    tokens: Vec<usize>,
    logits: Vec<f64>,
}

struct Scratch {
    h: Vec<f64>,
    qkv: Vec<f64>,
    attn: Vec<f64>,
    proj: Vec<f64>,
    ff: Vec<f64>,
    probs: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, max_len: usize) -> Self {
        Self {
            h: vec![0.0; d],
            qkv: vec![0.0; 3 * d],
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            ff: vec![0.0; FFN_MULT * d],
            probs: vec![0.0; max_len],
        }
    }
}

impl<'a> DecoderState<'a> {
    /// Encodes the visual prefix. `strict` applies segment-restricted conditioning.
    pub fn new(params: &'a ModelParams, image: &Image, strict: bool) -> Result<Self> {
        let cfg = params.config();
        let (d, np) = (cfg.d_model, cfg.num_patches());
        let patches = image_patches(cfg, image)?;
        let w = params.get("patch.weight").values();
        let b = params.get("patch.bias").values();
        let pos = params.get("embed.pos_visual").values();
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(np);
        for (r, patch) in patches.values().chunks(cfg.patch_dim()).enumerate() {
            let mut row = vec![0.0; d];
            kernels::linear_row(patch, w, Some(b), d, &mut row);
            xs.push(row.iter().zip(&pos[r * d..(r + 1) * d]).map(|(a, p)| a + p).collect());
        }

        let mut state = Self {
            params,
            strict,
            keys: vec![Vec::with_capacity(cfg.max_seq_len * d); cfg.n_layers],
            values: vec![Vec::with_capacity(cfg.max_seq_len * d); cfg.n_layers],
            segments: Vec::new(),
            tokens: Vec::new(),
            logits: Vec::new(),
        };
        let mut s = Scratch::new(d, cfg.max_seq_len);
        // Layer by layer so the prefix attends bidirectionally within itself.
        for l in 0..cfg.n_layers {
            let mut qs = Vec::with_capacity(np * d);
            for x in &xs {
                state.qkv_row(l, x, &mut s);
                qs.extend_from_slice(&s.qkv[..d]);
                state.keys[l].extend_from_slice(&s.qkv[d..2 * d]);
                state.values[l].extend_from_slice(&s.qkv[2 * d..]);
            }
            for (i, x) in xs.iter_mut().enumerate() {
                state.attend_row(l, &qs[i * d..(i + 1) * d], np, |_| true, &mut s);
                state.finish_layer(l, x, &mut s);
            }
        }
        Ok(state)
    }

    fn p(&self, path: &str) -> &'a [f64] {
        self.params.get(path).values()
    }

    fn layer(&self, l: usize, s: &str) -> &'a [f64] {
        self.params.get(&format!("layers.{l}.{s}")).values()
    }

    fn qkv_row(&self, l: usize, x: &[f64], s: &mut Scratch) {
        let d = x.len();
        kernels::layer_norm_row(
            x,
            self.layer(l, "ln1.gain"),
            self.layer(l, "ln1.bias"),
            LN_EPS,
            &mut s.h,
        );
        kernels::linear_row(
            &s.h,
            self.layer(l, "attn.qkv.weight"),
            Some(self.layer(l, "attn.qkv.bias")),
            3 * d,
            &mut s.qkv,
        );
    }

    fn attend_row(&self, l: usize, q: &[f64], n_keys: usize, visible: impl Fn(usize) -> bool, s: &mut Scratch) {
        let cfg = self.params.config();
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (keys, values) = (&self.keys[l], &self.values[l]);
        for h in 0..cfg.n_heads {
            let key = |j: usize| &keys[j * d + h * dh..j * d + (h + 1) * dh];
            let value = |j: usize| &values[j * d + h * dh..j * d + (h + 1) * dh];
            kernels::attend(
                &q[h * dh..(h + 1) * dh],
                n_keys,
                key,
                value,
                &visible,
                scale,
                &mut s.probs[..n_keys],
                &mut s.attn[h * dh..(h + 1) * dh],
            );
        }
    }

    /// Output projection, residual, and feed-forward block for one row.
    fn finish_layer(&self, l: usize, x: &mut [f64], s: &mut Scratch) {
        let d = x.len();
        kernels::linear_row(
            &s.attn,
            self.layer(l, "attn.out.weight"),
            Some(self.layer(l, "attn.out.bias")),
            d,
            &mut s.proj,
        );
        for (xi, o) in x.iter_mut().zip(&s.proj) {
            *xi += o;
        }
        kernels::layer_norm_row(
            x,
            self.layer(l, "ln2.gain"),
            self.layer(l, "ln2.bias"),
            LN_EPS,
            &mut s.h,
        );
        kernels::linear_row(
            &s.h,
            self.layer(l, "mlp.fc.weight"),
            Some(self.layer(l, "mlp.fc.bias")),
            FFN_MULT * d,
            &mut s.ff,
        );
        for v in s.ff.iter_mut() {
            *v = kernels::gelu(*v);
        }
        kernels::linear_row(
            &s.ff,
            self.layer(l, "mlp.proj.weight"),
            Some(self.layer(l, "mlp.proj.bias")),
            d,
            &mut s.proj,
        );
        for (xi, o) in x.iter_mut().zip(&s.proj) {
            *xi += o;
        }
    }

    /// Number of text tokens consumed so far.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Remaining text capacity.
    pub fn remaining(&self) -> usize {
        self.params.config().max_text_len() - self.tokens.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Logits predicting the token after the last pushed one.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Feeds one token and computes the next-token logits.
    pub fn push(&mut self, token: usize, segment: Segment) -> Result<&[f64]> {
        let cfg = self.params.config();
        if self.remaining() == 0 {
            return Err(Error::Length(format!(
                "context of {} text tokens is full",
                cfg.max_text_len()
            )));
        }
        if token >= cfg.vocab_size {
            return Err(Error::Index(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let (d, np) = (cfg.d_model, cfg.num_patches());
        let t = self.tokens.len();
        self.tokens.push(token);
        self.segments.push(segment);

        let emb = &self.p("embed.token")[token * d..(token + 1) * d];
        let pos = &self.p("embed.pos_text")[t * d..(t + 1) * d];
        let mut x: Vec<f64> = emb.iter().zip(pos).map(|(e, p)| e + p).collect();
        let mut s = Scratch::new(d, cfg.max_seq_len);
        let q_pos = np + t;
        for l in 0..cfg.n_layers {
            self.qkv_row(l, &x, &mut s);
            self.keys[l].extend_from_slice(&s.qkv[d..2 * d]);
            self.values[l].extend_from_slice(&s.qkv[2 * d..]);
            let q = s.qkv[..d].to_vec();
            let strict = self.strict;
            let segs = &self.segments;
            let visible = |k: usize| k < np || !strict || strict_visible(segs[t], segs[k - np]);
            self.attend_row(l, &q, q_pos + 1, visible, &mut s);
            self.finish_layer(l, &mut x, &mut s);
        }
        kernels::layer_norm_row(&x, self.p("final_ln.gain"), self.p("final_ln.bias"), LN_EPS, &mut s.h);
        self.logits.resize(cfg.vocab_size, 0.0);
        kernels::linear_row(
            &s.h,
            self.p("head.weight"),
            Some(self.p("head.bias")),
            cfg.vocab_size,
            &mut self.logits,
        );
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite logits".into()));
        }
        Ok(&self.logits)
    }
}
