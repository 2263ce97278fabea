//! Dense `f64` tensors with a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] owns every node created while building a computation. Ops
//! return [`Var`] handles into the graph; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into every leaf that requires them.
//! There is no broadcasting: binary elementwise ops demand equal shapes, and
//! bias addition only exists inside the fused [`Graph::linear`] op.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};

use crate::error::{Error, Result};

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
}

/// Boolean `[queries, keys]` visibility matrix for self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    size: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    /// Causal mask where the first `prefix` positions additionally see each other.
    pub fn causal_with_prefix(size: usize, prefix: usize) -> Self {
        Self::from_fn(size, |q, k| k <= q || k < prefix)
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(size * size);
        for q in 0..size {
            for k in 0..size {
                visible.push(f(q, k));
            }
        }
        Self { size, visible }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.size + key]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise {
        kind: ElementwiseKind,
        a: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Confined to one thread; build a fresh graph per example.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, op_name: &str) -> Result<Var> {
        check_finite(op_name, &values)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Elementwise { a, b, .. } => std::iter::once(*a).chain(*b).collect(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => [*x, *w].into_iter().chain(*b).collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x } | Op::Sum { x } | Op::SliceRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Attention { qkv, .. } => vec![*qkv],
        }
    }

    /// Adds a leaf; it participates in differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        check_finite("leaf", &tensor.values)?;
        let requires_grad = tensor.requires_grad;
        let grad = if requires_grad { tensor.grad } else { None };
        self.nodes.push(Node {
            shape: tensor.shape,
            values: tensor.values,
            grad,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a node as a standalone tensor, including its gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let av = &self.nodes[a.0];
        check_finite("elementwise input", &av.values)?;
        let shape = av.shape.clone();
        let values: Vec<f64> = match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => {
                let b = b.ok_or_else(|| Error::Shape(format!("{kind:?} needs two operands")))?;
                let bv = &self.nodes[b.0];
                if bv.shape != av.shape {
                    return Err(Error::Shape(format!("{kind:?}: {:?} vs {:?}", av.shape, bv.shape)));
                }
                check_finite("elementwise input", &bv.values)?;
                let f: fn(f64, f64) -> f64 = match kind {
                    ElementwiseKind::Add => |x, y| x + y,
                    ElementwiseKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                av.values.iter().zip(&bv.values).map(|(&x, &y)| f(x, y)).collect()
            }
            ElementwiseKind::Scale(c) => {
                if !c.is_finite() {
                    return Err(Error::Numeric("non-finite scale constant".into()));
                }
                av.values.iter().map(|x| x * c).collect()
            }
            ElementwiseKind::Relu => av.values.iter().map(|&x| x.max(0.0)).collect(),
            ElementwiseKind::Gelu => av.values.iter().map(|&x| kernels::gelu(x)).collect(),
        };
        let b = match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => b,
            _ => None,
        };
        self.push(Op::Elementwise { kind, a, b }, shape, values, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.elementwise(ElementwiseKind::Scale(c), a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Relu, a, None)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Gelu, a, None)
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("{what} must be rank-2, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul lhs")?;
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, "matmul")
    }

    /// Fused `x · w + b` with `b` of shape `[n]` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.rank2(x, "linear input")?;
        let (k2, n) = self.rank2(w, "linear weight")?;
        if k != k2 {
            return Err(Error::Shape(format!("linear inner dimensions {k} vs {k2}")));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [n] {
                return Err(Error::Shape(format!(
                    "linear bias must be [{n}], got {:?}",
                    self.nodes[b.0].shape
                )));
            }
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = b.map(|b| self.nodes[b.0].values.as_slice());
        let mut out = vec![0.0; m * n];
        kernels::linear_rows(xv, wv, bv, m, k, n, &mut out);
        self.push(Op::Linear { x, w, b, m, k, n }, vec![m, n], out, "linear")
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Numeric(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Shape("layer_norm over an empty axis".into()));
        }
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(Error::Shape(format!("layer_norm gain/bias must be [{d}]")));
        }
        let (rows, _) = rows_cols(&shape);
        let (xv, gv, bv) = (
            &self.nodes[x.0].values,
            &self.nodes[gain.0].values,
            &self.nodes[bias.0].values,
        );
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            stats.push(kernels::layer_norm_row(
                &xv[r * d..(r + 1) * d],
                gv,
                bv,
                eps,
                &mut out[r * d..(r + 1) * d],
            ));
        }
        self.push(Op::LayerNorm { x, gain, bias, stats }, shape, out, "layer_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let mut out = self.nodes[x.0].values.clone();
        for row in out.chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.push(Op::Softmax { x }, shape, out, "softmax")
    }

    /// Weighted token cross-entropy: `Σ_t w_t · (−log softmax(logits_t)[target_t])`.
    ///
    /// Positions with weight zero contribute exactly nothing, to the value and the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (t, v) = self.rank2(logits, "cross_entropy logits")?;
        if targets.len() != t || weights.len() != t {
            return Err(Error::Shape(format!(
                "cross_entropy: {t} positions but {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite cross_entropy weight".into()));
        }
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for p in 0..t {
            if weights[p] == 0.0 {
                continue;
            }
            let row = &lv[p * v..(p + 1) * v];
            let lse = kernels::log_sum_exp(row);
            loss += weights[p] * (lse - row[targets[p]]);
            let pr = &mut probs[p * v..(p + 1) * v];
            pr.copy_from_slice(row);
            kernels::softmax_in_place(pr);
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].values.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![s], "sum")
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.rank2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding of an empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("token id {bad} outside table of {rows} rows")));
        }
        let tv = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            "embedding",
        )
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rank2(x, "slice_rows input")?;
        if len == 0 || start + len > rows {
            return Err(Error::Shape(format!("slice {start}..{} of {rows} rows", start + len)));
        }
        let out = self.nodes[x.0].values[start * d..(start + len) * d].to_vec();
        self.push(Op::SliceRows { x, start }, vec![len, d], out, "slice_rows")
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = 0;
        let mut d = None;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows part")?;
            if d.is_some_and(|d| d != c) {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            d = Some(c);
            rows += r;
        }
        let d = d.ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            vec![rows, d],
            out,
            "concat_rows",
        )
    }

    /// Multi-head self-attention over a packed `[T, 3·d]` query/key/value matrix.
    pub fn attention(&mut self, qkv: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (t, three_d) = self.rank2(qkv, "attention input")?;
        if three_d % 3 != 0 || heads == 0 || (three_d / 3) % heads != 0 {
            return Err(Error::Shape(format!("attention: width {three_d} with {heads} heads")));
        }
        if mask.size() != t {
            return Err(Error::Shape(format!(
                "attention mask for {} positions, input has {t}",
                mask.size()
            )));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[qkv.0].values;
        let mut out = vec![0.0; t * d];
        let mut probs = vec![0.0; heads * t * t];
        for h in 0..heads {
            for i in 0..t {
                let q = &qv[i * three_d + h * dh..i * three_d + (h + 1) * dh];
                let key = |j: usize| &qv[j * three_d + d + h * dh..j * three_d + d + (h + 1) * dh];
                let value = |j: usize| &qv[j * three_d + 2 * d + h * dh..j * three_d + 2 * d + (h + 1) * dh];
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                kernels::attend(
                    q,
                    t,
                    key,
                    value,
                    |j| mask.is_visible(i, j),
                    scale,
                    p,
                    &mut out[i * d + h * dh..i * d + (h + 1) * dh],
                );
            }
        }
        self.push(
            Op::Attention {
                qkv,
                heads,
                mask: mask.clone(),
                probs,
            },
            vec![t, d],
            out,
            "attention",
        )
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is moved out temporarily so input nodes can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Elementwise { kind, a, b } => {
                let av = &self.nodes[a.0].values;
                match kind {
                    ElementwiseKind::Add => {
                        self.accumulate(*a, g);
                        self.accumulate(b.unwrap(), g);
                    }
                    ElementwiseKind::Sub => {
                        self.accumulate(*a, g);
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        self.accumulate(b.unwrap(), &neg);
                    }
                    ElementwiseKind::Mul => {
                        let b = b.unwrap();
                        let bv = &self.nodes[b.0].values;
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                        let gb: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                        self.accumulate(*a, &ga);
                        self.accumulate(b, &gb);
                    }
                    ElementwiseKind::Scale(c) => {
                        let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                        self.accumulate(*a, &ga);
                    }
                    ElementwiseKind::Relu => {
                        let ga: Vec<f64> = g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                        self.accumulate(*a, &ga);
                    }
                    ElementwiseKind::Gelu => {
                        let ga: Vec<f64> = g.iter().zip(av).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                        self.accumulate(*a, &ga);
                    }
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(g, &self.nodes[b.0].values, m, k, n, &mut ga);
                    self.accumulate(a, &ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(&self.nodes[a.0].values, g, m, k, n, &mut gb);
                    self.accumulate(b, &gb);
                }
            }
            &Op::Linear { x, w, b, m, k, n } => {
                if self.wants(x) {
                    let mut gx = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(g, &self.nodes[w.0].values, m, k, n, &mut gx);
                    self.accumulate(x, &gx);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(&self.nodes[x.0].values, g, m, k, n, &mut gw);
                    self.accumulate(w, &gw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = self.nodes[gain.0].values.len();
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gain.0].values;
                let mut gx = vec![0.0; xv.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dxhat[i] = gr[i] * gv[i];
                        ggain[i] += gr[i] * xhat[i];
                        gbias[i] += gr[i];
                    }
                    let mean_dx = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx_xhat = kernels::dot(&dxhat, &xhat) / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = rstd * (dxhat[i] - mean_dx - xhat[i] * mean_dx_xhat);
                    }
                }
                let (x, gain, bias) = (*x, *gain, *bias);
                self.accumulate(x, &gx);
                self.accumulate(gain, &ggain);
                self.accumulate(bias, &gbias);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[idx].values;
                let d = *self.nodes[idx].shape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let s = kernels::dot(yr, gr);
                    for i in 0..d {
                        out[i] = yr[i] * (gr[i] - s);
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let mut gl = vec![0.0; probs.len()];
                for (p, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w * g[0];
                    for j in 0..v {
                        gl[p * v + j] = scale * probs[p * v + j];
                    }
                    gl[p * v + tgt] -= scale;
                }
                self.accumulate(*logits, &gl);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].values.len();
                self.accumulate(*x, &vec![g[0]; n]);
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut gt = vec![0.0; self.nodes[table.0].values.len()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(*table, &gt);
            }
            Op::SliceRows { x, start } => {
                let d = self.nodes[x.0].shape[1];
                let mut gx = vec![0.0; self.nodes[x.0].values.len()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                self.accumulate(*x, &gx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    self.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Attention {
                qkv,
                heads,
                mask,
                probs,
            } => {
                let t = mask.size();
                let three_d = self.nodes[qkv.0].shape[1];
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = &self.nodes[qkv.0].values;
                let mut gq = vec![0.0; qv.len()];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut weighted = 0.0;
                        for j in 0..t {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &qv[j * three_d + vo..j * three_d + vo + dh];
                            dp[j] = kernels::dot(go, vj);
                            weighted += p[j] * dp[j];
                            for c in 0..dh {
                                gq[j * three_d + vo + c] += p[j] * go[c];
                            }
                        }
                        for j in 0..t {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            for c in 0..dh {
                                gq[i * three_d + qo + c] += ds * qv[j * three_d + ko + c];
                                gq[j * three_d + ko + c] += ds * qv[i * three_d + qo + c];
                            }
                        }
                    }
                }
                self.accumulate(*qkv, &gq);
            }
        }
        self.nodes[idx].op = op;
    }
}
