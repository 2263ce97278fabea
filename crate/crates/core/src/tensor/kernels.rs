//! Row kernels shared by the differentiable graph and the cached decoder.
//!
//! Both execution paths call exactly these functions in the same order, so
//! a token's logits are bit-identical whichever path produced them.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `out = x · w + b` for one row. `w` is `[k, n]` row-major.
pub(crate) fn linear_row(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (kk, &xv) in x.iter().enumerate() {
        let w_row = &w[kk * n..(kk + 1) * n];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
    if let Some(b) = b {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// `linear_row` over `m` rows, four at a time. Every output element sees the
/// same operations in the same order as `linear_row`.
pub(crate) fn linear_rows(x: &[f64], w: &[f64], b: Option<&[f64]>, m: usize, k: usize, n: usize, out: &mut [f64]) {
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let xs = &x[i * k..(i + 4) * k];
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        o0.fill(0.0);
        o1.fill(0.0);
        o2.fill(0.0);
        o3.fill(0.0);
        for kk in 0..k {
            let (x0, x1, x2, x3) = (xs[kk], xs[k + kk], xs[2 * k + kk], xs[3 * k + kk]);
            let w_row = &w[kk * n..(kk + 1) * n];
            for j in 0..n {
                let wv = w_row[j];
                o0[j] += x0 * wv;
                o1[j] += x1 * wv;
                o2[j] += x2 * wv;
                o3[j] += x3 * wv;
            }
        }
        if let Some(b) = b {
            for o in [o0, o1, o2, o3] {
                for (o, &bv) in o.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
    }
    for i in blocks * 4..m {
        linear_row(&x[i * k..(i + 1) * k], w, b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// `[m, k] · [k, n]` into an `[m, n]` buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    linear_rows(a, b, None, m, k, n, out);
}

/// Accumulates `g · bᵀ` into `grad_a` (`g` is `[m, n]`, `b` is `[k, n]`).
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, grad_a: &mut [f64]) {
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let rows = [
            &g[i * n..(i + 1) * n],
            &g[(i + 1) * n..(i + 2) * n],
            &g[(i + 2) * n..(i + 3) * n],
            &g[(i + 3) * n..(i + 4) * n],
        ];
        for kk in 0..k {
            let d = dot4(rows, &b[kk * n..(kk + 1) * n]);
            for (r, v) in d.into_iter().enumerate() {
                grad_a[(i + r) * k + kk] += v;
            }
        }
    }
    for i in blocks * 4..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            grad_a[i * k + kk] += dot(g_row, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `dot` of four rows against one shared vector.
fn dot4(rows: [&[f64]; 4], v: &[f64]) -> [f64; 4] {
    let n = v.len();
    let full = n - n % 4;
    let mut acc = [[0.0; 4]; 4];
    let mut c = 0;
    while c < full {
        for l in 0..4 {
            let vl = v[c + l];
            for r in 0..4 {
                acc[r][l] += rows[r][c + l] * vl;
            }
        }
        c += 4;
    }
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut tail = 0.0;
        for j in full..n {
            tail += rows[r][j] * v[j];
        }
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

/// Accumulates `aᵀ · g` into `grad_b` (`a` is `[m, k]`, `g` is `[m, n]`), adding rows in order.
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, grad_b: &mut [f64]) {
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let (g0, g1, g2, g3) = (
            &g[i * n..(i + 1) * n],
            &g[(i + 1) * n..(i + 2) * n],
            &g[(i + 2) * n..(i + 3) * n],
            &g[(i + 3) * n..(i + 4) * n],
        );
        for kk in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            );
            let gb = &mut grad_b[kk * n..(kk + 1) * n];
            for j in 0..n {
                let mut acc = gb[j];
                acc += a0 * g0[j];
                acc += a1 * g1[j];
                acc += a2 * g2[j];
                acc += a3 * g3[j];
                gb[j] = acc;
            }
        }
    }
    for i in blocks * 4..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let gb = &mut grad_b[kk * n..(kk + 1) * n];
            for (o, &gv) in gb.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Dot product with four interleaved partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Normalizes one row; returns `(mean, 1/sqrt(var + eps))`.
pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// In-place numerically stable softmax of one slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))` with max-subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Single-query scaled dot-product attention over `n_keys` keys.
///
/// `key(j)` / `value(j)` return head-sized slices; `visible(j)` masks keys.
/// Writes normalized weights into `probs` (zero where masked) and the
/// weighted value sum into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<'a, K, V, M>(
    q: &[f64],
    n_keys: usize,
    key: K,
    value: V,
    visible: M,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) where
    K: Fn(usize) -> &'a [f64],
    V: Fn(usize) -> &'a [f64],
    M: Fn(usize) -> bool,
{
    let mut max = f64::NEG_INFINITY;
    for j in 0..n_keys {
        if visible(j) {
            let s = dot(q, key(j)) * scale;
            probs[j] = s;
            if s > max {
                max = s;
            }
        } else {
            probs[j] = 0.0;
        }
    }
    let mut sum = 0.0;
    for j in 0..n_keys {
        if visible(j) {
            let e = (probs[j] - max).exp();
            probs[j] = e;
            sum += e;
        }
    }
    out.fill(0.0);
    for j in 0..n_keys {
        if visible(j) {
            probs[j] /= sum;
            let p = probs[j];
            for (o, &v) in out.iter_mut().zip(value(j)) {
                *o += p * v;
            }
        }
    }
}
