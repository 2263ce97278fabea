use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub num_probes: usize,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = f(&mut g, xv)?;
    if g.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    Ok(g.scalar_value(out))
}

/// Checks every coordinate of `x`.
pub fn finite_difference_check<F>(op_name: &str, f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(op_name, &f, x, h, &coords)
}

/// Checks `probes` coordinates drawn without replacement (all of them if `x` is smaller).
pub fn finite_difference_check_sampled<F>(
    op_name: &str,
    f: F,
    x: &Tensor,
    h: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = if probes >= x.numel() {
        (0..x.numel()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, x.numel(), probes).into_vec()
    };
    check_coords(op_name, &f, x, h, &coords)
}

fn check_coords<F>(op_name: &str, f: &F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Numeric(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().requiring_grad())?;
    let out = f(&mut g, xv)?;
    if g.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_rel_err: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = x.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = evaluate(f, &probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = evaluate(f, &probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err,
        num_probes: coords.len(),
    })
}
