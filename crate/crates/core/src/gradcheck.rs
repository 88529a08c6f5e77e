//! Central finite-difference checks for tape gradients (f64 only).
//!
//! The numeric side only ever evaluates forward passes on untracked
//! constants, so it is independent of every backward implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// `max |analytic - numeric| / max |numeric|`, worst over all inputs.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Which elements to perturb.
pub enum Selection<'a> {
    All,
    /// `(input index, flat element index)` pairs.
    Elements(&'a [(usize, usize)]),
}

/// Compares tape gradients of a scalar function against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], selection: Selection<'_>, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        let grads = tape.backward(&out)?;
        leaves.iter().map(|l| grads.wrt(l)).collect()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let consts: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &consts)?.value().item()
    };

    let pairs: Vec<(usize, usize)> = match selection {
        Selection::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
            .collect(),
        Selection::Elements(p) => p.to_vec(),
    };

    let mut numeric: Vec<Vec<(f64, f64)>> = vec![Vec::new(); inputs.len()];
    let mut work = inputs.to_vec();
    for &(i, e) in &pairs {
        let base = inputs[i].data()[e];
        work[i].data_mut()[e] = base + STEP;
        let up = eval(&work)?;
        work[i].data_mut()[e] = base - STEP;
        let down = eval(&work)?;
        work[i].data_mut()[e] = base;
        numeric[i].push(((up - down) / (2.0 * STEP), analytic[i].data()[e]));
    }

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: pairs.len(),
    };
    for per_input in numeric.iter().filter(|v| !v.is_empty()) {
        let scale = per_input.iter().fold(0.0f64, |m, (n, _)| m.max(n.abs()));
        let abs = per_input.iter().fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(abs / scale.max(1e-12));
    }
    Ok(report)
}

/// Uniform tensor in `[lo, hi)` from a seeded stream.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `sum(y ⊙ r)` for a fixed random `r`: reduces a tensor-valued op to a
/// scalar whose gradient exercises the full vector-Jacobian product.
pub fn project<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = y.tape().constant(uniform(y.shape(), -1.0, 1.0, seed));
    Ok(y.mul(&r)?.sum_all())
}
