use super::{Graph, Tensor, Var};
use crate::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient of a scalar function of one tensor with
/// central differences. Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x))
}

/// [`gradcheck`] over several inputs at once; the error is the maximum over all of them.
pub fn gradcheck_many<F>(f: F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_signed(f, xs, &vec![1.0; xs.len()])
}

/// Like [`gradcheck_many`], but input `k`'s analytic gradient is compared
/// with `signs[k]` times the numeric one. A sign of -1 checks inputs that
/// sit below a gradient-reversal node.
pub fn gradcheck_signed<F>(f: F, xs: &[Tensor], signs: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert_eq!(xs.len(), signs.len(), "one sign per input");
    let analytic = analytic_grads(&f, xs)?;
    let mut worst = 0.0f64;
    for (k, grads) in analytic.iter().enumerate() {
        for (i, a) in grads.iter().enumerate() {
            let numeric = signs[k]
                * (eval_shifted(&f, xs, k, i, FD_STEP)? - eval_shifted(&f, xs, k, i, -FD_STEP)?)
                / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Analytic gradients of `f` at `xs`, one vector per input.
pub fn analytic_grads<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec)
        })
        .collect())
}

fn eval_shifted<F>(f: &F, xs: &[Tensor], k: usize, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let mut x = x.clone();
            if j == k {
                x.data_mut()[i] += h;
            }
            g.leaf(x, false)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}
