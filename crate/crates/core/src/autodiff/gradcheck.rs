//! Central finite-difference gradients, used as an oracle for the tape.
//!
//! Only forward evaluations are used here, so the estimates are independent of
//! the reverse-mode implementation they are compared against.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient of `f` with respect to each input tensor.
pub fn finite_difference<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Gradients below this norm are compared absolutely. The key bias of an
/// attention layer, for instance, has an identically zero gradient that the
/// finite differences only resolve to rounding noise.
pub const NORM_FLOOR: f64 = 1e-3;

/// Norm-wise relative error `|a - b| / max(|a|, |b|, NORM_FLOOR)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Builds `f` on a fresh tape with every input as a parameter and returns the
/// largest relative error between reverse-mode and central-difference
/// gradients over the inputs.
pub fn tape_gradient_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let numeric = finite_difference(
        |xs| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&t, &vs)?;
            t.scalar(o)
        },
        inputs,
        1e-5,
    )?;
    Ok(vars
        .iter()
        .zip(&numeric)
        .map(|(v, n)| {
            let zero = Tensor::zeros(n.rows(), n.cols());
            relative_error(grads.get(*v).unwrap_or(&zero), n)
        })
        .fold(0.0, f64::max))
}
