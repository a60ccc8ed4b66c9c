//! Embedding normalization, the faithful S4 representation from tetrahedron
//! symmetries, effective dimension and the linearity test.

use nalgebra::{DMatrix, Matrix3, Matrix3x4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::datasets::s4_elements;
use crate::error::{Error, Result};
use crate::models::{GroupKind, Model};
use crate::swap::neuron_scores;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedEmbedding {
    /// Rows are neurons, each divided by its largest magnitude.
    pub values: Tensor,
    /// Neurons whose row is entirely zero.
    pub inactive: Vec<bool>,
}

pub fn normalized_embedding(e: &Tensor) -> NormalizedEmbedding {
    let mut values = e.clone();
    let mut inactive = vec![false; e.rows()];
    for (r, flag) in inactive.iter_mut().enumerate() {
        let row = values.row_mut(r);
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            *flag = true;
        } else {
            row.iter_mut().for_each(|v| *v /= m);
        }
    }
    NormalizedEmbedding { values, inactive }
}

/// The embedding table as `neurons x vocab`, neurons in spatial order.
pub fn embedding_matrix(model: &Model) -> Result<Tensor> {
    model
        .param("E")
        .map(Tensor::transpose)
        .ok_or_else(|| Error::invalid("model has no embedding table"))
}

/// Embedding neurons whose score exceeds `frac` of the largest score.
pub fn active_embedding_neurons(model: &Model, frac: f64) -> Result<usize> {
    let g = model
        .topology
        .groups
        .iter()
        .position(|g| g.kind == GroupKind::Embedding)
        .ok_or_else(|| Error::invalid("model has no embedding neurons"))?;
    let s = neuron_scores(model, g);
    let max = s.iter().copied().fold(0.0, f64::max);
    Ok(s.iter().filter(|&&v| v > frac * max).count())
}

/// The three vertex sets of the tetrahedron representations.
pub fn tetrahedron(name: &str) -> Result<[[f64; 3]; 4]> {
    let (r3, r6) = (3f64.sqrt(), 6f64.sqrt());
    match name {
        "A" | "a" => Ok([[1.0, 0.0, 0.0], [-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, -1.0]]),
        "B" | "b" => Ok([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 1.0, 1.0]]),
        "C" | "c" => Ok([
            [1.0, -1.0 / r3, -1.0 / r6],
            [-1.0, -1.0 / r3, -1.0 / r6],
            [0.0, 2.0 / r3, -1.0 / r6],
            [0.0, 0.0, r6 / 2.0],
        ]),
        _ => Err(Error::invalid(format!("unknown tetrahedron `{name}`, expected A, B or C"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrueRepresentation {
    /// One 3x3 matrix per permutation, in `s4_elements` order.
    pub matrices: Vec<Tensor>,
    /// Largest `|M v_j - v_pi(j)|` over all permutations and vertices.
    pub max_residual: f64,
}

/// For each permutation `pi` the least-squares linear map with
/// `M v_j = v_pi(j)`.
pub fn s4_true_representation(vertices: &[[f64; 3]; 4]) -> Result<TrueRepresentation> {
    let x = Matrix3x4::from_fn(|r, c| vertices[c][r]);
    let gram = x * x.transpose();
    let scale = gram.trace() / 3.0;
    if !(scale > 0.0) || gram.determinant().abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::invalid("tetrahedron vertices do not span three dimensions"));
    }
    let pinv = x.transpose() * gram.try_inverse().ok_or_else(|| Error::invalid("singular vertex Gram matrix"))?;
    let mut matrices = Vec::with_capacity(24);
    let mut max_residual = 0.0f64;
    for p in s4_elements() {
        let y = Matrix3x4::from_fn(|r, c| vertices[p[c]][r]);
        let m: Matrix3<f64> = y * pinv;
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::invalid(format!("permutation {p:?} has no invertible linear map")))?;
        if ((m * inv) - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::invalid(format!("permutation {p:?} gives an ill-conditioned map")));
        }
        max_residual = max_residual.max((m * x - y).abs().max());
        matrices.push(Tensor::from_fn(3, 3, |r, c| m[(r, c)]));
    }
    Ok(TrueRepresentation { matrices, max_residual })
}

/// Stacks `vec(M_i)` (row-major) as the columns of a `d^2 x n` matrix.
pub fn representation_matrix(mats: &[Tensor]) -> Result<Tensor> {
    let first = mats.first().ok_or_else(|| Error::invalid("no matrices"))?;
    let d2 = first.len();
    if mats.iter().any(|m| m.len() != d2) {
        return Err(Error::shape("representation_matrix", "matrices differ in size"));
    }
    Ok(Tensor::from_fn(d2, mats.len(), |r, c| mats[c].data()[r]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationAnalysis {
    pub r: Tensor,
    /// `R / |vec(R)|_1`.
    pub normalized: Tensor,
    /// Base-2 entropy of the normalized absolute entries.
    pub entropy_bits: f64,
    /// `2^entropy`.
    pub effective_dim: f64,
}

pub fn representation_metrics(r: &Tensor) -> Result<RepresentationAnalysis> {
    let total = r.sum_abs();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("representation matrix must be nonzero and finite"));
    }
    let normalized = r.map(|v| v / total);
    let entropy_bits = -normalized
        .data()
        .iter()
        .map(|v| v.abs())
        .filter(|&p| p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>();
    Ok(RepresentationAnalysis {
        r: r.clone(),
        normalized,
        entropy_bits,
        effective_dim: entropy_bits.exp2(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearityMethod {
    /// Gradient descent on `A` with `V` replaced by its least-squares optimum.
    Eliminated,
    /// Gradient descent on `V` and `A` together.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearityConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`.
    pub final_lr_frac: f64,
    pub seed: u64,
    pub method: LinearityMethod,
}

impl Default for LinearityConfig {
    fn default() -> Self {
        LinearityConfig {
            restarts: 100,
            steps: 200,
            lr: 0.05,
            final_lr_frac: 0.01,
            seed: 0,
            method: LinearityMethod::Eliminated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearityTestResult {
    pub best_loss: f64,
    pub best_v: Tensor,
    pub best_a: Tensor,
    /// Best loss of each restart; `None` for rejected starts.
    pub losses: Vec<Option<f64>>,
}

const MIN_DET: f64 = 1e-8;

fn det3(a: &Tensor) -> f64 {
    Matrix3::from_fn(|r, c| a.get(r, c)).determinant()
}

fn conjugated(a: &Tensor, e_true: &[Tensor]) -> Result<Tensor> {
    let inv = crate::autodiff::invert(a)?;
    let mats = e_true
        .iter()
        .map(|t| a.matmul(t)?.matmul(&inv))
        .collect::<Result<Vec<_>>>()?;
    representation_matrix(&mats)
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Least-squares `V` minimizing `|E - V Z|^2`.
fn best_v(e: &Tensor, z: &Tensor) -> Result<Tensor> {
    let pinv = to_dmatrix(z)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))?;
    let v = to_dmatrix(e) * pinv;
    Ok(Tensor::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)]))
}

fn check_inputs(e: &Tensor, e_true: &[Tensor]) -> Result<f64> {
    if e.cols() != e_true.len() || e_true.iter().any(|t| t.shape() != (3, 3)) {
        return Err(Error::shape(
            "linearity_test",
            format!("embedding has {} columns for {} 3x3 matrices", e.cols(), e_true.len()),
        ));
    }
    let denom: f64 = e.data().iter().map(|v| v * v).sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("embedding is zero"));
    }
    Ok(denom)
}

/// `sum_i |E_i - V vec(A T_i A^-1)|^2 / sum_i |E_i|^2` with `E_i` the columns of `e`.
pub fn linearity_loss(e: &Tensor, e_true: &[Tensor], v: &Tensor, a: &Tensor) -> Result<f64> {
    let denom = check_inputs(e, e_true)?;
    let pred = v.matmul(&conjugated(a, e_true)?)?;
    let num: f64 = e.data().iter().zip(pred.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(num / denom)
}

fn tape_loss(tape: &Tape, e: &Tensor, e_true: &[Tensor], v: Var, a: Var, denom: f64) -> Result<Var> {
    let inv = tape.inverse(a)?;
    let cols = e_true
        .iter()
        .map(|t| {
            let m = tape.matmul(tape.matmul(a, tape.constant(t.clone()))?, inv)?;
            tape.reshape(m, 9, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = tape.concat_cols(&cols)?;
    let diff = tape.sub(tape.constant(e.clone()), tape.matmul(v, z)?)?;
    Ok(tape.scale(tape.sum(tape.mul(diff, diff)?), 1.0 / denom))
}

/// Multi-start minimization of the linearity loss over `V` (`d x 9`) and an
/// invertible `A` (3x3).
pub fn linearity_test(e: &Tensor, e_true: &[Tensor], cfg: &LinearityConfig) -> Result<LinearityTestResult> {
    let denom = check_inputs(e, e_true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, Tensor, Tensor)> = None;
    for _ in 0..cfg.restarts {
        let a0 = Tensor::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng));
        let v0 = Tensor::from_fn(e.rows(), 9, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x / 3.0
        });
        if det3(&a0).abs() < MIN_DET {
            losses.push(None);
            continue;
        }
        let run = descend(e, e_true, cfg, denom, a0, v0)?;
        losses.push(Some(run.0));
        if best.as_ref().is_none_or(|b| run.0 < b.0) {
            best = Some(run);
        }
    }
    let (best_loss, best_v, best_a) = best.ok_or_else(|| Error::invalid("every linearity-test restart was rejected"))?;
    Ok(LinearityTestResult {
        best_loss,
        best_v,
        best_a,
        losses,
    })
}

fn descend(
    e: &Tensor,
    e_true: &[Tensor],
    cfg: &LinearityConfig,
    denom: f64,
    a0: Tensor,
    v0: Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    let joint = cfg.method == LinearityMethod::Joint;
    let mut params = vec![a0, v0];
    if !joint {
        params[1] = best_v(e, &conjugated(&params[0], e_true)?)?;
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut best = (linearity_loss(e, e_true, &params[1], &params[0])?, params[1].clone(), params[0].clone());
    let denom_steps = cfg.steps.saturating_sub(1).max(1) as f64;
    for step in 0..cfg.steps {
        adam.config.lr = cfg.lr * cfg.final_lr_frac.powf(step as f64 / denom_steps);
        let tape = Tape::new();
        let a = tape.param(params[0].clone());
        let v = if joint { tape.param(params[1].clone()) } else { tape.constant(params[1].clone()) };
        let loss = tape_loss(&tape, e, e_true, v, a, denom)?;
        let mut g = tape.backward(loss)?;
        let ga = g.take(a).unwrap_or_else(|| Tensor::zeros(3, 3));
        let gv = if joint { g.take(v).unwrap_or_else(|| Tensor::zeros(e.rows(), 9)) } else { Tensor::zeros(e.rows(), 9) };
        adam.step(&mut params, &[ga, gv])?;
        if det3(&params[0]).abs() < MIN_DET {
            break;
        }
        if !joint {
            params[1] = best_v(e, &conjugated(&params[0], e_true)?)?;
        }
        let l = linearity_loss(e, e_true, &params[1], &params[0])?;
        if !l.is_finite() {
            break;
        }
        if l < best.0 {
            best = (l, params[1].clone(), params[0].clone());
        }
    }
    Ok(best)
}


#[cfg(test)]
mod properties {
    use proptest::prelude::*;

    use super::*;

    fn entries() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0f64..5.0, r * c)))
    }

    proptest! {
        #[test]
        fn dimension_ignores_scale_sign_and_order((r, c, v) in entries(), scale in 0.01f64..100.0, seed in any::<u64>()) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let t = Tensor::new(r, c, v).unwrap();
            let base = representation_metrics(&t).unwrap();
            let scaled = representation_metrics(&t.map(|x| -scale * x)).unwrap();
            let rows: Vec<usize> = (0..r).map(|i| (i + seed as usize) % r).collect();
            let permuted = representation_metrics(&t.select_rows(&rows).transpose()).unwrap();
            prop_assert!((base.effective_dim - scaled.effective_dim).abs() < 1e-9 * base.effective_dim);
            prop_assert!((base.effective_dim - permuted.effective_dim).abs() < 1e-9 * base.effective_dim);
            prop_assert!(base.effective_dim >= 1.0 - 1e-9 && base.effective_dim <= (r * c) as f64 + 1e-9);
        }
    }
}
