//! The regularized objective `pred + lambda * (weight_cost + bias_cost)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Model, TensorRole};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub lambda: f64,
    pub steps: u64,
}

/// Piecewise-constant regularization strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LambdaSchedule {
    pub phases: Vec<Phase>,
}

impl LambdaSchedule {
    pub fn new(phases: &[(f64, u64)]) -> Result<Self> {
        let s = LambdaSchedule {
            phases: phases
                .iter()
                .map(|&(lambda, steps)| Phase { lambda, steps })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lambda: f64, steps: u64) -> Self {
        LambdaSchedule {
            phases: vec![Phase { lambda, steps }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("lambda schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 {
                return Err(Error::Config(format!("lambda phase {i} has zero steps")));
            }
            if !(p.lambda >= 0.0) || !p.lambda.is_finite() {
                return Err(Error::Config(format!("lambda phase {i} has lambda {}", p.lambda)));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn lambda_at(&self, step: u64) -> Result<f64> {
        let mut end = 0;
        for p in &self.phases {
            end += p.steps;
            if step < end {
                return Ok(p.lambda);
            }
        }
        Err(Error::invalid(format!(
            "step {step} beyond lambda schedule of {end} steps"
        )))
    }

    /// Scales every phase's step count by `num / den`, keeping at least one
    /// step per phase.
    pub fn scaled(&self, num: u64, den: u64) -> Self {
        LambdaSchedule {
            phases: self
                .phases
                .iter()
                .map(|p| Phase {
                    lambda: p.lambda,
                    steps: (p.steps * num / den.max(1)).max(1),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred_loss: f64,
    pub weight_cost: f64,
    pub bias_cost: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(pred_loss: f64, lambda: f64, weight_cost: f64, bias_cost: f64) -> Self {
        LossBreakdown {
            pred_loss,
            weight_cost,
            bias_cost,
            lambda,
            total: total_loss(pred_loss, lambda, weight_cost, bias_cost),
        }
    }
}

pub fn total_loss(pred: f64, lambda: f64, weight_cost: f64, bias_cost: f64) -> f64 {
    pred + lambda * (weight_cost + bias_cost)
}

/// `sum d * |w|` over weight layers plus `y* * sum |e|` over embedding tables.
pub fn connection_cost(model: &Model) -> f64 {
    let y_star = model.geometry.y_star();
    let mut cost = 0.0;
    for (i, (info, p)) in model.topology.tensors.iter().zip(&model.params).enumerate() {
        match info.role {
            TensorRole::Weight { .. } => {
                if let Some(d) = model.distances(i) {
                    cost += d
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(d, w)| d * w.abs())
                        .sum::<f64>();
                }
            }
            TensorRole::Table { .. } => cost += y_star * p.sum_abs(),
            TensorRole::Bias { .. } => {}
        }
    }
    cost
}

/// `y* * sum |b|`.
pub fn bias_cost(model: &Model) -> f64 {
    let y_star = model.geometry.y_star();
    model
        .topology
        .tensors
        .iter()
        .zip(&model.params)
        .filter(|(i, _)| matches!(i.role, TensorRole::Bias { .. }))
        .map(|(_, p)| y_star * p.sum_abs())
        .sum()
}

/// Differentiable `(weight_cost, bias_cost)` for parameters recorded as `vars`.
pub fn regularization(model: &Model, tape: &Tape, vars: &[Var]) -> Result<(Var, Var)> {
    let y_star = model.geometry.y_star();
    let mut weight = Vec::new();
    let mut bias = Vec::new();
    for (i, info) in model.topology.tensors.iter().enumerate() {
        match info.role {
            TensorRole::Weight { .. } => {
                let d = model
                    .distances(i)
                    .ok_or_else(|| Error::invalid(format!("no geometry for weight `{}`", info.name)))?;
                weight.push(tape.weighted_abs_sum(vars[i], d.clone())?);
            }
            TensorRole::Table { .. } => weight.push(tape.abs_sum(vars[i], y_star)),
            TensorRole::Bias { .. } => bias.push(tape.abs_sum(vars[i], y_star)),
        }
    }
    Ok((sum_scalars(tape, &weight)?, sum_scalars(tape, &bias)?))
}

fn sum_scalars(tape: &Tape, xs: &[Var]) -> Result<Var> {
    let mut it = xs.iter();
    let Some(&first) = it.next() else {
        return Ok(tape.constant(crate::autodiff::Tensor::scalar(0.0)));
    };
    it.try_fold(first, |acc, &x| tape.add(acc, x))
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::finite_difference;
    use crate::autodiff::Tensor;
    use crate::geometry::{distance, layout_line, DistanceScale, GeometryConfig, Norm};
    use crate::models::{ModelInput, NetworkSpec};

    fn cfg(a: f64, y_star: f64) -> GeometryConfig {
        GeometryConfig {
            a,
            y_star,
            norm: Norm::L1,
            distance_scale: DistanceScale::Literal,
        }
    }

    fn random_model(widths: &[usize], g: GeometryConfig, seed: u64) -> Model {
        let mut m = Model::init(NetworkSpec::mlp(widths), g, seed, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn published_schedule_lookup() {
        let s = LambdaSchedule::new(&[(1e-3, 5000), (1e-2, 10000), (1e-3, 5000)]).unwrap();
        assert_eq!(s.total_steps(), 20000);
        assert_eq!(s.lambda_at(0).unwrap(), 1e-3);
        assert_eq!(s.lambda_at(4999).unwrap(), 1e-3);
        assert_eq!(s.lambda_at(5000).unwrap(), 1e-2);
        assert_eq!(s.lambda_at(7000).unwrap(), 1e-2);
        assert_eq!(s.lambda_at(19999).unwrap(), 1e-3);
        assert!(s.lambda_at(20000).is_err());
        assert!(LambdaSchedule::new(&[(1.0, 0)]).is_err());
        assert!(LambdaSchedule::new(&[(-1.0, 3)]).is_err());
        assert_eq!(s.scaled(1, 4).total_steps(), 5000);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 0.0, 5.0, 3.0), 0.7);
        assert!((total_loss(0.5, 0.01, 2.0, 1.0) - 0.53).abs() < 1e-15);
        let b = LossBreakdown::new(0.5, 0.01, 2.0, 1.0);
        assert_eq!(b.total, total_loss(0.5, 0.01, 2.0, 1.0));
    }

    #[test]
    fn zero_weights_cost_nothing() {
        let mut m = random_model(&[3, 4, 2], cfg(2.0, 0.1), 1);
        m.params.iter_mut().for_each(|p| *p = Tensor::zeros(p.rows(), p.cols()));
        assert_eq!(connection_cost(&m), 0.0);
        assert_eq!(bias_cost(&m), 0.0);
    }

    #[test]
    fn flat_geometry_is_plain_l1() {
        let m = random_model(&[5, 7, 6, 3], cfg(0.0, 0.37), 2);
        let l1: f64 = ["W1", "W2", "W3"].iter().map(|n| m.param(n).unwrap().sum_abs()).sum();
        assert!((connection_cost(&m) - 0.37 * l1).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_hand_sum() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let params = vec![w.clone(), Tensor::row_vector(vec![1.0, -2.0])];
        let m = Model::from_parts(NetworkSpec::mlp(&[2, 2]), cfg(2.0, 0.5), params, None).unwrap();
        // x = 0 and 1 in both layers: d = 2|xi - xk| + 0.5
        let d = [[0.5, 2.5], [2.5, 0.5]];
        let mut hand = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                hand += d[r][c] * w.get(r, c).abs();
            }
        }
        assert_eq!(hand, 0.5 + 5.0 + 1.25 + 1.5);
        assert!((connection_cost(&m) - hand).abs() < 1e-15);
        assert!((bias_cost(&m) - 1.5).abs() < 1e-15);

        // independent distance evaluation
        let a = layout_line(2, 0, 2.0, 0.5).unwrap();
        let b = layout_line(2, 1, 2.0, 0.5).unwrap();
        let brute: f64 = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| {
                distance(&a[r], &b[c], 2.0, 0.5, Norm::L1, DistanceScale::Literal).unwrap()
                    * w.get(r, c).abs()
            })
            .sum();
        assert!((brute - hand).abs() < 1e-15);
    }

    #[test]
    fn bias_cost_matches_direct_sum() {
        let m = random_model(&[3, 9, 4], cfg(2.0, 0.25), 3);
        let naive: f64 = m.param("b1").unwrap().data().iter().chain(m.param("b2").unwrap().data()).map(|b| 0.25 * b.abs()).sum();
        assert!((bias_cost(&m) - naive).abs() < 1e-14);
    }

    #[test]
    fn cost_is_positively_homogeneous() {
        let m = random_model(&[4, 6, 2], cfg(2.0, 0.1), 4);
        let mut scaled = m.clone();
        scaled.params.iter_mut().for_each(|p| *p = p.map(|v| 2.5 * v));
        assert!((connection_cost(&scaled) - 2.5 * connection_cost(&m)).abs() < 1e-12);
    }

    #[test]
    fn embedding_tables_cost_plain_l1() {
        let spec = NetworkSpec::Mlp(crate::models::MlpSpec {
            widths: vec![4, 3],
            layouts: None,
            embedding: Some(crate::models::EmbeddingSpec {
                vocab: 5,
                dim: 2,
                tokens: 2,
            }),
        });
        let mut m = Model::init(spec, cfg(0.0, 0.5), 1, 0.0).unwrap();
        let e = m.param("E").unwrap().sum_abs();
        let w = m.param("W1").unwrap().sum_abs();
        assert!((connection_cost(&m) - 0.5 * (e + w)).abs() < 1e-12);
        m.params[0] = Tensor::zeros(5, 2);
        assert!((connection_cost(&m) - 0.5 * w).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let g = cfg(2.0, 0.1);
        let m = random_model(&[3, 4, 2], g, 5);
        let x = Tensor::from_fn(6, 3, |r, c| ((r * 3 + c) as f64).cos());
        let y = Rc::new(Tensor::from_fn(6, 2, |r, c| ((r + c) as f64).sin()));
        let lambda = 0.3;
        let tape = Tape::new();
        let vars = m.leaves(&tape, true);
        let out = m.forward(&tape, &vars, &ModelInput::Dense(x.clone())).unwrap().output;
        let pred = tape.mse(out, y.clone()).unwrap();
        let (wc, bc) = regularization(&m, &tape, &vars).unwrap();
        let reg = tape.scale(tape.add(wc, bc).unwrap(), lambda);
        let loss = tape.add(pred, reg).unwrap();
        assert!((tape.scalar(wc).unwrap() - connection_cost(&m)).abs() < 1e-12);
        assert!((tape.scalar(bc).unwrap() - bias_cost(&m)).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let numeric = finite_difference(
            |ps| {
                let mut mm = m.clone();
                mm.params = ps.to_vec();
                let out = mm.predict(&ModelInput::Dense(x.clone()))?;
                let mse = out.zip_map(&y, |a, b| (a - b) * (a - b))?.sum() / out.len() as f64;
                Ok(total_loss(mse, lambda, connection_cost(&mm), bias_cost(&mm)))
            },
            &m.params,
            1e-6,
        )
        .unwrap();
        // every random entry is far from zero, so |w| is smooth at h = 1e-6
        for (v, n) in vars.iter().zip(&numeric) {
            let a = grads.get(*v).unwrap();
            let err = a.max_abs_diff(n) / n.max_abs().max(1e-3);
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn zero_weight_gets_no_push() {
        let g = cfg(2.0, 0.1);
        let mut m = random_model(&[2, 2], g, 6);
        m.params[0].set(0, 1, 0.0);
        let tape = Tape::new();
        let vars = m.leaves(&tape, true);
        let (wc, _) = regularization(&m, &tape, &vars).unwrap();
        let grads = tape.backward(wc).unwrap();
        let gw = grads.get(vars[0]).unwrap();
        assert_eq!(gw.get(0, 1), 0.0);
        let d = m.distances(0).unwrap();
        assert_eq!(gw.get(0, 0), d.get(0, 0) * m.params[0].get(0, 0).signum());
    }
}
