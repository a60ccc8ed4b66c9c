//! Magnitude pruning and the parameter-count/loss frontier.

use serde::Serialize;

use crate::config::LossKind;
use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::trainer::split_loss;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub threshold: f64,
    pub unpruned: usize,
    pub test_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneFrontier {
    pub points: Vec<FrontierPoint>,
}

impl PruneFrontier {
    /// Lowest test loss reached with at most `n` unpruned parameters.
    pub fn loss_at(&self, n: usize) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.unpruned <= n)
            .map(|p| p.test_loss)
            .reduce(f64::min)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        super::write_csv(path, &["threshold", "unpruned", "test_loss"], &self.points)
    }
}

/// Copy of `model` with every parameter of magnitude below `threshold` set
/// to zero, and the number of parameters kept.
pub fn prune(model: &Model, threshold: f64) -> (Model, usize) {
    let mut out = model.clone();
    let mut kept = 0;
    for p in &mut out.params {
        for v in p.data_mut() {
            if v.abs() < threshold {
                *v = 0.0;
            } else {
                kept += 1;
            }
        }
    }
    (out, kept)
}

pub fn prune_frontier(model: &Model, data: &Dataset, thresholds: &[f64], loss: LossKind) -> Result<PruneFrontier> {
    if thresholds.iter().any(|t| t.is_nan()) || thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("pruning thresholds must be sorted ascending"));
    }
    let points = thresholds
        .iter()
        .map(|&threshold| {
            let (pruned, unpruned) = prune(model, threshold);
            Ok(FrontierPoint {
                threshold,
                unpruned,
                test_loss: split_loss(&pruned, data, Split::Test, loss)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruneFrontier { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::config::TrainConfig;

    fn setup() -> (Model, Dataset) {
        let c = TrainConfig::from_toml("[data]\ntask = \"symbolic\"\nformula = \"fig2\"\nn_train = 50\nn_test = 40\n").unwrap();
        let data = c.data.build(0).unwrap();
        (Model::init(c.model, c.geometry, 3, 0.0).unwrap(), data)
    }

    #[test]
    fn frontier_endpoints() {
        let (m, data) = setup();
        let f = prune_frontier(&m, &data, &[0.0, 0.1, 0.3, f64::INFINITY], LossKind::Mse).unwrap();
        assert_eq!(f.points[0].unpruned, m.param_count());
        assert_eq!(f.points[0].test_loss, split_loss(&m, &data, Split::Test, LossKind::Mse).unwrap());
        assert!(f.points.windows(2).all(|w| w[1].unpruned <= w[0].unpruned));
        assert_eq!(f.points[3].unpruned, 0);
        let mut dead = m.clone();
        for p in &mut dead.params {
            *p = Tensor::zeros(p.rows(), p.cols());
        }
        assert_eq!(f.points[3].test_loss, split_loss(&dead, &data, Split::Test, LossKind::Mse).unwrap());
        assert_eq!(f.loss_at(0), Some(f.points[3].test_loss));
    }

    #[test]
    fn pruning_leaves_the_original_untouched() {
        let (m, data) = setup();
        let before = m.params.clone();
        prune_frontier(&m, &data, &[0.5], LossKind::Mse).unwrap();
        assert_eq!(m.params, before);
        assert!(prune_frontier(&m, &data, &[0.2, 0.1], LossKind::Mse).is_err());
    }
}
