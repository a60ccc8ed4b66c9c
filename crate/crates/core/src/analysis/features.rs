//! Weight-sign statistics and first-layer feature maps.

use std::path::Path;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Model, TensorRole};

#[derive(Clone, Debug, PartialEq)]
pub struct SignRanks {
    pub tensor: String,
    /// Magnitudes of positive entries, largest first.
    pub positive: Vec<f64>,
    /// Magnitudes of negative entries, largest first.
    pub negative: Vec<f64>,
    pub zeros: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignRankRow {
    pub tensor: String,
    pub sign: &'static str,
    pub rank: usize,
    pub magnitude: f64,
}

impl SignRanks {
    pub fn rows(&self) -> Vec<SignRankRow> {
        let side = |sign: &'static str, v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(rank, &magnitude)| SignRankRow {
                    tensor: self.tensor.clone(),
                    sign,
                    rank: rank + 1,
                    magnitude,
                })
                .collect::<Vec<_>>()
        };
        [side("positive", &self.positive), side("negative", &self.negative)].concat()
    }

    pub fn write_csv(ranks: &[SignRanks], path: &Path) -> Result<()> {
        let rows: Vec<SignRankRow> = ranks.iter().flat_map(SignRanks::rows).collect();
        super::write_csv(path, &["tensor", "sign", "rank", "magnitude"], &rows)
    }
}

/// Per weight tensor, magnitudes split by sign and sorted descending.
pub fn weight_sign_ranks(model: &Model) -> Vec<SignRanks> {
    model
        .topology
        .tensors
        .iter()
        .zip(&model.params)
        .filter(|(info, _)| matches!(info.role, TensorRole::Weight { .. }))
        .map(|(info, w)| {
            let mut positive: Vec<f64> = w.data().iter().copied().filter(|&v| v > 0.0).collect();
            let mut negative: Vec<f64> = w.data().iter().filter(|&&v| v < 0.0).map(|v| -v).collect();
            positive.sort_by(|a, b| b.total_cmp(a));
            negative.sort_by(|a, b| b.total_cmp(a));
            SignRanks {
                tensor: info.name.clone(),
                zeros: w.len() - positive.len() - negative.len(),
                positive,
                negative,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    /// Spatial slot of the hidden neuron.
    pub neuron: usize,
    pub score: f64,
    /// Incoming weights arranged on the `height x width` input grid.
    pub map: Tensor,
}

/// Incoming weight maps of every first-layer neuron ranked by `sum |w|`,
/// truncated to `count`.
pub fn top_features(w1: &Tensor, width: usize, height: usize, count: usize) -> Result<Vec<Feature>> {
    if width * height != w1.rows() {
        return Err(Error::shape(
            "top_features",
            format!("{} inputs do not fill a {width}x{height} grid", w1.rows()),
        ));
    }
    let mut feats: Vec<Feature> = (0..w1.cols())
        .map(|n| {
            let col = w1.column(n);
            Feature {
                neuron: n,
                score: col.iter().map(|v| v.abs()).sum(),
                map: Tensor::from_fn(height, width, |r, c| col[r * width + c]),
            }
        })
        .collect();
    feats.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.neuron.cmp(&b.neuron)));
    feats.truncate(count);
    Ok(feats)
}

/// Number of scores strictly above `frac` of the largest.
pub fn count_above(scores: &[f64], frac: f64) -> usize {
    let max = scores.iter().copied().fold(0.0, f64::max);
    scores.iter().filter(|&&s| s > frac * max).count()
}
