//! Correlation between a hidden neuron and an expression of the inputs.

use std::path::Path;

use serde::Serialize;

use super::expr::Formula;
use crate::datasets::{Dataset, Inputs, Split};
use crate::error::{Error, Result};
use crate::models::{Model, ModelInput};

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = (saa * sbb).sqrt();
    if scale <= 1e-300 || saa <= 1e-24 * n || sbb <= 1e-24 * n {
        return None;
    }
    Some((sab / scale).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub target: f64,
    pub activation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub layer: String,
    pub slot: usize,
    /// `None` when the neuron or the target is constant on the test set.
    pub correlation: Option<f64>,
    pub scatter: Vec<ScatterPoint>,
}

impl ProbeResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        super::write_csv(path, &["target", "activation"], &self.scatter)
    }
}

fn test_inputs(data: &Dataset) -> Result<(ModelInput, Vec<Vec<f64>>)> {
    let Inputs::Dense(x) = &data.inputs else {
        return Err(Error::invalid("probes need real-valued inputs"));
    };
    let rows = x.select_rows(data.indices(Split::Test));
    let vars = (0..rows.rows()).map(|r| rows.row(r).to_vec()).collect();
    Ok((ModelInput::Dense(rows), vars))
}

fn layer_activations(model: &Model, input: &ModelInput, layer: &str) -> Result<crate::autodiff::Tensor> {
    model
        .activations(input)?
        .into_iter()
        .find(|(name, _)| name == layer)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::invalid(format!("no hidden layer named `{layer}`")))
}

fn targets(formula: &Formula, vars: &[Vec<f64>]) -> Result<Vec<f64>> {
    vars.iter().map(|v| formula.eval(v)).collect()
}

/// Correlation of one neuron (spatial `slot` of `layer`) with `formula`
/// over the test set.
pub fn correlation_probe(model: &Model, data: &Dataset, layer: &str, slot: usize, formula: &Formula) -> Result<ProbeResult> {
    let (input, vars) = test_inputs(data)?;
    let acts = layer_activations(model, &input, layer)?;
    if slot >= acts.cols() {
        return Err(Error::invalid(format!("slot {slot} outside layer `{layer}` of {}", acts.cols())));
    }
    let t = targets(formula, &vars)?;
    let a = acts.column(slot);
    Ok(ProbeResult {
        layer: layer.to_string(),
        slot,
        correlation: pearson(&a, &t),
        scatter: t
            .iter()
            .zip(&a)
            .map(|(&target, &activation)| ScatterPoint { target, activation })
            .collect(),
    })
}

/// The neuron of `layer` with the largest `|r|` against `formula`.
pub fn best_correlated(model: &Model, data: &Dataset, layer: &str, formula: &Formula) -> Result<ProbeResult> {
    let (input, vars) = test_inputs(data)?;
    let acts = layer_activations(model, &input, layer)?;
    let t = targets(formula, &vars)?;
    let mut best: Option<(usize, f64)> = None;
    for s in 0..acts.cols() {
        if let Some(r) = pearson(&acts.column(s), &t) {
            if best.is_none_or(|(_, b)| r.abs() > b.abs()) {
                best = Some((s, r));
            }
        }
    }
    let (slot, _) = best.ok_or_else(|| Error::invalid(format!("every neuron of `{layer}` is constant")))?;
    correlation_probe(model, data, layer, slot, formula)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::datasets::Targets;
    use crate::geometry::GeometryConfig;
    use crate::models::NetworkSpec;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[3.0; 4]), None);
    }

    #[test]
    fn neuron_equal_to_expression_has_unit_correlation() {
        let mut m = Model::init(NetworkSpec::mlp(&[2, 2, 1]), GeometryConfig::default(), 0, 0.0).unwrap();
        m.params[0] = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        m.params[1] = Tensor::row_vector(vec![0.0, 0.5]);
        let x = Tensor::from_fn(30, 2, |r, c| (r as f64 * 0.37 + c as f64).sin());
        let data = Dataset {
            name: "probe".into(),
            inputs: Inputs::Dense(x),
            targets: Targets::Dense(Tensor::zeros(30, 1)),
            train: vec![],
            test: (0..30).collect(),
        };
        let f = Formula::parse("σ(x1)").unwrap();
        let p = correlation_probe(&m, &data, "L1", 0, &f).unwrap();
        assert!((p.correlation.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(p.scatter.len(), 30);
        let flat = correlation_probe(&m, &data, "L1", 1, &f).unwrap();
        assert_eq!(flat.correlation, None);
        assert_eq!(best_correlated(&m, &data, "L1", &f).unwrap().slot, 0);
        assert!(correlation_probe(&m, &data, "L9", 0, &f).is_err());
    }
}
