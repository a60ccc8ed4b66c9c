//! Accuracy after zeroing the parameters of neuron modules.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::Metric;
use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{GroupKind, Model, NeuronId};
use crate::trainer::evaluate;

/// A named set of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct Module {
    pub name: String,
    pub neurons: Vec<NeuronId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KnockoutRow {
    pub knocked: String,
    pub neurons: usize,
    pub metric: f64,
}

/// Test metric with nothing removed, each module, each pair, all modules,
/// every hidden/embedding neuron outside the modules, and every
/// hidden/embedding neuron.
pub fn knockout_table(model: &Model, data: &Dataset, modules: &[Module], metric: Metric) -> Result<Vec<KnockoutRow>> {
    let mut seen = BTreeSet::new();
    for m in modules {
        for id in &m.neurons {
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("neuron {id} belongs to more than one module")));
            }
        }
    }
    let row = |knocked: String, ids: Vec<NeuronId>| -> Result<KnockoutRow> {
        let edited = model.knockout(&ids)?;
        Ok(KnockoutRow {
            knocked,
            neurons: ids.len(),
            metric: evaluate(&edited, data, Split::Test, metric)?,
        })
    };
    let mut rows = vec![row("none".into(), vec![])?];
    for m in modules {
        rows.push(row(m.name.clone(), m.neurons.clone())?);
    }
    if modules.len() > 2 {
        for i in 0..modules.len() {
            for j in i + 1..modules.len() {
                let ids = [modules[i].neurons.clone(), modules[j].neurons.clone()].concat();
                rows.push(row(format!("{}+{}", modules[i].name, modules[j].name), ids)?);
            }
        }
    }
    let names: Vec<&str> = modules.iter().map(|m| m.name.as_str()).collect();
    let joined = names.join("+");
    if modules.len() > 1 {
        rows.push(row(joined.clone(), seen.iter().cloned().collect())?);
    }
    let everything = model.neurons_of(&[GroupKind::Hidden, GroupKind::Embedding]);
    let outside: Vec<NeuronId> = everything.iter().filter(|id| !seen.contains(*id)).cloned().collect();
    if !modules.is_empty() {
        rows.push(row(format!("all but {joined}"), outside)?);
    }
    rows.push(row("everything".into(), everything)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::config::TrainConfig;

    fn modadd() -> (Model, Dataset) {
        let c = TrainConfig::from_toml("[data]\ntask = \"mod_add\"\n").unwrap();
        let data = c.data.build(0).unwrap();
        (Model::init(c.model, c.geometry, 0, 0.0).unwrap(), data)
    }

    fn ids(group: &str, slots: &[usize]) -> Vec<NeuronId> {
        slots
            .iter()
            .map(|&slot| NeuronId {
                group: group.into(),
                slot,
            })
            .collect()
    }

    #[test]
    fn rows_cover_the_requested_combinations() {
        let (m, data) = modadd();
        let mods: Vec<Module> = ["A", "B", "C"]
            .iter()
            .enumerate()
            .map(|(i, n)| Module {
                name: n.to_string(),
                neurons: ids("L2", &[2 * i, 2 * i + 1]),
            })
            .collect();
        let rows = knockout_table(&m, &data, &mods, Metric::Accuracy).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.knocked.as_str()).collect();
        assert_eq!(
            names,
            ["none", "A", "B", "C", "A+B", "A+C", "B+C", "A+B+C", "all but A+B+C", "everything"]
        );
        assert_eq!(rows[0].metric, evaluate(&m, &data, Split::Test, Metric::Accuracy).unwrap());
        assert_eq!(rows[9].neurons, 32 + 100 + 100);
        assert_eq!(rows[8].neurons, 232 - 6);
    }

    #[test]
    fn knocking_out_everything_is_chance_level() {
        let (mut m, data) = modadd();
        let last = m.params.len() - 1;
        m.params[last] = Tensor::zeros(1, 59);
        m.params[last].set(0, 5, 1.0);
        let rows = knockout_table(&m, &data, &[], Metric::Accuracy).unwrap();
        let all = rows.last().unwrap();
        let crate::datasets::Targets::Classes { labels, .. } = &data.targets else { panic!() };
        let fives = data.test.iter().filter(|&&i| labels[i] == 5).count();
        assert_eq!(all.metric, fives as f64 / data.test.len() as f64);
        assert!((all.metric - 1.0 / 59.0).abs() < 0.01);
    }

    #[test]
    fn overlapping_modules_are_rejected() {
        let (m, data) = modadd();
        let a = Module {
            name: "A".into(),
            neurons: ids("L1", &[0, 1]),
        };
        let b = Module {
            name: "B".into(),
            neurons: ids("L1", &[1, 2]),
        };
        assert!(knockout_table(&m, &data, &[a, b], Metric::Accuracy).is_err());
    }
}
