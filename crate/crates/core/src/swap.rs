//! Function-preserving neuron swaps that reduce the connection cost.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::loss::connection_cost;
use crate::models::{Axis, GroupKind, Model, TensorRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapConfig {
    /// Important neurons considered per group.
    pub k: usize,
    /// Swap interval in training steps.
    pub every: u64,
    pub allow_input_swaps: bool,
    pub allow_output_swaps: bool,
}

impl SwapConfig {
    pub fn disabled() -> Self {
        SwapConfig {
            k: 0,
            every: u64::MAX,
            allow_input_swaps: false,
            allow_output_swaps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.every == 0 {
            return Err(Error::Config("swap interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn allows(&self, kind: GroupKind) -> bool {
        match kind {
            GroupKind::Input => self.allow_input_swaps,
            GroupKind::Output => self.allow_output_swaps,
            GroupKind::Hidden | GroupKind::Embedding => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub group: String,
    pub j: usize,
    pub k: usize,
    pub delta_cost: f64,
}

/// `sum |incoming| + sum |outgoing|` per slot of group `g`, including
/// embedding table columns; biases do not count.
pub fn neuron_scores(model: &Model, g: usize) -> Vec<f64> {
    let group = &model.topology.groups[g];
    let mut s = vec![0.0; group.size];
    for a in &group.attachments {
        if matches!(model.topology.tensors[a.tensor].role, TensorRole::Bias { .. }) {
            continue;
        }
        let t = &model.params[a.tensor];
        match a.axis {
            Axis::Rows => {
                for r in 0..t.rows() {
                    s[r % group.size] += t.row(r).iter().map(|v| v.abs()).sum::<f64>();
                }
            }
            Axis::Cols => {
                for r in 0..t.rows() {
                    for (sj, v) in s.iter_mut().zip(t.row(r)) {
                        *sj += v.abs();
                    }
                }
            }
        }
    }
    s
}

/// Change in connection cost if slots `j` and `k` of group `g` were swapped,
/// touching only the terms of the two neurons.
pub fn swap_delta(model: &Model, g: usize, j: usize, k: usize) -> f64 {
    if j == k {
        return 0.0;
    }
    let group = &model.topology.groups[g];
    let mut delta = 0.0;
    for a in &group.attachments {
        let info = &model.topology.tensors[a.tensor];
        let TensorRole::Weight { from, to } = info.role else {
            continue;
        };
        if model.topology.layers[from].group == model.topology.layers[to].group {
            return brute_force_delta(model, g, j, k);
        }
        let (w, d) = (&model.params[a.tensor], model.distances(a.tensor).expect("weight distances"));
        match a.axis {
            Axis::Rows => {
                for tile in 0..a.tiles {
                    let (rj, rk) = (j + tile * group.size, k + tile * group.size);
                    delta += row_delta(w.row(rj), w.row(rk), d.row(rj), d.row(rk));
                }
            }
            Axis::Cols => {
                for r in 0..w.rows() {
                    let (wj, wk) = (w.get(r, j).abs(), w.get(r, k).abs());
                    delta += (d.get(r, j) - d.get(r, k)) * (wk - wj);
                }
            }
        }
    }
    delta
}

fn row_delta(wj: &[f64], wk: &[f64], dj: &[f64], dk: &[f64]) -> f64 {
    wj.iter()
        .zip(wk)
        .zip(dj.iter().zip(dk))
        .map(|((a, b), (da, db))| (da - db) * (b.abs() - a.abs()))
        .sum()
}

fn brute_force_delta(model: &Model, g: usize, j: usize, k: usize) -> f64 {
    let before = connection_cost(model);
    let mut m = model.clone();
    permute_params(&mut m.params, model, g, j, k);
    connection_cost(&m) - before
}

/// Best partner for slot `j`: the `k` minimizing the cost change, smallest
/// index on ties, returned only if the change is negative.
pub fn best_swap_for(model: &Model, g: usize, j: usize) -> Option<(usize, f64)> {
    let n = model.topology.groups[g].size;
    let mut best: Option<(usize, f64)> = None;
    for k in (0..n).filter(|&k| k != j) {
        let d = swap_delta(model, g, j, k);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.filter(|&(_, d)| d < 0.0)
}

fn permute_params(params: &mut [Tensor], model: &Model, g: usize, j: usize, k: usize) {
    let group = &model.topology.groups[g];
    for a in &group.attachments {
        let t = &mut params[a.tensor];
        match a.axis {
            Axis::Rows => {
                for tile in 0..a.tiles {
                    t.swap_rows(j + tile * group.size, k + tile * group.size);
                }
            }
            Axis::Cols => t.swap_cols(j, k),
        }
    }
}

/// Exchanges slots `j` and `k` of group `g` in every attached tensor, in the
/// optimizer moments when given, and in the group's permutation.
pub fn apply_swap(model: &mut Model, g: usize, j: usize, k: usize, adam: Option<&mut AdamState>) -> Result<()> {
    let group = model
        .topology
        .groups
        .get(g)
        .ok_or_else(|| Error::invalid(format!("no neuron group {g}")))?;
    if j == k || j >= group.size || k >= group.size {
        return Err(Error::invalid(format!(
            "illegal swap ({j}, {k}) in group {} of {} neurons",
            group.name, group.size
        )));
    }
    let mut params = std::mem::take(&mut model.params);
    permute_params(&mut params, model, g, j, k);
    model.params = params;
    if let Some(adam) = adam {
        permute_params(&mut adam.m, model, g, j, k);
        permute_params(&mut adam.v, model, g, j, k);
    }
    model.perms[g].swap(j, k);
    Ok(())
}

/// One round of greedy swaps over every swappable group.
pub fn swap_step(model: &mut Model, config: &SwapConfig, mut adam: Option<&mut AdamState>) -> Result<Vec<SwapEvent>> {
    let mut events = Vec::new();
    if config.k == 0 {
        return Ok(events);
    }
    for g in 0..model.topology.groups.len() {
        let group = &model.topology.groups[g];
        if !config.allows(group.kind) || group.size < 2 {
            continue;
        }
        let name = group.name.clone();
        let scores = neuron_scores(model, g);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        // current slot of each important neuron, updated as swaps move them
        let mut pending: Vec<usize> = order.into_iter().take(config.k).collect();
        for i in 0..pending.len() {
            let j = pending[i];
            if let Some((k, delta)) = best_swap_for(model, g, j) {
                apply_swap(model, g, j, k, adam.as_deref_mut())?;
                for p in pending.iter_mut().skip(i + 1) {
                    if *p == k {
                        *p = j;
                    } else if *p == j {
                        *p = k;
                    }
                }
                events.push(SwapEvent {
                    group: name.clone(),
                    j,
                    k,
                    delta_cost: delta,
                });
            }
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests;
