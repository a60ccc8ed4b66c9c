//! SiLU MLPs, a two-block transformer without LayerNorm, initialization and
//! knockout editing.
//!
//! Parameters are stored in spatial order: column `s` of a weight matrix is
//! the neuron currently placed at slot `s`. `perms[g][s]` names the logical
//! neuron at slot `s` of group `g`; the input permutation is applied to data
//! and the output permutation undone on the way out, so swaps never change
//! the function the model computes.

mod checkpoint;
mod spec;
mod topology;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use spec::{EmbeddingSpec, MlpSpec, NetworkSpec, TransformerSpec};
pub use topology::{Attachment, Axis, GroupKind, NeuronGroup, NeuronLayer, TensorInfo, TensorRole, Topology};

use crate::autodiff::gradcheck::{finite_difference, relative_error};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, GeometryConfig};

/// A batch as the network consumes it.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    /// `batch x n_0` features in logical order.
    Dense(Tensor),
    /// `per_sample` token ids per sample, flattened sample-major.
    Tokens { ids: Vec<usize>, per_sample: usize },
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Dense(t) => t.rows(),
            ModelInput::Tokens { ids, per_sample } => ids.len() / (*per_sample).max(1),
        }
    }
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    /// Logical outputs, `batch x output_width`.
    pub output: Var,
    /// Hidden activations in spatial order, keyed by neuron layer index.
    pub hidden: Vec<(usize, Var)>,
}

/// Identifies one neuron as `group:slot`, e.g. `L2:11`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronId {
    pub group: String,
    pub slot: usize,
}

impl std::str::FromStr for NeuronId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (g, i) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::invalid(format!("neuron id `{s}` is not `group:slot`")))?;
        Ok(NeuronId {
            group: g.to_string(),
            slot: i
                .parse()
                .map_err(|_| Error::invalid(format!("bad slot in neuron id `{s}`")))?,
        })
    }
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.group, self.slot)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: NetworkSpec,
    pub topology: Topology,
    pub geometry: Geometry,
    pub params: Vec<Tensor>,
    pub perms: Vec<Vec<usize>>,
    distances: Vec<Option<Rc<Tensor>>>,
}

impl Model {
    /// Freshly initialized model: weights `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// zero biases, tables from `N(0, std^2)`, then `N(0, noise_std^2)` added
    /// to every entry from an independent stream.
    pub fn init(spec: NetworkSpec, geometry: GeometryConfig, seed: u64, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
        }
        let topology = spec.topology()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(topology.tensors.len());
        for info in &topology.tensors {
            let t = match info.role {
                TensorRole::Weight { .. } => {
                    let bound = 1.0 / (info.rows as f64).sqrt();
                    Tensor::from_fn(info.rows, info.cols, |_, _| rng.random_range(-bound..=bound))
                }
                TensorRole::Bias { .. } => Tensor::zeros(info.rows, info.cols),
                TensorRole::Table { init_std } => {
                    let n = normal(init_std)?;
                    Tensor::from_fn(info.rows, info.cols, |_, _| n.sample(&mut rng))
                }
            };
            params.push(t);
        }
        if noise_std > 0.0 {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
            noise_rng.set_stream(1);
            let n = normal(noise_std)?;
            for p in &mut params {
                p.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut noise_rng));
            }
        }
        let perms = topology.groups.iter().map(|g| (0..g.size).collect()).collect();
        Self::assemble(spec, topology, geometry, params, perms)
    }

    /// Builds a model from explicit parameters (in topology order).
    pub fn from_parts(
        spec: NetworkSpec,
        geometry: GeometryConfig,
        params: Vec<Tensor>,
        perms: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let topology = spec.topology()?;
        let perms =
            perms.unwrap_or_else(|| topology.groups.iter().map(|g| (0..g.size).collect()).collect());
        Self::assemble(spec, topology, geometry, params, perms)
    }

    fn assemble(
        spec: NetworkSpec,
        topology: Topology,
        config: GeometryConfig,
        params: Vec<Tensor>,
        perms: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if params.len() != topology.tensors.len() {
            return Err(Error::invalid(format!(
                "{} tensors supplied, architecture has {}",
                params.len(),
                topology.tensors.len()
            )));
        }
        for (p, info) in params.iter().zip(&topology.tensors) {
            if p.shape() != (info.rows, info.cols) {
                return Err(Error::shape(
                    "model",
                    format!("{} is {:?}, expected {:?}", info.name, p.shape(), (info.rows, info.cols)),
                ));
            }
        }
        if perms.len() != topology.groups.len() {
            return Err(Error::invalid("one permutation per neuron group required"));
        }
        for (p, g) in perms.iter().zip(&topology.groups) {
            let mut seen = vec![false; g.size];
            if p.len() != g.size || !p.iter().all(|&i| i < g.size && !std::mem::replace(&mut seen[i], true)) {
                return Err(Error::invalid(format!("permutation of group {} is not a bijection", g.name)));
            }
        }
        let layers: Vec<_> = topology
            .layers
            .iter()
            .map(|l| (l.layout, topology.groups[l.group].size, l.depth))
            .collect();
        let geometry = Geometry::build(config, &layers)?;
        let mut distances = vec![None; topology.tensors.len()];
        for (i, info) in topology.tensors.iter().enumerate() {
            if let TensorRole::Weight { from, to } = info.role {
                distances[i] = Some(Rc::new(geometry.distance_matrix(from, to, info.rows)?));
            }
        }
        Ok(Model {
            spec,
            topology,
            geometry,
            params,
            perms,
            distances,
        })
    }

    /// Connection lengths for weight tensor `i`, shaped like the tensor.
    pub fn distances(&self, i: usize) -> Option<&Rc<Tensor>> {
        self.distances.get(i).and_then(|d| d.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.topology.tensor_index(name).map(|i| &self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Slot currently holding logical neuron `logical` of group `g`.
    pub fn slot_of(&self, g: usize, logical: usize) -> usize {
        self.perms[g].iter().position(|&l| l == logical).unwrap_or(logical)
    }

    fn inverse_perm(&self, g: usize) -> Vec<usize> {
        let mut inv = vec![0; self.perms[g].len()];
        for (slot, &l) in self.perms[g].iter().enumerate() {
            inv[l] = slot;
        }
        inv
    }

    fn is_identity(&self, g: usize) -> bool {
        self.perms[g].iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Records every parameter on `tape`, as trainable leaves when `trainable`.
    pub fn leaves(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    pub fn forward(&self, tape: &Tape, vars: &[Var], input: &ModelInput) -> Result<Forward> {
        match &self.spec {
            NetworkSpec::Mlp(m) => self.mlp_forward(m, tape, vars, input),
            NetworkSpec::Transformer(t) => self.transformer_forward(t, tape, vars, input),
        }
    }

    /// Logical outputs for a batch, evaluated outside any training tape.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.leaves(&tape, false);
        let f = self.forward(&tape, &vars, input)?;
        let out = tape.value(f.output);
        Ok((*out).clone())
    }

    /// Hidden activations keyed by neuron-layer name, spatial order.
    pub fn activations(&self, input: &ModelInput) -> Result<Vec<(String, Tensor)>> {
        let tape = Tape::new();
        let vars = self.leaves(&tape, false);
        let f = self.forward(&tape, &vars, input)?;
        Ok(f.hidden
            .into_iter()
            .map(|(l, v)| (self.topology.layers[l].name.clone(), (*tape.value(v)).clone()))
            .collect())
    }

    fn dense_input(&self, tape: &Tape, x: &Tensor, group: usize) -> Result<Var> {
        let n = self.topology.groups[group].size;
        if x.cols() != n {
            return Err(Error::shape(
                "forward",
                format!("input has {} features, network expects {n}", x.cols()),
            ));
        }
        let v = tape.constant(x.clone());
        if self.is_identity(group) {
            Ok(v)
        } else {
            tape.select_cols(v, &self.perms[group])
        }
    }

    fn logical_output(&self, tape: &Tape, h: Var, group: usize) -> Result<Var> {
        if self.is_identity(group) {
            Ok(h)
        } else {
            tape.select_cols(h, &self.inverse_perm(group))
        }
    }

    fn mlp_forward(&self, m: &MlpSpec, tape: &Tape, v: &[Var], input: &ModelInput) -> Result<Forward> {
        let mut h = match (m.embedding, input) {
            (None, ModelInput::Dense(x)) => self.dense_input(tape, x, 0)?,
            (Some(e), ModelInput::Tokens { ids, per_sample }) => {
                if *per_sample != e.tokens {
                    return Err(Error::shape(
                        "forward",
                        format!("{per_sample} tokens per sample, network expects {}", e.tokens),
                    ));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= e.vocab) {
                    return Err(Error::invalid(format!("token {bad} outside vocabulary of {}", e.vocab)));
                }
                let table = v[0];
                let parts = (0..e.tokens)
                    .map(|p| {
                        let col: Vec<usize> = ids.iter().skip(p).step_by(e.tokens).copied().collect();
                        tape.gather_rows(table, &col)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_cols(&parts)?
            }
            _ => return Err(Error::invalid("input kind does not match the network's first layer")),
        };
        let first = usize::from(m.embedding.is_some());
        let n_layers = m.widths.len() - 1;
        let mut hidden = Vec::new();
        for i in 1..=n_layers {
            let w = v[first + 2 * (i - 1)];
            let b = v[first + 2 * (i - 1) + 1];
            h = tape.add_bias(tape.matmul(h, w)?, b)?;
            if i < n_layers {
                h = tape.silu(h);
                hidden.push((i, h));
            }
        }
        let output = self.logical_output(tape, h, n_layers)?;
        Ok(Forward { output, hidden })
    }

    /// Forward of the in-context regression transformer.
    ///
    /// Input rows are `(x1, y1, x)`; tokens are `[0, x1]`, `[y1, 0]`, `[0, x]`
    /// and the prediction is `output_component` of the last position.
    fn transformer_forward(
        &self,
        t: &TransformerSpec,
        tape: &Tape,
        v: &[Var],
        input: &ModelInput,
    ) -> Result<Forward> {
        let x = match input {
            ModelInput::Dense(x) if x.cols() == 3 => x,
            _ => return Err(Error::invalid("transformer input must be dense (x1, y1, x) rows")),
        };
        let batch = x.rows();
        let mut tokens = Tensor::zeros(batch * 3, 2);
        for i in 0..batch {
            let r = x.row(i);
            tokens.set(3 * i, 1, r[0]);
            tokens.set(3 * i + 1, 0, r[1]);
            tokens.set(3 * i + 2, 1, r[2]);
        }
        let topo = &self.topology;
        let idx = |name: &str| topo.tensor_index(name).ok_or_else(|| Error::invalid(format!("missing {name}")));
        let p = |name: &str| idx(name).map(|i| v[i]);
        let g_in = topo.group_index("in").unwrap_or(0);
        let x = self.dense_input(tape, &tokens, g_in)?;
        let mut h = tape.add_bias(tape.matmul(x, p("embed.W")?)?, p("embed.b")?)?;
        h = tape.add_tiled(h, p("pos")?)?;
        let layer = |name: String| topo.layer_index(&name).unwrap_or(0);
        let mut hidden = vec![(layer("res0".into()), h)];
        for blk in 1..=t.n_blocks {
            let lin = |h: Var, w: &str, b: &str| -> Result<Var> {
                tape.add_bias(tape.matmul(h, p(&format!("b{blk}.{w}"))?)?, p(&format!("b{blk}.{b}"))?)
            };
            let q = lin(h, "Wq", "bq")?;
            let k = lin(h, "Wk", "bk")?;
            let val = lin(h, "Wv", "bv")?;
            let att = tape.causal_attention(q, k, val, t.seq_len)?;
            hidden.push((layer(format!("v{blk}")), att));
            h = tape.add(h, lin(att, "Wo", "bo")?)?;
            hidden.push((layer(format!("res{blk}a")), h));
            let m = tape.silu(lin(h, "W1", "b1")?);
            hidden.push((layer(format!("mlp{blk}")), m));
            h = tape.add(h, lin(m, "W2", "b2")?)?;
            hidden.push((layer(format!("res{blk}b")), h));
        }
        let out = tape.add_bias(tape.matmul(h, p("unembed.W")?)?, p("unembed.b")?)?;
        let last: Vec<usize> = (0..batch).map(|i| 3 * i + 2).collect();
        let out = tape.select_rows(out, &last)?;
        let g_out = topo.group_index("out").unwrap_or(topo.groups.len() - 1);
        let slot = self.slot_of(g_out, t.output_component);
        let output = tape.select_cols(out, &[slot])?;
        Ok(Forward { output, hidden })
    }

    /// Copy with every parameter attached to the listed neurons set to zero.
    pub fn knockout(&self, neurons: &[NeuronId]) -> Result<Model> {
        let mut out = self.clone();
        for id in neurons {
            let g = self
                .topology
                .group_index(&id.group)
                .ok_or_else(|| Error::invalid(format!("unknown neuron group `{}`", id.group)))?;
            let group = &self.topology.groups[g];
            if id.slot >= group.size {
                return Err(Error::invalid(format!(
                    "neuron {id} out of range for group of {}",
                    group.size
                )));
            }
            for a in &group.attachments {
                let t = &mut out.params[a.tensor];
                match a.axis {
                    Axis::Rows => {
                        for tile in 0..a.tiles {
                            t.row_mut(id.slot + tile * group.size).iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                    Axis::Cols => {
                        for r in 0..t.rows() {
                            t.set(r, id.slot, 0.0);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// All neurons of the given kinds, as ids.
    pub fn neurons_of(&self, kinds: &[GroupKind]) -> Vec<NeuronId> {
        self.topology
            .groups
            .iter()
            .filter(|g| kinds.contains(&g.kind))
            .flat_map(|g| {
                (0..g.size).map(move |slot| NeuronId {
                    group: g.name.clone(),
                    slot,
                })
            })
            .collect()
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients of the MSE against `target`, over all parameter tensors.
    pub fn gradient_error(&self, x: &ModelInput, target: &Tensor) -> Result<f64> {
        let target = Rc::new(target.clone());
        let tape = Tape::new();
        let vars = self.leaves(&tape, true);
        let f = self.forward(&tape, &vars, x)?;
        let loss = tape.mse(f.output, target.clone())?;
        let grads = tape.backward(loss)?;
        let numeric = finite_difference(
            |ps| {
                let mut m = self.clone();
                m.params = ps.to_vec();
                let out = m.predict(x)?;
                Ok(out
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / out.len() as f64)
            },
            &self.params,
            1e-5,
        )?;
        Ok(vars
            .iter()
            .zip(&numeric)
            .map(|(v, n)| {
                let z = Tensor::zeros(n.rows(), n.cols());
                relative_error(grads.get(*v).unwrap_or(&z), n)
            })
            .fold(0.0, f64::max))
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint::from_model(self, step)
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::invalid(format!("bad normal std {std}: {e}")))
}

#[cfg(test)]
mod tests;
