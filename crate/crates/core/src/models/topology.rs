//! Static description of which tensors attach to which neurons.
//!
//! Every architecture is lowered to the same three lists: parameter tensors,
//! neuron groups (sets of interchangeable neurons sharing one permutation) and
//! neuron layers (a group placed at one depth of the geometric embedding). A
//! group may appear in several layers; the transformer residual stream does.

use crate::geometry::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// A tensor axis indexed by a group's slots. `tiles > 1` means the axis has
/// `tiles * size` entries and entry `r` belongs to slot `r % size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attachment {
    pub tensor: usize,
    pub axis: Axis,
    pub tiles: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Input,
    Hidden,
    /// Token embedding dimensions feeding the first weight layer.
    Embedding,
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronGroup {
    pub name: String,
    pub size: usize,
    pub kind: GroupKind,
    pub attachments: Vec<Attachment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayer {
    pub name: String,
    pub group: usize,
    pub layout: Layout,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TensorRole {
    /// Matrix mapping neuron layer `from` (rows) to neuron layer `to` (cols).
    Weight { from: usize, to: usize },
    /// `1 x n` bias of a neuron layer.
    Bias { layer: usize },
    /// Lookup or additive table, regularized with plain L1 and initialized
    /// from `N(0, init_std^2)`.
    Table { init_std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: TensorRole,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Topology {
    pub tensors: Vec<TensorInfo>,
    pub groups: Vec<NeuronGroup>,
    pub layers: Vec<NeuronLayer>,
}

impl Topology {
    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Indices of all `Weight` tensors in declaration order.
    pub fn weight_tensors(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t.role, TensorRole::Weight { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn builder() -> TopologyBuilder {
        TopologyBuilder::default()
    }
}

#[derive(Default)]
pub(crate) struct TopologyBuilder {
    topo: Topology,
}

impl TopologyBuilder {
    pub fn group(&mut self, name: impl Into<String>, size: usize, kind: GroupKind) -> usize {
        self.topo.groups.push(NeuronGroup {
            name: name.into(),
            size,
            kind,
            attachments: Vec::new(),
        });
        self.topo.groups.len() - 1
    }

    pub fn layer(&mut self, name: impl Into<String>, group: usize, layout: Layout, depth: usize) -> usize {
        self.topo.layers.push(NeuronLayer {
            name: name.into(),
            group,
            layout,
            depth,
        });
        self.topo.layers.len() - 1
    }

    /// Weight from layer `from` to layer `to`; rows repeat `tiles` times.
    pub fn weight(&mut self, name: impl Into<String>, from: usize, to: usize, tiles: usize) -> usize {
        let gf = self.topo.layers[from].group;
        let gt = self.topo.layers[to].group;
        let rows = self.topo.groups[gf].size * tiles;
        let cols = self.topo.groups[gt].size;
        let t = self.tensor(name, rows, cols, TensorRole::Weight { from, to });
        self.attach(gf, t, Axis::Rows, tiles);
        self.attach(gt, t, Axis::Cols, 1);
        t
    }

    pub fn bias(&mut self, name: impl Into<String>, layer: usize) -> usize {
        let g = self.topo.layers[layer].group;
        let t = self.tensor(name, 1, self.topo.groups[g].size, TensorRole::Bias { layer });
        self.attach(g, t, Axis::Cols, 1);
        t
    }

    /// A `rows x size(group)` table whose columns belong to `group`.
    pub fn table(&mut self, name: impl Into<String>, rows: usize, group: usize, init_std: f64) -> usize {
        let t = self.tensor(
            name,
            rows,
            self.topo.groups[group].size,
            TensorRole::Table { init_std },
        );
        self.attach(group, t, Axis::Cols, 1);
        t
    }

    fn tensor(&mut self, name: impl Into<String>, rows: usize, cols: usize, role: TensorRole) -> usize {
        self.topo.tensors.push(TensorInfo {
            name: name.into(),
            rows,
            cols,
            role,
        });
        self.topo.tensors.len() - 1
    }

    fn attach(&mut self, group: usize, tensor: usize, axis: Axis, tiles: usize) {
        self.topo.groups[group]
            .attachments
            .push(Attachment { tensor, axis, tiles });
    }

    pub fn finish(self) -> Topology {
        self.topo
    }
}
