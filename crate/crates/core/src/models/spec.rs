use serde::{Deserialize, Serialize};

use super::topology::{GroupKind, Topology};
use crate::error::{Error, Result};
use crate::geometry::Layout;

/// Token embedding in front of an MLP: each sample is `tokens` ids whose
/// `dim`-wide embeddings are concatenated into the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub vocab: usize,
    pub dim: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Neuron layer widths `n_0 .. n_L`.
    pub widths: Vec<usize>,
    /// One layout per neuron layer; lines of the layer width when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layouts: Option<Vec<Layout>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSpec {
    pub d_in: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    pub d_out: usize,
    pub seq_len: usize,
    /// Output channel holding the prediction at the last position.
    pub output_component: usize,
    pub pos_init_std: f64,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        TransformerSpec {
            d_in: 2,
            d_model: 32,
            n_blocks: 2,
            d_mlp: 128,
            d_out: 2,
            seq_len: 3,
            output_component: 0,
            pos_init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    Mlp(MlpSpec),
    Transformer(TransformerSpec),
}

impl NetworkSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        NetworkSpec::Mlp(MlpSpec {
            widths: widths.to_vec(),
            layouts: None,
            embedding: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkSpec::Mlp(m) => {
                if m.widths.len() < 2 || m.widths.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp widths must list at least two positive layer sizes, got {:?}",
                        m.widths
                    )));
                }
                if let Some(l) = &m.layouts {
                    if l.len() != m.widths.len() {
                        return Err(Error::Config(format!(
                            "{} layouts for {} layers",
                            l.len(),
                            m.widths.len()
                        )));
                    }
                }
                if let Some(e) = m.embedding {
                    if e.vocab == 0 || e.dim == 0 || e.tokens == 0 {
                        return Err(Error::Config("embedding sizes must be positive".into()));
                    }
                    if e.dim * e.tokens != m.widths[0] {
                        return Err(Error::Config(format!(
                            "embedding {}x{} tokens does not match input width {}",
                            e.tokens, e.dim, m.widths[0]
                        )));
                    }
                }
                Ok(())
            }
            NetworkSpec::Transformer(t) => {
                if t.d_in != 2 || t.seq_len != 3 {
                    return Err(Error::Config(
                        "the transformer encodes (x1, y1, x) sequences: d_in = 2, seq_len = 3".into(),
                    ));
                }
                if t.d_model == 0 || t.d_mlp == 0 || t.n_blocks == 0 || t.d_out == 0 {
                    return Err(Error::Config("transformer sizes must be positive".into()));
                }
                if t.output_component >= t.d_out {
                    return Err(Error::Config(format!(
                        "output_component {} out of range for d_out {}",
                        t.output_component, t.d_out
                    )));
                }
                if !(t.pos_init_std >= 0.0) {
                    return Err(Error::Config("pos_init_std must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        self.validate()?;
        Ok(match self {
            NetworkSpec::Mlp(m) => mlp_topology(m),
            NetworkSpec::Transformer(t) => transformer_topology(t),
        })
    }

    /// Number of logical network outputs.
    pub fn output_width(&self) -> usize {
        match self {
            NetworkSpec::Mlp(m) => *m.widths.last().unwrap_or(&0),
            NetworkSpec::Transformer(_) => 1,
        }
    }
}

fn mlp_topology(m: &MlpSpec) -> Topology {
    let mut b = Topology::builder();
    let last = m.widths.len() - 1;
    let layout = |i: usize, n: usize| {
        m.layouts
            .as_ref()
            .map(|l| l[i])
            .unwrap_or(Layout::Line(n))
    };
    let mut layers = Vec::new();
    for (i, &w) in m.widths.iter().enumerate() {
        let (size, kind) = match (i, m.embedding) {
            (0, Some(e)) => (e.dim, GroupKind::Embedding),
            (0, None) => (w, GroupKind::Input),
            (i, _) if i == last => (w, GroupKind::Output),
            _ => (w, GroupKind::Hidden),
        };
        let g = b.group(format!("L{i}"), size, kind);
        layers.push(b.layer(format!("L{i}"), g, layout(i, size), i));
    }
    if let Some(e) = m.embedding {
        b.table("E", e.vocab, 0, 1.0);
    }
    let tiles = m.embedding.map_or(1, |e| e.tokens);
    for i in 1..=last {
        b.weight(format!("W{i}"), layers[i - 1], layers[i], if i == 1 { tiles } else { 1 });
        b.bias(format!("b{i}"), layers[i]);
    }
    b.finish()
}

fn transformer_topology(t: &TransformerSpec) -> Topology {
    let mut b = Topology::builder();
    let line = Layout::Line;
    let g_in = b.group("in", t.d_in, GroupKind::Input);
    let g_res = b.group("res", t.d_model, GroupKind::Hidden);
    let mut depth = 0;
    let l_in = b.layer("in", g_in, line(t.d_in), depth);
    depth += 1;
    let mut res = b.layer("res0", g_res, line(t.d_model), depth);
    b.weight("embed.W", l_in, res, 1);
    b.bias("embed.b", res);
    b.table("pos", t.seq_len, g_res, t.pos_init_std);
    for blk in 1..=t.n_blocks {
        let g_qk = b.group(format!("qk{blk}"), t.d_model, GroupKind::Hidden);
        let g_v = b.group(format!("v{blk}"), t.d_model, GroupKind::Hidden);
        let g_mlp = b.group(format!("mlp{blk}"), t.d_mlp, GroupKind::Hidden);
        depth += 1;
        let l_qk = b.layer(format!("qk{blk}"), g_qk, line(t.d_model), depth);
        let l_v = b.layer(format!("v{blk}"), g_v, line(t.d_model), depth);
        b.weight(format!("b{blk}.Wq"), res, l_qk, 1);
        b.bias(format!("b{blk}.bq"), l_qk);
        b.weight(format!("b{blk}.Wk"), res, l_qk, 1);
        b.bias(format!("b{blk}.bk"), l_qk);
        b.weight(format!("b{blk}.Wv"), res, l_v, 1);
        b.bias(format!("b{blk}.bv"), l_v);
        depth += 1;
        let res_a = b.layer(format!("res{blk}a"), g_res, line(t.d_model), depth);
        b.weight(format!("b{blk}.Wo"), l_v, res_a, 1);
        b.bias(format!("b{blk}.bo"), res_a);
        depth += 1;
        let l_mlp = b.layer(format!("mlp{blk}"), g_mlp, line(t.d_mlp), depth);
        b.weight(format!("b{blk}.W1"), res_a, l_mlp, 1);
        b.bias(format!("b{blk}.b1"), l_mlp);
        depth += 1;
        res = b.layer(format!("res{blk}b"), g_res, line(t.d_model), depth);
        b.weight(format!("b{blk}.W2"), l_mlp, res, 1);
        b.bias(format!("b{blk}.b2"), res);
    }
    let g_out = b.group("out", t.d_out, GroupKind::Output);
    depth += 1;
    let l_out = b.layer("out", g_out, line(t.d_out), depth);
    b.weight("unembed.W", res, l_out, 1);
    b.bias("unembed.b", l_out);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::topology::{Axis, TensorRole};

    #[test]
    fn mlp_layers_and_tensors() {
        let topo = NetworkSpec::mlp(&[4, 20, 20, 2]).topology().unwrap();
        assert_eq!(topo.groups.len(), 4);
        assert_eq!(topo.tensors.len(), 6);
        let w1 = &topo.tensors[topo.tensor_index("W1").unwrap()];
        assert_eq!((w1.rows, w1.cols), (4, 20));
        assert_eq!(topo.groups[0].kind, GroupKind::Input);
        assert_eq!(topo.groups[3].kind, GroupKind::Output);
        assert_eq!(topo.groups[1].attachments.len(), 3);
    }

    #[test]
    fn embedding_rows_tile() {
        let spec = NetworkSpec::Mlp(MlpSpec {
            widths: vec![64, 100, 100, 59],
            layouts: None,
            embedding: Some(EmbeddingSpec {
                vocab: 59,
                dim: 32,
                tokens: 2,
            }),
        });
        let topo = spec.topology().unwrap();
        assert_eq!(topo.groups[0].size, 32);
        let w1 = topo.tensor_index("W1").unwrap();
        assert_eq!(topo.tensors[w1].rows, 64);
        let att = topo.groups[0]
            .attachments
            .iter()
            .find(|a| a.tensor == w1)
            .unwrap();
        assert_eq!((att.axis, att.tiles), (Axis::Rows, 2));
        let e = topo.tensor_index("E").unwrap();
        assert_eq!((topo.tensors[e].rows, topo.tensors[e].cols), (59, 32));
        assert!(matches!(topo.tensors[e].role, TensorRole::Table { .. }));
    }

    #[test]
    fn transformer_shares_residual_group() {
        let topo = NetworkSpec::Transformer(TransformerSpec::default())
            .topology()
            .unwrap();
        let res = topo.group_index("res").unwrap();
        let res_layers = topo.layers.iter().filter(|l| l.group == res).count();
        assert_eq!(res_layers, 5);
        // embed.W, embed.b, pos, per block (Wq, Wk, Wv, W1 rows; Wo, bo, W2, b2), unembed.W rows
        assert_eq!(topo.groups[res].attachments.len(), 3 + 2 * 8 + 1);
        let qk = topo.group_index("qk1").unwrap();
        assert_eq!(topo.groups[qk].attachments.len(), 4);
        assert_eq!(topo.layers.last().unwrap().depth, 10);
    }

    #[test]
    fn invalid_specs() {
        assert!(NetworkSpec::mlp(&[3]).validate().is_err());
        assert!(NetworkSpec::mlp(&[3, 0, 1]).validate().is_err());
        let bad = NetworkSpec::Mlp(MlpSpec {
            widths: vec![10, 5],
            layouts: None,
            embedding: Some(EmbeddingSpec {
                vocab: 3,
                dim: 4,
                tokens: 2,
            }),
        });
        assert!(bad.validate().is_err());
    }

}
