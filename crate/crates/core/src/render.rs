//! Connectivity graphs and their SVG drawings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{GroupKind, Model, TensorRole};
use crate::swap::neuron_scores;

pub const BLUE: &str = "#0000ff";
pub const RED: &str = "#ff0000";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    /// `layer:slot`.
    pub id: String,
    pub layer: usize,
    pub layer_name: String,
    pub slot: usize,
    pub plane: Vec<f64>,
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub tensor: String,
    pub weight: f64,
    /// Weight over the largest magnitude in the same tensor.
    pub normalized: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    pub three_d: bool,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Names for logical input and output features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphLabels {
    pub inputs: Option<Vec<String>>,
    pub outputs: Option<Vec<String>>,
}

impl ConnectivityGraph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn node_index(&self, layer: usize, slot: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.layer == layer && n.slot == slot)
    }
}

/// One node per neuron-layer slot and one edge per weight entry; tiled rows
/// start at slot `row % width` of their source layer.
pub fn build_graph(model: &Model, labels: &GraphLabels) -> Result<ConnectivityGraph> {
    let topo = &model.topology;
    if model.geometry.coords.len() != topo.layers.len() {
        return Err(Error::invalid(format!(
            "{} geometry layers for {} neuron layers",
            model.geometry.coords.len(),
            topo.layers.len()
        )));
    }
    let scores: Vec<Vec<f64>> = (0..topo.groups.len()).map(|g| neuron_scores(model, g)).collect();
    let mut nodes = Vec::new();
    let mut first = Vec::with_capacity(topo.layers.len());
    for (li, layer) in topo.layers.iter().enumerate() {
        let group = &topo.groups[layer.group];
        let coords = &model.geometry.coords[li];
        if coords.len() != group.size {
            return Err(Error::invalid(format!(
                "layer {} has {} coordinates for {} neurons",
                layer.name,
                coords.len(),
                group.size
            )));
        }
        first.push(nodes.len());
        for (slot, c) in coords.iter().enumerate() {
            let logical = model.perms[layer.group][slot];
            let label = match group.kind {
                GroupKind::Input => Some(name_for(&labels.inputs, logical, "x")),
                GroupKind::Output => Some(name_for(&labels.outputs, logical, "y")),
                _ => None,
            };
            nodes.push(GraphNode {
                id: format!("{}:{slot}", layer.name),
                layer: li,
                layer_name: layer.name.clone(),
                slot,
                plane: c.plane.clone(),
                depth: c.depth,
                label,
                score: scores[layer.group][slot],
            });
        }
    }
    let mut edges = Vec::new();
    for (ti, info) in topo.tensors.iter().enumerate() {
        let TensorRole::Weight { from, to } = info.role else {
            continue;
        };
        let w = &model.params[ti];
        let n_from = topo.groups[topo.layers[from].group].size;
        let max = w.max_abs();
        for r in 0..w.rows() {
            for (c, &v) in w.row(r).iter().enumerate() {
                edges.push(GraphEdge {
                    src: first[from] + r % n_from,
                    dst: first[to] + c,
                    tensor: info.name.clone(),
                    weight: v,
                    normalized: if max > 0.0 { v / max } else { 0.0 },
                });
            }
        }
    }
    let three_d = model.geometry.layouts.first().is_some_and(|l| l.plane_dims() == 2);
    Ok(ConnectivityGraph { three_d, nodes, edges })
}

fn name_for(names: &Option<Vec<String>>, i: usize, prefix: &str) -> String {
    names
        .as_ref()
        .and_then(|n| n.get(i).cloned())
        .unwrap_or_else(|| format!("{prefix}{}", i + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Stroke width of an edge with `|normalized| = 1`.
    pub stroke_max_px: f64,
    /// Edges thinner than this are left out of the drawing only.
    pub min_draw_width: f64,
    pub px_per_unit: f64,
    /// Drawing distance between consecutive neuron layers, in plane units.
    pub layer_spacing: f64,
    pub margin_px: f64,
    pub node_radius_px: f64,
    /// Oblique projection of the second plane axis for 3D layouts.
    pub projection_angle_deg: f64,
    pub projection_depth: f64,
    pub show_labels: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            stroke_max_px: 3.0,
            min_draw_width: 0.0,
            px_per_unit: 150.0,
            layer_spacing: 0.5,
            margin_px: 30.0,
            node_radius_px: 2.5,
            projection_angle_deg: 30.0,
            projection_depth: 0.5,
            show_labels: true,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stroke_max_px", self.stroke_max_px),
            ("px_per_unit", self.px_per_unit),
            ("layer_spacing", self.layer_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("render.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("min_draw_width", self.min_draw_width),
            ("margin_px", self.margin_px),
            ("node_radius_px", self.node_radius_px),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("render.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Drawing-plane position before pixel scaling: `x' = x - c z cos(t)`,
/// `y' = y - c z sin(t)` with `y` the layer height.
pub fn project(node: &GraphNode, depth_unit: f64, opts: &RenderOptions) -> (f64, f64) {
    let x = node.plane.first().copied().unwrap_or(0.0);
    let y = node.depth / depth_unit * opts.layer_spacing;
    let z = node.plane.get(1).copied().unwrap_or(0.0);
    let t = opts.projection_angle_deg.to_radians();
    (
        x - opts.projection_depth * z * t.cos(),
        y - opts.projection_depth * z * t.sin(),
    )
}

/// Smallest positive gap between node depths, the height of one layer.
fn depth_unit(graph: &ConnectivityGraph) -> f64 {
    let mut d: Vec<f64> = graph.nodes.iter().map(|n| n.depth).collect();
    d.sort_by(f64::total_cmp);
    let gap = d
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 1e-12)
        .fold(f64::INFINITY, f64::min);
    if gap.is_finite() {
        gap
    } else {
        1.0
    }
}

pub fn render_svg(graph: &ConnectivityGraph, opts: &RenderOptions) -> String {
    let unit = depth_unit(graph);
    let pts: Vec<(f64, f64)> = graph.nodes.iter().map(|n| project(n, unit, opts)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    if let Some(&(x, y)) = pts.first() {
        (x0, x1, y0, y1) = (x, x, y, y);
    }
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let s = opts.px_per_unit;
    let m = opts.margin_px;
    let width = (x1 - x0) * s + 2.0 * m;
    let height = (y1 - y0) * s + 2.0 * m;
    // inputs at the bottom
    let px = |(x, y): (f64, f64)| ((x - x0) * s + m, (y1 - y) * s + m);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.2}" height="{height:.2}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<g id="edges" stroke-linecap="round">"#);
    for e in &graph.edges {
        let w = opts.stroke_max_px * e.normalized.abs();
        if e.weight == 0.0 || w <= 0.0 || w < opts.min_draw_width {
            continue;
        }
        let color = if e.weight > 0.0 { BLUE } else { RED };
        let (ax, ay) = px(pts[e.src]);
        let (bx, by) = px(pts[e.dst]);
        let _ = writeln!(
            out,
            r#"<path d="M{ax:.2} {ay:.2} L{bx:.2} {by:.2}" stroke="{color}" stroke-width="{w:.3}"/>"#
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g id="nodes" fill="black">"#);
    if opts.node_radius_px > 0.0 {
        for &p in &pts {
            let (x, y) = px(p);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}"/>"#, opts.node_radius_px);
        }
    }
    let _ = writeln!(out, "</g>");
    if opts.show_labels {
        let _ = writeln!(out, r#"<g id="labels" font-family="sans-serif" font-size="10" text-anchor="middle">"#);
        for (n, &p) in graph.nodes.iter().zip(&pts) {
            let Some(label) = &n.label else { continue };
            let (x, y) = px(p);
            let dy = if n.layer == 0 { 14.0 } else { -8.0 };
            let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}">{}</text>"#, y + dy, escape(label));
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Diverging fill: `+1` blue, `0` white, `-1` red.
pub fn heat_color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (fade(v), fade(v), 255)
    } else {
        (255, fade(-v), fade(-v))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub svg: String,
    /// Entries outside `[-1, 1]` that were clamped.
    pub clamped: usize,
}

pub fn render_heatmap(matrix: &Tensor, row_labels: &[String], col_labels: &[String], cell_px: f64) -> Heatmap {
    let (rows, cols) = matrix.shape();
    let left = if row_labels.is_empty() { 0.0 } else { 40.0 };
    let top = if col_labels.is_empty() { 0.0 } else { 20.0 };
    let width = left + cols as f64 * cell_px;
    let height = top + rows as f64 * cell_px;
    let mut clamped = 0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.2}" height="{height:.2}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    let _ = writeln!(out, r#"<g id="cells" stroke="none">"#);
    for r in 0..rows {
        for c in 0..cols {
            let v = matrix.get(r, c);
            if !(-1.0..=1.0).contains(&v) {
                clamped += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell_px:.2}" height="{cell_px:.2}" fill="{}"/>"#,
                left + c as f64 * cell_px,
                top + r as f64 * cell_px,
                heat_color(if v.is_nan() { 0.0 } else { v })
            );
        }
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g id="labels" font-family="sans-serif" font-size="9">"#);
    for (r, l) in row_labels.iter().enumerate().take(rows) {
        let _ = writeln!(
            out,
            r#"<text x="2" y="{:.2}">{}</text>"#,
            top + (r as f64 + 0.7) * cell_px,
            escape(l)
        );
    }
    for (c, l) in col_labels.iter().enumerate().take(cols) {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="14">{}</text>"#,
            left + c as f64 * cell_px,
            escape(l)
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    if clamped > 0 {
        log::warn!("heatmap: clamped {clamped} entries outside [-1, 1]");
    }
    Heatmap { svg: out, clamped }
}

/// Model graph straight to SVG with default labels.
pub fn model_svg(model: &Model, opts: &RenderOptions) -> Result<String> {
    Ok(render_svg(&build_graph(model, &GraphLabels::default())?, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DistanceScale, GeometryConfig, Norm};
    use crate::models::{MlpSpec, NetworkSpec};
    use crate::geometry::Layout;

    fn geo() -> GeometryConfig {
        GeometryConfig {
            a: 2.0,
            y_star: 0.1,
            norm: Norm::L1,
            distance_scale: DistanceScale::Literal,
        }
    }

    fn model(widths: &[usize]) -> Model {
        Model::init(NetworkSpec::mlp(widths), geo(), 3, 0.0).unwrap()
    }

    fn paths(svg: &str) -> Vec<&str> {
        svg.lines().filter(|l| l.starts_with("<path")).collect()
    }

    #[test]
    fn edges_cover_every_weight() {
        let m = model(&[3, 5, 4, 2]);
        let g = build_graph(&m, &GraphLabels::default()).unwrap();
        assert_eq!(g.edges.len(), 3 * 5 + 5 * 4 + 4 * 2);
        assert_eq!(g.nodes.len(), 14);
        for t in ["W1", "W2", "W3"] {
            let max = g
                .edges
                .iter()
                .filter(|e| e.tensor == t)
                .map(|e| e.normalized.abs())
                .fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-15);
        }
        assert_eq!(g.nodes[0].label.as_deref(), Some("x1"));
        assert_eq!(g.nodes[13].label.as_deref(), Some("y2"));
    }

    #[test]
    fn degenerate_layers() {
        let mut m = model(&[2, 3, 1]);
        m.params[0] = Tensor::filled(2, 3, -0.4);
        m.params[2] = Tensor::zeros(3, 1);
        let g = build_graph(&m, &GraphLabels::default()).unwrap();
        assert!(g.edges.iter().filter(|e| e.tensor == "W1").all(|e| e.normalized == -1.0));
        assert!(g.edges.iter().filter(|e| e.tensor == "W2").all(|e| e.normalized == 0.0));
        let svg = render_svg(&g, &RenderOptions::default());
        assert_eq!(paths(&svg).len(), 6);
        assert!(paths(&svg).iter().all(|p| p.contains(RED)));
    }

    #[test]
    fn svg_output() {
        let empty = render_svg(&ConnectivityGraph::default(), &RenderOptions::default());
        assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
        assert!(paths(&empty).is_empty());

        let mut m = model(&[1, 1]);
        m.params[0] = Tensor::scalar(0.7);
        let g = build_graph(&m, &GraphLabels::default()).unwrap();
        let svg = render_svg(&g, &RenderOptions::default());
        let p = paths(&svg);
        assert_eq!(p.len(), 1);
        assert!(p[0].contains(BLUE) && p[0].contains(r#"stroke-width="3.000""#));
        assert_eq!(svg, render_svg(&g, &RenderOptions::default()));
    }

    #[test]
    fn labels_follow_permutations() {
        let mut m = model(&[2, 2, 2]);
        crate::swap::apply_swap(&mut m, 0, 0, 1, None).unwrap();
        let labels = GraphLabels {
            inputs: None,
            outputs: Some(vec!["one".into(), "seven".into()]),
        };
        crate::swap::apply_swap(&mut m, 2, 0, 1, None).unwrap();
        let g = build_graph(&m, &labels).unwrap();
        assert_eq!(g.nodes[0].label.as_deref(), Some("x2"));
        assert_eq!(g.nodes[4].label.as_deref(), Some("seven"));
    }

    #[test]
    fn grid_layers_project_obliquely() {
        let spec = NetworkSpec::Mlp(MlpSpec {
            widths: vec![4, 2],
            layouts: Some(vec![Layout::Grid { cols: 2, rows: 2 }, Layout::Grid { cols: 2, rows: 1 }]),
            embedding: None,
        });
        let m = Model::init(spec, geo(), 0, 0.0).unwrap();
        let g = build_graph(&m, &GraphLabels::default()).unwrap();
        assert!(g.three_d);
        let o = RenderOptions::default();
        let n = &g.nodes[3];
        let (x, y) = project(n, 0.1, &o);
        let z = n.plane[1];
        assert!((x - (n.plane[0] - 0.5 * z * 30f64.to_radians().cos())).abs() < 1e-12);
        assert!((y - (0.0 - 0.5 * z * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn heatmap_colors() {
        assert_eq!(heat_color(1.0), BLUE);
        assert_eq!(heat_color(-1.0), RED);
        assert_eq!(heat_color(0.0), "#ffffff");
        let h = render_heatmap(&Tensor::zeros(3, 4), &[], &[], 10.0);
        let cells: Vec<&str> = h.svg.lines().filter(|l| l.starts_with("<rect")).collect();
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().all(|c| c.contains("#ffffff")));
        let h = render_heatmap(&Tensor::row_vector(vec![2.0, -0.5]), &[], &[], 10.0);
        assert_eq!(h.clamped, 1);
        assert!(h.svg.contains(BLUE));
    }
}
