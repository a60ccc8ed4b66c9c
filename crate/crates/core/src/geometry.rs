//! Spatial embedding of neurons and connection lengths.
//!
//! Neuron layers are placed on parallel planes (2D: lines, 3D: grids) spaced
//! `y_star` apart in depth. Inside a layer, slot `j` of an `n`-wide line sits
//! at `A * j / n`; grid slot `(u, v)` sits at `(A * u / cols, A * v / rows)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

/// How in-plane offsets enter the distance.
///
/// `Literal` multiplies the offset between coordinates (already spanning
/// `[0, A]`) by `A` once more; `Unit` uses the offset between the scaled
/// coordinates as is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceScale {
    #[default]
    Literal,
    Unit,
}

/// Arrangement of one neuron layer inside its plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Line(usize),
    /// `cols` along the first in-plane axis, `rows` along the second; slot
    /// index `v * cols + u` (row-major).
    Grid { cols: usize, rows: usize },
}

impl Layout {
    pub fn capacity(&self) -> usize {
        match *self {
            Layout::Line(n) => n,
            Layout::Grid { cols, rows } => cols * rows,
        }
    }

    pub fn plane_dims(&self) -> usize {
        match self {
            Layout::Line(_) => 1,
            Layout::Grid { .. } => 2,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Line(n) => write!(f, "line:{n}"),
            Layout::Grid { cols, rows } => write!(f, "grid:{cols}x{rows}"),
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layout `{s}` (expected `line:N` or `grid:CxR`)"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "line" => Ok(Layout::Line(rest.parse().map_err(|_| bad())?)),
            "grid" => {
                let (c, r) = rest.split_once('x').ok_or_else(bad)?;
                Ok(Layout::Grid {
                    cols: c.parse().map_err(|_| bad())?,
                    rows: r.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for Layout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Position of one neuron: in-plane coordinates plus depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronCoord {
    pub plane: Vec<f64>,
    pub depth: f64,
}

pub fn layout_line(n: usize, layer_index: usize, a: f64, y_star: f64) -> Result<Vec<NeuronCoord>> {
    if n == 0 {
        return Err(Error::invalid("line layout needs at least one neuron"));
    }
    let depth = layer_index as f64 * y_star;
    Ok((0..n)
        .map(|j| NeuronCoord {
            plane: vec![a * j as f64 / n as f64],
            depth,
        })
        .collect())
}

pub fn layout_grid(
    cols: usize,
    rows: usize,
    layer_index: usize,
    a: f64,
    y_star: f64,
) -> Result<Vec<NeuronCoord>> {
    if cols == 0 || rows == 0 {
        return Err(Error::invalid("grid layout needs positive dimensions"));
    }
    let depth = layer_index as f64 * y_star;
    let mut out = Vec::with_capacity(cols * rows);
    for v in 0..rows {
        for u in 0..cols {
            out.push(NeuronCoord {
                plane: vec![a * u as f64 / cols as f64, a * v as f64 / rows as f64],
                depth,
            });
        }
    }
    Ok(out)
}

/// Length of a connection between neurons in adjacent layers.
pub fn distance(
    p: &NeuronCoord,
    q: &NeuronCoord,
    a: f64,
    y_star: f64,
    norm: Norm,
    scale: DistanceScale,
) -> Result<f64> {
    if p.plane.len() != q.plane.len() {
        return Err(Error::invalid(format!(
            "cannot measure between {}-D and {}-D neuron planes",
            p.plane.len(),
            q.plane.len()
        )));
    }
    let k = match scale {
        DistanceScale::Literal => a,
        DistanceScale::Unit => 1.0,
    };
    Ok(match norm {
        Norm::L1 => {
            let off: f64 = p.plane.iter().zip(&q.plane).map(|(x, y)| (x - y).abs()).sum();
            k * off + y_star
        }
        Norm::L2 => {
            let off: f64 = p.plane.iter().zip(&q.plane).map(|(x, y)| (x - y) * (x - y)).sum();
            (k * k * off + y_star * y_star).sqrt()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub a: f64,
    pub y_star: f64,
    pub norm: Norm,
    #[serde(default)]
    pub distance_scale: DistanceScale,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            a: 2.0,
            y_star: 0.1,
            norm: Norm::L1,
            distance_scale: DistanceScale::Literal,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return Err(Error::Config(format!("geometry.a must be >= 0, got {}", self.a)));
        }
        if !(self.y_star > 0.0) || !self.y_star.is_finite() {
            return Err(Error::Config(format!(
                "geometry.y_star must be > 0, got {}",
                self.y_star
            )));
        }
        Ok(())
    }
}

/// Coordinates for every neuron layer of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub config: GeometryConfig,
    pub layouts: Vec<Layout>,
    pub coords: Vec<Vec<NeuronCoord>>,
}

impl Geometry {
    /// `layers[i] = (layout, width, depth index)`.
    pub fn build(config: GeometryConfig, layers: &[(Layout, usize, usize)]) -> Result<Self> {
        config.validate()?;
        let dims = layers.first().map(|(l, _, _)| l.plane_dims());
        let mut coords = Vec::with_capacity(layers.len());
        for (i, &(layout, width, depth)) in layers.iter().enumerate() {
            if Some(layout.plane_dims()) != dims {
                return Err(Error::invalid(format!(
                    "layer {i}: all layouts in one geometry must share dimensionality"
                )));
            }
            if layout.capacity() < width {
                return Err(Error::invalid(format!(
                    "layer {i}: layout {layout} holds {} neurons but layer has {width}",
                    layout.capacity()
                )));
            }
            let mut c = match layout {
                Layout::Line(n) => layout_line(n, depth, config.a, config.y_star)?,
                Layout::Grid { cols, rows } => layout_grid(cols, rows, depth, config.a, config.y_star)?,
            };
            c.truncate(width);
            coords.push(c);
        }
        Ok(Geometry {
            config,
            layouts: layers.iter().map(|l| l.0).collect(),
            coords,
        })
    }

    pub fn a(&self) -> f64 {
        self.config.a
    }

    pub fn y_star(&self) -> f64 {
        self.config.y_star
    }

    pub fn layer_count(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, p: &NeuronCoord, q: &NeuronCoord) -> Result<f64> {
        distance(
            p,
            q,
            self.config.a,
            self.config.y_star,
            self.config.norm,
            self.config.distance_scale,
        )
    }

    /// Distances for a weight matrix whose row `r` starts at slot `r % n_in`
    /// of layer `from` and whose column `c` ends at slot `c` of layer `to`.
    pub fn distance_matrix(&self, from: usize, to: usize, rows: usize) -> Result<crate::autodiff::Tensor> {
        let (src, dst) = match (self.coords.get(from), self.coords.get(to)) {
            (Some(s), Some(d)) => (s, d),
            _ => {
                return Err(Error::invalid(format!(
                    "no geometry for layer pair ({from}, {to})"
                )))
            }
        };
        if src.is_empty() || rows % src.len() != 0 {
            return Err(Error::shape(
                "distance_matrix",
                format!("{rows} rows do not tile {} source neurons", src.len()),
            ));
        }
        let mut data = Vec::with_capacity(rows * dst.len());
        for r in 0..rows {
            let p = &src[r % src.len()];
            for q in dst {
                data.push(self.distance(p, q)?);
            }
        }
        crate::autodiff::Tensor::new(rows, dst.len(), data)
    }
}
