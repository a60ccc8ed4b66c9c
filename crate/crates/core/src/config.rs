//! Experiment configuration files and their task-dependent defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{DataConfig, SymbolicTask};
use crate::error::{Error, Result};
use crate::geometry::{DistanceScale, GeometryConfig, Layout, Norm};
use crate::loss::LambdaSchedule;
use crate::models::{EmbeddingSpec, MlpSpec, NetworkSpec, TransformerSpec};
use crate::render::RenderOptions;
use crate::swap::SwapConfig;

/// Name of the resolved configuration written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// How the prediction loss combines samples: the batch mean, or the mean
/// times the batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

/// Whole training split per step, or fixed-size minibatches drawn from
/// seeded epoch shuffles. Written as `"full"` or an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BatchRepr", into = "BatchRepr")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BatchRepr {
    Name(String),
    Size(usize),
}

impl TryFrom<BatchRepr> for BatchMode {
    type Error = String;

    fn try_from(r: BatchRepr) -> std::result::Result<Self, String> {
        match r {
            BatchRepr::Name(s) if s == "full" => Ok(BatchMode::Full),
            BatchRepr::Name(s) => Err(format!("batch must be \"full\" or a positive integer, got `{s}`")),
            BatchRepr::Size(0) => Err("batch size must be positive".into()),
            BatchRepr::Size(n) => Ok(BatchMode::Minibatch(n)),
        }
    }
}

impl From<BatchMode> for BatchRepr {
    fn from(b: BatchMode) -> Self {
        match b {
            BatchMode::Full => BatchRepr::Name("full".into()),
            BatchMode::Minibatch(n) => BatchRepr::Size(n),
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchMode::Full => write!(f, "full"),
            BatchMode::Minibatch(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub lambda: LambdaSchedule,
    pub batch: BatchMode,
    pub loss: LossKind,
    pub reduction: Reduction,
    pub metric: Metric,
    /// Steps between metrics rows; the final step is always logged.
    pub eval_interval: u64,
    /// Steps between intermediate checkpoints, 0 for the final one only.
    pub checkpoint_interval: u64,
    pub init_noise_std: f64,
    /// Render an SVG next to every checkpoint.
    pub svg: bool,
    /// Recheck the prediction loss around every swap round.
    pub verify_swaps: bool,
}

/// Fully resolved run description; every field is explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Parameter initialization and minibatch order.
    pub seed: u64,
    /// Dataset sampling and train/test split.
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: NetworkSpec,
    pub geometry: GeometryConfig,
    pub train: TrainSettings,
    pub swap: SwapConfig,
    pub render: RenderOptions,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub a: Option<f64>,
    pub y_star: Option<f64>,
    pub norm: Option<Norm>,
    pub distance_scale: Option<DistanceScale>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub lambda: Option<LambdaSchedule>,
    pub batch: Option<BatchMode>,
    pub loss: Option<LossKind>,
    pub reduction: Option<Reduction>,
    pub metric: Option<Metric>,
    pub eval_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub init_noise_std: Option<f64>,
    pub svg: Option<bool>,
    pub verify_swaps: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapSection {
    pub k: Option<usize>,
    pub every: Option<u64>,
    pub allow_input_swaps: Option<bool>,
    pub allow_output_swaps: Option<bool>,
}

/// A config file as written: only `[data]` is required, everything else
/// falls back to the published settings for the selected task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: Option<NetworkSpec>,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub swap: SwapSection,
    pub render: Option<RenderOptions>,
}

struct Preset {
    model: NetworkSpec,
    geometry: GeometryConfig,
    lambda: LambdaSchedule,
    batch: BatchMode,
    loss: LossKind,
    reduction: Reduction,
    metric: Metric,
    swap: SwapConfig,
}

fn phases(p: &[(f64, u64)]) -> LambdaSchedule {
    LambdaSchedule::new(p).expect("preset schedule")
}

fn geometry(y_star: f64) -> GeometryConfig {
    GeometryConfig {
        a: 2.0,
        y_star,
        norm: Norm::L1,
        distance_scale: DistanceScale::Unit,
    }
}

fn swaps(k: usize, allow_input_swaps: bool) -> SwapConfig {
    SwapConfig {
        k,
        every: 200,
        allow_input_swaps,
        allow_output_swaps: true,
    }
}

fn embedding_mlp(vocab: usize) -> NetworkSpec {
    NetworkSpec::Mlp(MlpSpec {
        widths: vec![64, 100, 100, vocab],
        layouts: None,
        embedding: Some(EmbeddingSpec {
            vocab,
            dim: 32,
            tokens: 2,
        }),
    })
}

/// 28x28 pixel grid, 10x10 hidden grids, a 10x1 row of outputs.
pub fn mnist_spec(hidden_layers: usize) -> NetworkSpec {
    let mut widths = vec![784];
    let mut layouts = vec![Layout::Grid { cols: 28, rows: 28 }];
    for _ in 0..hidden_layers {
        widths.push(100);
        layouts.push(Layout::Grid { cols: 10, rows: 10 });
    }
    widths.push(10);
    layouts.push(Layout::Grid { cols: 10, rows: 1 });
    NetworkSpec::Mlp(MlpSpec {
        widths,
        layouts: Some(layouts),
        embedding: None,
    })
}

pub fn symbolic_spec(task: SymbolicTask) -> NetworkSpec {
    let (d_in, d_out) = task.dims();
    let hidden = if task == SymbolicTask::C { 3 } else { 2 };
    let mut widths = vec![d_in];
    widths.extend(std::iter::repeat_n(20, hidden));
    widths.push(d_out);
    NetworkSpec::mlp(&widths)
}

fn preset(data: &DataConfig) -> Preset {
    let symbolic_lambda = || phases(&[(1e-3, 5000), (1e-2, 10000), (1e-3, 5000)]);
    let algorithmic_lambda = || phases(&[(0.1, 5000), (1.0, 10000), (0.1, 5000)]);
    let long_lambda = || phases(&[(1e-3, 10000), (1e-2, 10000), (0.1, 10000), (0.3, 10000)]);
    match data {
        DataConfig::Symbolic { formula, .. } => Preset {
            model: symbolic_spec(*formula),
            geometry: geometry(0.1),
            lambda: symbolic_lambda(),
            batch: BatchMode::Full,
            loss: LossKind::Mse,
            reduction: Reduction::Mean,
            metric: Metric::Mse,
            swap: swaps(6, true),
        },
        DataConfig::TwoMoons { .. } => Preset {
            model: NetworkSpec::mlp(&[2, 20, 20, 2]),
            geometry: geometry(0.1),
            lambda: symbolic_lambda(),
            batch: BatchMode::Full,
            loss: LossKind::CrossEntropy,
            reduction: Reduction::Mean,
            metric: Metric::Accuracy,
            swap: swaps(6, true),
        },
        DataConfig::ModAdd { p, .. } => Preset {
            model: embedding_mlp(*p),
            geometry: geometry(0.5),
            lambda: algorithmic_lambda(),
            batch: BatchMode::Full,
            loss: LossKind::CrossEntropy,
            reduction: Reduction::Sum,
            metric: Metric::Accuracy,
            swap: swaps(30, true),
        },
        DataConfig::S4 { .. } => Preset {
            model: embedding_mlp(24),
            geometry: geometry(0.5),
            lambda: algorithmic_lambda(),
            batch: BatchMode::Full,
            loss: LossKind::CrossEntropy,
            reduction: Reduction::Sum,
            metric: Metric::Accuracy,
            swap: swaps(30, true),
        },
        DataConfig::InContext { .. } => Preset {
            model: NetworkSpec::Transformer(TransformerSpec::default()),
            geometry: geometry(0.5),
            lambda: long_lambda(),
            batch: BatchMode::Minibatch(128),
            loss: LossKind::Mse,
            reduction: Reduction::Sum,
            metric: Metric::Mse,
            swap: swaps(30, true),
        },
        DataConfig::Mnist { .. } => Preset {
            model: mnist_spec(2),
            geometry: geometry(0.5),
            lambda: long_lambda(),
            batch: BatchMode::Minibatch(128),
            loss: LossKind::Mse,
            reduction: Reduction::Sum,
            metric: Metric::Accuracy,
            swap: swaps(30, false),
        },
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(self) -> Result<TrainConfig> {
        let p = preset(&self.data);
        let g = self.geometry;
        let t = self.train;
        let s = self.swap;
        let lambda = t.lambda.unwrap_or(p.lambda);
        let steps = lambda.total_steps();
        let config = TrainConfig {
            seed: self.seed.unwrap_or(0),
            data_seed: self.data_seed.unwrap_or(0),
            out_dir: self.out_dir,
            data: self.data,
            model: self.model.unwrap_or(p.model),
            geometry: GeometryConfig {
                a: g.a.unwrap_or(p.geometry.a),
                y_star: g.y_star.unwrap_or(p.geometry.y_star),
                norm: g.norm.unwrap_or(p.geometry.norm),
                distance_scale: g.distance_scale.unwrap_or(p.geometry.distance_scale),
            },
            train: TrainSettings {
                lr: t.lr.unwrap_or(1e-3),
                lambda,
                batch: t.batch.unwrap_or(p.batch),
                loss: t.loss.unwrap_or(p.loss),
                reduction: t.reduction.unwrap_or(p.reduction),
                metric: t.metric.unwrap_or(p.metric),
                eval_interval: t.eval_interval.unwrap_or(1000.min(steps.max(1))),
                checkpoint_interval: t.checkpoint_interval.unwrap_or(0),
                init_noise_std: t.init_noise_std.unwrap_or(0.0),
                svg: t.svg.unwrap_or(true),
                verify_swaps: t.verify_swaps.unwrap_or(false),
            },
            swap: SwapConfig {
                k: s.k.unwrap_or(p.swap.k),
                every: s.every.unwrap_or(p.swap.every),
                allow_input_swaps: s.allow_input_swaps.unwrap_or(p.swap.allow_input_swaps),
                allow_output_swaps: s.allow_output_swaps.unwrap_or(p.swap.allow_output_swaps),
            },
            render: self.render.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }
}

impl TrainConfig {
    /// Resolves a partial config text; a resolved config parses to itself.
    pub fn from_toml(text: &str) -> Result<Self> {
        ExperimentConfig::parse(text)?.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn steps(&self) -> u64 {
        self.train.lambda.total_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.geometry.validate()?;
        self.train.lambda.validate()?;
        self.swap.validate()?;
        self.render.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", t.lr)));
        }
        if t.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be >= 1".into()));
        }
        if !(t.init_noise_std >= 0.0) {
            return Err(Error::Config("train.init_noise_std must be >= 0".into()));
        }
        let classification = matches!(
            self.data,
            DataConfig::TwoMoons { .. } | DataConfig::ModAdd { .. } | DataConfig::S4 { .. } | DataConfig::Mnist { .. }
        );
        if !classification && (t.loss == LossKind::CrossEntropy || t.metric == Metric::Accuracy) {
            return Err(Error::Config(format!(
                "task {} has real-valued targets: use loss = \"mse\" and metric = \"mse\"",
                self.data.name()
            )));
        }
        self.check_shapes()
    }

    fn check_shapes(&self) -> Result<()> {
        let mismatch = |what: &str, want: usize, got: usize| {
            Err(Error::Config(format!(
                "{} needs {what} {want}, model has {got}",
                self.data.name()
            )))
        };
        match (&self.data, &self.model) {
            (DataConfig::Symbolic { formula, .. }, NetworkSpec::Mlp(m)) => {
                let (i, o) = formula.dims();
                if m.embedding.is_some() {
                    return Err(Error::Config("symbolic tasks take dense inputs, not an embedding".into()));
                }
                if m.widths[0] != i {
                    return mismatch("input width", i, m.widths[0]);
                }
                if m.widths[m.widths.len() - 1] != o {
                    return mismatch("output width", o, m.widths[m.widths.len() - 1]);
                }
            }
            (DataConfig::TwoMoons { .. }, NetworkSpec::Mlp(m)) => {
                if m.widths[0] != 2 || m.embedding.is_some() {
                    return mismatch("dense input width", 2, m.widths[0]);
                }
                if m.widths[m.widths.len() - 1] != 2 {
                    return mismatch("output width", 2, m.widths[m.widths.len() - 1]);
                }
            }
            (DataConfig::ModAdd { p, .. }, NetworkSpec::Mlp(m)) => check_tokens(m, *p, self)?,
            (DataConfig::S4 { .. }, NetworkSpec::Mlp(m)) => check_tokens(m, 24, self)?,
            (DataConfig::InContext { .. }, NetworkSpec::Transformer(_)) => {}
            (DataConfig::Mnist { .. }, NetworkSpec::Mlp(m)) => {
                if m.widths[0] != 784 || m.embedding.is_some() {
                    return mismatch("dense input width", 784, m.widths[0]);
                }
                if m.widths[m.widths.len() - 1] != 10 {
                    return mismatch("output width", 10, m.widths[m.widths.len() - 1]);
                }
            }
            (data, _) => {
                return Err(Error::Config(format!(
                    "model kind does not fit task {}",
                    data.name()
                )))
            }
        }
        Ok(())
    }
}

fn check_tokens(m: &MlpSpec, vocab: usize, c: &TrainConfig) -> Result<()> {
    match m.embedding {
        Some(e) if e.vocab == vocab && e.tokens == 2 && m.widths[m.widths.len() - 1] == vocab => Ok(()),
        _ => Err(Error::Config(format!(
            "{} needs a 2-token embedding over {vocab} symbols and {vocab} outputs",
            c.data.name()
        ))),
    }
}
