//! Training runs: objective, optimizer, swap cadence, logging and sweeps.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::config::{BatchMode, LossKind, Metric, Reduction, TrainConfig, RESOLVED_CONFIG};
use crate::datasets::{BatchTargets, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{bias_cost, connection_cost, regularization, LossBreakdown};
use crate::models::{Model, ModelInput};
use crate::render::model_svg;
use crate::swap::{swap_step, SwapEvent};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub pred_loss: f64,
    pub weight_cost: f64,
    pub bias_cost: f64,
    pub lambda: f64,
    pub total: f64,
    /// Test-split metric of the configured kind.
    pub metric_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub step: u64,
    pub layer: String,
    pub j: usize,
    pub k: usize,
    pub delta_cost: f64,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: Option<PathBuf>,
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<EventRow>,
    pub checkpoints: Vec<PathBuf>,
    pub model: Model,
    pub train_metric: f64,
    pub test_metric: f64,
}

/// Factor on the batch-mean prediction loss: 1, or the training-set size so
/// that the term estimates the total over the training split.
pub fn pred_scale(reduction: Reduction, n_train: usize) -> f64 {
    match reduction {
        Reduction::Mean => 1.0,
        Reduction::Sum => n_train as f64,
    }
}

/// Prediction loss of `output` against a batch's targets.
fn pred_loss(tape: &Tape, output: crate::autodiff::Var, targets: &BatchTargets, loss: LossKind) -> Result<crate::autodiff::Var> {
    match (loss, targets) {
        (LossKind::Mse, BatchTargets::Dense(y)) => tape.mse(output, Rc::new(y.clone())),
        (LossKind::Mse, BatchTargets::Classes { labels, n_classes }) => {
            tape.mse(output, Rc::new(one_hot(labels, *n_classes)))
        }
        (LossKind::CrossEntropy, BatchTargets::Classes { labels, .. }) => tape.cross_entropy(output, labels),
        (LossKind::CrossEntropy, BatchTargets::Dense(_)) => {
            Err(Error::Config("cross entropy needs class labels".into()))
        }
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), n_classes);
    for (r, &l) in labels.iter().enumerate() {
        t.set(r, l, 1.0);
    }
    t
}

/// Fraction of rows whose largest output is the label; ties go to the first.
pub fn accuracy(outputs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(outputs.row(r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean squared error over all entries, against one-hot rows for labels.
pub fn mse(outputs: &Tensor, targets: &BatchTargets) -> f64 {
    let owned;
    let y = match targets {
        BatchTargets::Dense(y) => y,
        BatchTargets::Classes { labels, n_classes } => {
            owned = one_hot(labels, *n_classes);
            &owned
        }
    };
    if y.is_empty() {
        return 0.0;
    }
    outputs
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

pub fn metric_of(outputs: &Tensor, targets: &BatchTargets, metric: Metric) -> Result<f64> {
    match (metric, targets) {
        (Metric::Mse, t) => Ok(mse(outputs, t)),
        (Metric::Accuracy, BatchTargets::Classes { labels, .. }) => Ok(accuracy(outputs, labels)),
        (Metric::Accuracy, BatchTargets::Dense(_)) => Err(Error::Config("accuracy needs class labels".into())),
    }
}

const EVAL_CHUNK: usize = 4096;

/// Outputs for `idx` in chunks, keeping tapes small on large splits.
pub fn predict_indices(model: &Model, data: &Dataset, idx: &[usize]) -> Result<(Tensor, BatchTargets)> {
    let mut outs = Vec::new();
    let mut rows = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let y = model.predict(&x)?;
        rows += y.rows();
        outs.push(y);
    }
    let cols = outs.first().map_or(model.spec.output_width(), |t| t.cols());
    let mut flat = Vec::with_capacity(rows * cols);
    for o in outs {
        flat.extend(o.into_data());
    }
    let targets = data.targets_for(idx);
    Ok((Tensor::new(rows, cols, flat)?, targets))
}

pub fn evaluate(model: &Model, data: &Dataset, split: Split, metric: Metric) -> Result<f64> {
    let (out, targets) = predict_indices(model, data, data.indices(split))?;
    metric_of(&out, &targets, metric)
}

/// Prediction loss of the configured kind over a whole split.
pub fn split_loss(model: &Model, data: &Dataset, split: Split, loss: LossKind) -> Result<f64> {
    let (out, targets) = predict_indices(model, data, data.indices(split))?;
    match (loss, &targets) {
        (LossKind::Mse, t) => Ok(mse(&out, t)),
        (LossKind::CrossEntropy, BatchTargets::Classes { labels, .. }) => {
            let tape = Tape::new();
            let v = tape.constant(out);
            tape.scalar(tape.cross_entropy(v, labels)?)
        }
        _ => Err(Error::Config("cross entropy needs class labels".into())),
    }
}

/// Seeded epoch shuffles over the training split.
struct Batcher {
    mode: BatchMode,
    train: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(mode: BatchMode, train: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Batcher {
            mode,
            train: train.to_vec(),
            order: Vec::new(),
            pos: usize::MAX,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        match self.mode {
            BatchMode::Full => self.train.clone(),
            BatchMode::Minibatch(b) => {
                let b = b.min(self.train.len());
                let mut out = Vec::with_capacity(b);
                while out.len() < b {
                    if self.pos >= self.order.len() {
                        self.order = self.train.clone();
                        self.order.shuffle(&mut self.rng);
                        self.pos = 0;
                    }
                    let take = (b - out.len()).min(self.order.len() - self.pos);
                    out.extend_from_slice(&self.order[self.pos..self.pos + take]);
                    self.pos += take;
                }
                out
            }
        }
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: csv::Writer<std::fs::File>,
    events: csv::Writer<std::fs::File>,
}

impl Outputs {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join(RESOLVED_CONFIG);
        std::fs::write(&cfg, config.to_toml()?).map_err(|e| Error::io(&cfg, e))?;
        let open = |name: &str| -> Result<csv::Writer<std::fs::File>> {
            let p = dir.join(name);
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
        };
        let mut metrics = open(METRICS_FILE)?;
        let mut events = open(EVENTS_FILE)?;
        metrics.write_record(["step", "pred_loss", "weight_cost", "bias_cost", "lambda", "total", "metric_value"])?;
        events.write_record(["step", "layer", "j", "k", "delta_cost"])?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics,
            events,
        })
    }

    fn checkpoint(&self, model: &Model, step: u64, tag: &str, svg: Option<&crate::render::RenderOptions>) -> Result<PathBuf> {
        let path = self.dir.join(format!("ckpt_{tag}.json"));
        model.checkpoint(step).save(&path)?;
        if let Some(opts) = svg {
            let p = self.dir.join(format!("ckpt_{tag}.svg"));
            std::fs::write(&p, model_svg(model, opts)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(path)
    }

    fn flush(&mut self) -> Result<()> {
        let dir = self.dir.clone();
        self.metrics.flush().map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        self.events.flush().map_err(|e| Error::io(dir.join(EVENTS_FILE), e))
    }
}

fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(Tensor::is_finite)
}

/// Builds the dataset and trains; artifacts go to `config.out_dir` when set.
pub fn train(config: &TrainConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let data = config.data.build(config.data_seed)?;
    train_on(config, &data)
}

/// Trains on an already built dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<RunArtifacts> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut model = Model::init(
        config.model.clone(),
        config.geometry,
        config.seed,
        config.train.init_noise_std,
    )?;
    let t = &config.train;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut out = match &config.out_dir {
        Some(dir) => Some(Outputs::create(dir, config)?),
        None => None,
    };
    let svg = t.svg.then_some(&config.render);
    let steps = config.steps();
    let mut batcher = Batcher::new(t.batch, &data.train, config.seed);
    let full = match t.batch {
        BatchMode::Full => Some(data.batch(&data.train)),
        BatchMode::Minibatch(_) => None,
    };
    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut checkpoints = Vec::new();
    let scale = pred_scale(t.reduction, data.train.len());
    let tape = Tape::new();
    for step in 1..=steps {
        let lambda = t.lambda.lambda_at(step - 1)?;
        let owned;
        let (input, targets) = match &full {
            Some(b) => (&b.0, &b.1),
            None => {
                owned = data.batch(&batcher.next());
                (&owned.0, &owned.1)
            }
        };
        tape.reset();
        let vars = model.leaves(&tape, true);
        let f = model.forward(&tape, &vars, input)?;
        let pred = pred_loss(&tape, f.output, targets, t.loss)?;
        let pred = match scale {
            1.0 => pred,
            s => tape.scale(pred, s),
        };
        let (wc, bc) = regularization(&model, &tape, &vars)?;
        let reg = tape.add(wc, bc)?;
        let total = tape.add(pred, tape.scale(reg, lambda))?;
        let breakdown = LossBreakdown::new(tape.scalar(pred)?, lambda, tape.scalar(wc)?, tape.scalar(bc)?);
        let mut grads = tape.backward(total)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&model.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect();
        if !breakdown.total.is_finite() || !grads_finite(&grads) {
            let mut msg = format!(
                "step {step}: loss {} (pred {}, weight {}, bias {})",
                breakdown.total, breakdown.pred_loss, breakdown.weight_cost, breakdown.bias_cost
            );
            if let Some(o) = &mut out {
                o.flush()?;
                let p = o.checkpoint(&model, step - 1, &format!("nan_{step}"), None)?;
                msg.push_str(&format!("; parameters saved to {}", p.display()));
            }
            return Err(Error::NonFinite(msg));
        }
        adam.step(&mut model.params, &grads)?;
        if step % config.swap.every == 0 {
            let before = match t.verify_swaps {
                true => Some(batch_pred_loss(&model, input, targets, t.loss)?),
                false => None,
            };
            let round = swap_step(&mut model, &config.swap, Some(&mut adam))?;
            if let Some(b) = before {
                let a = batch_pred_loss(&model, input, targets, t.loss)?;
                if (a - b).abs() >= 1e-10 {
                    return Err(Error::invalid(format!(
                        "step {step}: swaps changed the prediction loss from {b} to {a}"
                    )));
                }
            }
            for SwapEvent { group, j, k, delta_cost } in round {
                let row = EventRow {
                    step,
                    layer: group,
                    j,
                    k,
                    delta_cost,
                };
                if let Some(o) = &mut out {
                    o.events.serialize(&row)?;
                }
                events.push(row);
            }
        }
        if step % t.eval_interval == 0 || step == steps {
            let row = MetricsRow {
                step,
                pred_loss: breakdown.pred_loss,
                weight_cost: breakdown.weight_cost,
                bias_cost: breakdown.bias_cost,
                lambda,
                total: breakdown.total,
                metric_value: evaluate(&model, data, Split::Test, t.metric)?,
            };
            log::info!(
                "step {step}/{steps}: pred {:.4e} weight {:.4e} lambda {lambda} metric {:.6}",
                row.pred_loss,
                row.weight_cost,
                row.metric_value
            );
            if let Some(o) = &mut out {
                o.metrics.serialize(&row)?;
            }
            metrics.push(row);
        }
        if t.checkpoint_interval > 0 && step % t.checkpoint_interval == 0 {
            if let Some(o) = &mut out {
                o.flush()?;
                checkpoints.push(o.checkpoint(&model, step, &step.to_string(), svg)?);
            }
        }
    }
    if let Some(o) = &mut out {
        o.flush()?;
        checkpoints.push(o.checkpoint(&model, steps, "final", svg)?);
    }
    let train_metric = evaluate(&model, data, Split::Train, t.metric)?;
    let test_metric = evaluate(&model, data, Split::Test, t.metric)?;
    Ok(RunArtifacts {
        dir: config.out_dir.clone(),
        metrics,
        events,
        checkpoints,
        model,
        train_metric,
        test_metric,
    })
}

fn batch_pred_loss(model: &Model, input: &ModelInput, targets: &BatchTargets, loss: LossKind) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.leaves(&tape, false);
    let f = model.forward(&tape, &vars, input)?;
    tape.scalar(pred_loss(&tape, f.output, targets, loss)?)
}

/// Current value of every objective term for a model on a split.
pub fn objective(model: &Model, data: &Dataset, split: Split, loss: LossKind, lambda: f64) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(
        split_loss(model, data, split, loss)?,
        lambda,
        connection_cost(model),
        bias_cost(model),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub noise_std: f64,
    pub status: String,
    pub pred_loss: f64,
    pub weight_cost: f64,
    pub train_metric: f64,
    pub test_metric: f64,
    pub dir: String,
}

pub const SWEEP_SUMMARY: &str = "summary.csv";

/// Cross product of seeds and init-noise levels; failed runs are recorded
/// in the summary and the sweep continues.
pub fn sweep(config: &TrainConfig, seeds: &[u64], noise_stds: &[f64]) -> Result<Vec<(SweepRow, Result<RunArtifacts>)>> {
    if seeds.is_empty() || noise_stds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed and one noise level"));
    }
    config.validate()?;
    let data = config.data.build(config.data_seed)?;
    let mut results = Vec::new();
    for &seed in seeds {
        for &noise in noise_stds {
            let mut c = config.clone();
            c.seed = seed;
            c.train.init_noise_std = noise;
            c.out_dir = config
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("seed_{seed}_noise_{noise}")));
            let run = train_on(&c, &data);
            let dir = c.out_dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default();
            let row = match &run {
                Ok(a) => {
                    let last = a.metrics.last();
                    SweepRow {
                        seed,
                        noise_std: noise,
                        status: "ok".into(),
                        pred_loss: last.map_or(f64::NAN, |m| m.pred_loss),
                        weight_cost: last.map_or(f64::NAN, |m| m.weight_cost),
                        train_metric: a.train_metric,
                        test_metric: a.test_metric,
                        dir,
                    }
                }
                Err(e) => {
                    log::error!("sweep run seed {seed} noise {noise} failed: {e}");
                    SweepRow {
                        seed,
                        noise_std: noise,
                        status: format!("error: {e}"),
                        pred_loss: f64::NAN,
                        weight_cost: f64::NAN,
                        train_metric: f64::NAN,
                        test_metric: f64::NAN,
                        dir,
                    }
                }
            };
            results.push((row, run));
        }
    }
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SWEEP_SUMMARY);
        let mut w = csv::Writer::from_path(&p)?;
        for (row, _) in &results {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(results)
}
