//! `bimt`: train spatially embedded networks and analyse the results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bimt::analysis::{
    self, active_embedding_neurons, best_correlated, correlation_probe, count_above, embedding_matrix,
    export_expression, knockout_table, linearity_test, normalized_embedding, prune_frontier, representation_matrix,
    representation_metrics, s4_true_representation, tetrahedron, top_features, weight_sign_ranks, ExportOptions,
    Formula, LinearityConfig, Module, SignRanks,
};
use bimt::config::{TrainConfig, RESOLVED_CONFIG};
use bimt::geometry::Layout;
use bimt::models::{Checkpoint, Model, NeuronId};
use bimt::render::{build_graph, render_heatmap, render_svg, GraphLabels};
use bimt::trainer::{sweep, train, SWEEP_SUMMARY};

#[derive(Parser)]
#[command(name = "bimt", version, about = "Brain-inspired modular training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `out_dir` or `runs/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train over a grid of seeds and init-noise levels.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        noise: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw the connectivity graph of a checkpoint as SVG.
    Render {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the graph as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Test loss against the number of parameters surviving a magnitude cut.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Ascending thresholds; defaults to 0 and 40 log-spaced values in [1e-4, 10].
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test metric with neuron modules knocked out.
    Knockout {
        #[command(flatten)]
        run: RunArgs,
        /// `NAME=group:slot,group:slot,...`; repeat per module.
        #[arg(long = "module")]
        modules: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized embedding heatmap and active-neuron count.
    Embeddings {
        #[command(flatten)]
        run: RunArgs,
        /// Score fraction of the maximum above which a neuron is active.
        #[arg(long, default_value_t = 0.05)]
        frac: f64,
    },
    /// Effective dimension of a tetrahedron representation or of a learned
    /// S4 embedding, plus the linearity test for the latter.
    RepAnalysis {
        /// Vertex set A, B or C.
        #[arg(long)]
        tetrahedron: Option<String>,
        /// Run directory of a trained S4 model.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// Vertex set used as the reference representation.
        #[arg(long, default_value = "C")]
        reference: String,
        #[arg(long, default_value_t = 0.05)]
        frac: f64,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Correlation between a hidden neuron and an input expression.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Neuron layer, e.g. `L3`.
        #[arg(long)]
        layer: String,
        /// Spatial slot; the best-correlated neuron when omitted.
        #[arg(long)]
        slot: Option<usize>,
        /// Expression in `x1..xn`.
        #[arg(long)]
        expr: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First-layer feature maps ranked by score and weight-sign statistics.
    Features {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Input grid as `WIDTHxHEIGHT`; read from the input layout when omitted.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 0.1)]
        frac: f64,
    },
    /// Closed-form expression of a small pruned MLP.
    ExportExpr {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [-1.0, 1.0])]
        domain: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding the resolved config and checkpoints.
    #[arg(long, default_value = ".")]
    run: PathBuf,
    /// Checkpoint file, or a step name such as `final` or `2000` inside the run.
    #[arg(long, default_value = "final")]
    checkpoint: String,
    /// Config to use instead of the run's resolved config.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn checkpoint_path(&self) -> PathBuf {
        checkpoint_path(&self.run, &self.checkpoint)
    }

    fn model(&self) -> Result<Model> {
        load_model(&self.checkpoint_path())
    }

    fn config(&self) -> Result<TrainConfig> {
        let p = self.config.clone().unwrap_or_else(|| self.run.join(RESOLVED_CONFIG));
        Ok(TrainConfig::load(&p)?)
    }

    fn output(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.run.join(name))
    }
}

fn checkpoint_path(run: &Path, name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        direct
    } else {
        run.join(format!("ckpt_{name}.json"))
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.into_model()?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_run_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(stem)
}

fn parse_module(spec: &str) -> Result<Module> {
    let (name, ids) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("module `{spec}` is not NAME=group:slot,..."))?;
    let neurons = ids
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<NeuronId>())
        .collect::<bimt::Result<Vec<_>>>()?;
    Ok(Module {
        name: name.trim().to_string(),
        neurons,
    })
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once('x').ok_or_else(|| anyhow!("grid `{s}` is not WIDTHxHEIGHT"))?;
    Ok((w.parse()?, h.parse()?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut c = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            c.out_dir = Some(out.or(c.out_dir.clone()).unwrap_or_else(|| default_run_dir(&config)));
            let r = train(&c)?;
            println!(
                "run {}: train metric {:.6}, test metric {:.6}, {} swaps",
                c.out_dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
                r.train_metric,
                r.test_metric,
                r.events.len()
            );
        }
        Command::Sweep { config, seeds, noise, out } => {
            let mut c = TrainConfig::load(&config)?;
            let dir = out.or(c.out_dir.clone()).unwrap_or_else(|| default_run_dir(&config));
            c.out_dir = Some(dir.clone());
            let runs = sweep(&c, &seeds, &noise)?;
            for (row, _) in &runs {
                println!(
                    "seed {} noise {}: {} test metric {:.6}",
                    row.seed, row.noise_std, row.status, row.test_metric
                );
            }
            println!("summary in {}", dir.join(SWEEP_SUMMARY).display());
            let failed = runs.iter().filter(|r| r.1.is_err()).count();
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed", runs.len());
            }
        }
        Command::Render { run, out, json } => {
            let model = run.model()?;
            let opts = run.config().map(|c| c.render).unwrap_or_default();
            let graph = build_graph(&model, &GraphLabels::default())?;
            let stem = run.checkpoint_path().file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let stem = stem.strip_prefix("ckpt_").unwrap_or(&stem);
            let path = run.output(&out, &format!("graph_{stem}.svg"));
            write(&path, &render_svg(&graph, &opts))?;
            if let Some(j) = json {
                write(&j, &graph.to_json()?)?;
            }
            println!("wrote {}", path.display());
        }
        Command::Prune { run, thresholds, out } => {
            let model = run.model()?;
            let c = run.config()?;
            let data = c.data.build(c.data_seed)?;
            let thresholds = if thresholds.is_empty() {
                std::iter::once(0.0).chain((0..40).map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / 39.0))).collect()
            } else {
                thresholds
            };
            let f = prune_frontier(&model, &data, &thresholds, c.train.loss)?;
            let path = run.output(&out, "prune_frontier.csv");
            f.write_csv(&path)?;
            for p in &f.points {
                println!("{:>12.4e} {:>8} {:>12.4e}", p.threshold, p.unpruned, p.test_loss);
            }
        }
        Command::Knockout { run, modules, out } => {
            let model = run.model()?;
            let c = run.config()?;
            let data = c.data.build(c.data_seed)?;
            let modules = modules.iter().map(|m| parse_module(m)).collect::<Result<Vec<_>>>()?;
            let rows = knockout_table(&model, &data, &modules, c.train.metric)?;
            let path = run.output(&out, "knockout.csv");
            analysis::write_csv(&path, &["knocked", "neurons", "metric"], &rows)?;
            for r in &rows {
                println!("{:<24} {:>5} {:.4}", r.knocked, r.neurons, r.metric);
            }
        }
        Command::Embeddings { run, frac } => {
            let model = run.model()?;
            let e = embedding_matrix(&model)?;
            let n = normalized_embedding(&e);
            let rows: Vec<String> = (0..e.rows()).map(|s| format!("L0:{s}")).collect();
            let cols: Vec<String> = (0..e.cols()).map(|t| t.to_string()).collect();
            let heat = render_heatmap(&n.values, &rows, &cols, 12.0);
            write(&run.run.join("embedding.svg"), &heat.svg)?;
            let table: Vec<Vec<f64>> = n.values.to_nested();
            write(&run.run.join("embedding.json"), &serde_json::to_string(&table)?)?;
            println!(
                "{} active embedding neurons (score > {frac} of max), {} all-zero",
                active_embedding_neurons(&model, frac)?,
                n.inactive.iter().filter(|&&f| f).count()
            );
        }
        Command::RepAnalysis {
            tetrahedron: name,
            run,
            checkpoint,
            reference,
            frac,
            restarts,
            seed,
        } => {
            if name.is_none() && run.is_none() {
                bail!("give --tetrahedron and/or --run");
            }
            if let Some(name) = name {
                let rep = s4_true_representation(&tetrahedron(&name)?)?;
                let m = representation_metrics(&representation_matrix(&rep.matrices)?)?;
                println!("tetrahedron {name}: S = {:.4} bits, D = {:.3}", m.entropy_bits, m.effective_dim);
            }
            if let Some(dir) = run {
                let model = load_model(&checkpoint_path(&dir, &checkpoint))?;
                let e = embedding_matrix(&model)?;
                if e.cols() != 24 {
                    bail!("embedding has {} tokens; the S4 analysis needs 24", e.cols());
                }
                let scores = bimt::swap::neuron_scores(&model, 0);
                let max = scores.iter().copied().fold(0.0, f64::max);
                let keep: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > frac * max).collect();
                let active = e.select_rows(&keep);
                let m = representation_metrics(&active)?;
                let truth = s4_true_representation(&tetrahedron(&reference)?)?;
                let cfg = LinearityConfig {
                    restarts,
                    seed,
                    ..LinearityConfig::default()
                };
                let lin = linearity_test(&active, &truth.matrices, &cfg)?;
                let report = format!(
                    "active neurons: {}\nentropy_bits: {:.6}\neffective_dim: {:.4}\nlinearity_loss: {:.6}\nreference: {reference}\n",
                    keep.len(),
                    m.entropy_bits,
                    m.effective_dim,
                    lin.best_loss
                );
                write(&dir.join("rep_analysis.txt"), &report)?;
                print!("{report}");
            }
        }
        Command::Probe {
            run,
            layer,
            slot,
            expr,
            out,
        } => {
            let model = run.model()?;
            let c = run.config()?;
            let data = c.data.build(c.data_seed)?;
            let f = Formula::parse(&expr)?;
            let p = match slot {
                Some(s) => correlation_probe(&model, &data, &layer, s, &f)?,
                None => best_correlated(&model, &data, &layer, &f)?,
            };
            let path = run.output(&out, "probe.csv");
            p.write_csv(&path)?;
            match p.correlation {
                Some(r) => println!("{}:{} r = {r:.6}", p.layer, p.slot),
                None => println!("{}:{} correlation undefined (constant activation)", p.layer, p.slot),
            }
        }
        Command::Features { run, count, grid, frac } => {
            let model = run.model()?;
            let w1 = model.param("W1").ok_or_else(|| anyhow!("model has no first weight layer W1"))?;
            let (w, h) = match grid {
                Some(g) => parse_grid(&g)?,
                None => match model.topology.layers[0].layout {
                    Layout::Grid { cols, rows } => (cols, rows),
                    Layout::Line(n) => (n, 1),
                },
            };
            let all = top_features(w1, w, h, w1.cols())?;
            let scores: Vec<f64> = all.iter().map(|f| f.score).collect();
            let dir = run.run.join("features");
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (rank, f) in all.iter().take(count).enumerate() {
                let max = f.map.max_abs();
                let norm = if max > 0.0 { f.map.map(|v| v / max) } else { f.map.clone() };
                let svg = render_heatmap(&norm, &[], &[], 6.0).svg;
                write(&dir.join(format!("rank{:02}_neuron{}.svg", rank + 1, f.neuron)), &svg)?;
            }
            #[derive(serde::Serialize)]
            struct Row {
                rank: usize,
                neuron: usize,
                score: f64,
            }
            let rows: Vec<Row> = all
                .iter()
                .enumerate()
                .map(|(i, f)| Row {
                    rank: i + 1,
                    neuron: f.neuron,
                    score: f.score,
                })
                .collect();
            analysis::write_csv(&dir.join("scores.csv"), &["rank", "neuron", "score"], &rows)?;
            let ranks = weight_sign_ranks(&model);
            SignRanks::write_csv(&ranks, &run.run.join("sign_ranks.csv"))?;
            for r in &ranks {
                println!(
                    "{}: {} positive, {} negative, {} zero",
                    r.tensor,
                    r.positive.len(),
                    r.negative.len(),
                    r.zeros
                );
            }
            println!("{} features with score > {frac} of max", count_above(&scores, frac));
        }
        Command::ExportExpr {
            run,
            threshold,
            domain,
            out,
        } => {
            let model = run.model()?;
            let [lo, hi] = domain[..] else {
                bail!("--domain takes two values, lo,hi");
            };
            let opts = ExportOptions {
                prune_threshold: threshold,
                domain: (lo, hi),
                ..ExportOptions::default()
            };
            let e = export_expression(&model, &opts)?;
            let text: String = e
                .outputs
                .iter()
                .enumerate()
                .map(|(i, s)| format!("y{} = {s}\n", i + 1))
                .collect();
            write(&run.output(&out, "expression.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
