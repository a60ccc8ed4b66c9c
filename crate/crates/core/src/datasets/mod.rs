//! Seeded generators and loaders for every task.

mod algorithmic;
mod generators;
pub mod mnist;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use algorithmic::{compose, gen_modadd, gen_s4, parity, s4_elements};
pub use generators::{gen_incontext, gen_symbolic, gen_two_moons, symbolic_targets, SymbolicTask};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelInput;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Dense(Tensor),
    Tokens { ids: Vec<usize>, per_sample: usize },
    /// Raw bytes scaled by `1 / 255` when batched.
    Pixels { data: Vec<u8>, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Dense(Tensor),
    Classes { labels: Vec<usize>, n_classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Dense(Tensor),
    Classes { labels: Vec<usize>, n_classes: usize },
}

impl BatchTargets {
    pub fn len(&self) -> usize {
        match self {
            BatchTargets::Dense(t) => t.rows(),
            BatchTargets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Inputs,
    pub targets: Targets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Dense(t) => t.rows(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { n_classes, .. } => Some(n_classes),
            Targets::Dense(_) => None,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (ModelInput, BatchTargets) {
        let input = match &self.inputs {
            Inputs::Dense(x) => ModelInput::Dense(x.select_rows(idx)),
            Inputs::Tokens { ids, per_sample } => ModelInput::Tokens {
                ids: idx
                    .iter()
                    .flat_map(|&i| ids[i * per_sample..(i + 1) * per_sample].iter().copied())
                    .collect(),
                per_sample: *per_sample,
            },
            Inputs::Pixels { data, width } => {
                let mut out = Vec::with_capacity(idx.len() * width);
                for &i in idx {
                    out.extend(data[i * width..(i + 1) * width].iter().map(|&b| b as f64 / 255.0));
                }
                ModelInput::Dense(Tensor::new(idx.len(), *width, out).expect("pixel batch shape"))
            }
        };
        (input, self.targets_for(idx))
    }

    pub fn targets_for(&self, idx: &[usize]) -> BatchTargets {
        match &self.targets {
            Targets::Dense(y) => BatchTargets::Dense(y.select_rows(idx)),
            Targets::Classes { labels, n_classes } => BatchTargets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }

    pub fn split_batch(&self, split: Split) -> (ModelInput, BatchTargets) {
        self.batch(self.indices(split))
    }
}

/// Shuffles `0..n` and takes the first `floor(train_frac * n)` for training.
pub fn random_split(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::invalid(format!("train_frac {train_frac} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_frac * n as f64).floor() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

fn default_train_frac() -> f64 {
    0.8
}

/// Task selection as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Symbolic {
        formula: SymbolicTask,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    TwoMoons {
        #[serde(default = "default_moons")]
        n: usize,
        #[serde(default = "default_moon_noise")]
        noise_std: f64,
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
    ModAdd {
        #[serde(default = "default_p")]
        p: usize,
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
    S4 {
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
    InContext {
        #[serde(default = "default_incontext_n")]
        n_samples: usize,
        w_range: [f64; 2],
        #[serde(default = "unit_range")]
        x1_range: [f64; 2],
        #[serde(default = "unit_range")]
        x_range: [f64; 2],
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
    Mnist {
        dir: PathBuf,
    },
}

fn default_n_train() -> usize {
    3000
}
fn default_n_test() -> usize {
    1000
}
fn default_moons() -> usize {
    1000
}
fn default_moon_noise() -> f64 {
    0.1
}
fn default_p() -> usize {
    59
}
fn default_incontext_n() -> usize {
    10000
}
fn unit_range() -> [f64; 2] {
    [-1.0, 1.0]
}

impl DataConfig {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataConfig::Symbolic {
                formula,
                n_train,
                n_test,
            } => gen_symbolic(*formula, *n_train, *n_test, seed),
            DataConfig::TwoMoons {
                n,
                noise_std,
                train_frac,
            } => gen_two_moons(*n, *noise_std, *train_frac, seed),
            DataConfig::ModAdd { p, train_frac } => gen_modadd(*p, *train_frac, seed),
            DataConfig::S4 { train_frac } => gen_s4(*train_frac, seed),
            DataConfig::InContext {
                n_samples,
                w_range,
                x1_range,
                x_range,
                train_frac,
            } => gen_incontext(*n_samples, *w_range, *x1_range, *x_range, *train_frac, seed),
            DataConfig::Mnist { dir } => mnist::load_mnist_dir(dir),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataConfig::Symbolic { .. } => "symbolic",
            DataConfig::TwoMoons { .. } => "two_moons",
            DataConfig::ModAdd { .. } => "mod_add",
            DataConfig::S4 { .. } => "s4",
            DataConfig::InContext { .. } => "in_context",
            DataConfig::Mnist { .. } => "mnist",
        }
    }
}
