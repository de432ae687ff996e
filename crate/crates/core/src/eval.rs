//! Natural training of fresh classifiers on a dataset, followed by attacks on
//! clean test data, over grids of architectures, seeds and budgets.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attacks::{robust_accuracy_grid, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::read_dataset;
use crate::learn::{adversarially_train_reference, baseline_adv_dataset};
use crate::models::{accuracy, sgd_train, Architecture, Model, TrainConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::theory::{sample, DistributionSpec};

/// Hidden-layer widths; empty means a linear model. Input and output widths
/// come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
}

impl ArchSpec {
    pub fn linear() -> Self {
        Self { hidden: Vec::new() }
    }

    pub fn mlp(hidden: &[usize]) -> Self {
        Self { hidden: hidden.to_vec() }
    }

    pub fn resolve(&self, input: usize, classes: usize) -> Architecture {
        if self.hidden.is_empty() {
            Architecture::Linear { input }
        } else {
            Architecture::mlp(input, &self.hidden, classes.max(2))
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetSource {
    File(PathBuf),
    InMemory(Dataset),
    Generated {
        distribution: DistributionSpec,
        n: usize,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::File(p) => read_dataset(p),
            DatasetSource::InMemory(d) => Ok(d.clone()),
            DatasetSource::Generated { distribution, n, seed } => {
                sample(distribution, *n, &mut RngStream::new(*seed))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub dataset: DatasetSource,
    pub architectures: Vec<ArchSpec>,
    pub seeds: Vec<u64>,
    pub budgets: Vec<f64>,
    /// Threat model; its budget is replaced by each grid budget.
    pub attack: AttackConfig,
    pub train: TrainConfig,
    /// Clean-distribution test data, never the training set's own rows.
    pub test: DatasetSource,
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.seeds.is_empty() || self.budgets.is_empty() {
            return Err(Error::param("plan needs at least one architecture, seed and budget"));
        }
        self.train.validate()?;
        for &b in &self.budgets {
            self.attack.with_budget(b).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arch: String,
    pub seed: u64,
    pub budget: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    /// Wall time of training plus evaluation for this (arch, seed) pair.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cells: Vec<Cell>,
    pub provenance: Value,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arch,seed,budget,natural_acc,robust_acc,seconds\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.arch, c.seed, c.budget, c.natural_acc, c.robust_acc, c.seconds
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// SHA-256 over everything except wall times, as hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cells {
            h.update(format!("{}|{}|{}|{}|{}\n", c.arch, c.seed, c.budget, c.natural_acc, c.robust_acc));
        }
        h.update(self.provenance.to_string());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cells_for(&self, arch: &str) -> impl Iterator<Item = &Cell> {
        let arch = arch.to_string();
        self.cells.iter().filter(move |c| c.arch == arch)
    }

    /// Mean robust accuracy over seeds at `budget`, across all architectures.
    pub fn mean_robust(&self, budget: f64) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.budget == budget)
            .map(|c| c.robust_acc)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn insert_provenance(&mut self, key: &str, value: Value) {
        if let Some(obj) = self.provenance.as_object_mut() {
            obj.insert(key.to_string(), value);
        }
    }
}

/// Trains one fresh model per (architecture, seed) and evaluates it on `test`
/// at each budget. Model `θ₀` and batch order both come from the seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_grid(
    dataset: &Dataset,
    test: &Dataset,
    architectures: &[ArchSpec],
    seeds: &[u64],
    budgets: &[f64],
    attack: &AttackConfig,
    train: &TrainConfig,
    rng: &RngStream,
) -> Result<RunReport> {
    dataset.ensure_nonempty()?;
    test.ensure_nonempty()?;
    if dataset.width() != test.width() {
        return Err(Error::data(format!(
            "training width {} differs from test width {}",
            dataset.width(),
            test.width()
        )));
    }
    let classes = dataset.num_classes().max(test.num_classes());
    let attack = attack.clone().with_range(attack.range.or(test.range()));
    let jobs: Vec<(usize, &ArchSpec, u64)> = architectures
        .iter()
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .enumerate()
        .map(|(i, (a, s))| (i, a, s))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, spec, seed)| {
            let start = Instant::now();
            let arch = spec.resolve(dataset.width(), classes);
            let init = arch.init(&mut RngStream::new(seed));
            let cfg = TrainConfig { seed, ..train.clone() };
            let model = sgd_train(&init, dataset, &cfg, arch.default_loss())?.model;
            let natural = accuracy(&model, test)?;
            let robust = robust_accuracy_grid(&model, test, &attack, budgets, &rng.derive(i as u64))?;
            let secs = start.elapsed().as_secs_f64();
            Ok(budgets
                .iter()
                .zip(robust)
                .map(|(&budget, robust_acc)| Cell {
                    arch: arch.describe(),
                    seed,
                    budget,
                    natural_acc: natural,
                    robust_acc,
                    seconds: secs,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        cells: rows.into_iter().flatten().collect(),
        provenance: json!({
            "dataset": dataset.provenance(),
            "test": test.provenance(),
            "seeds": seeds,
            "budgets": budgets,
            "attack": attack,
            "train": train,
            "rng_seed": rng.seed(),
            "rng_counter": rng.counter(),
        }),
    })
}

pub fn evaluate_dataset(plan: &EvalPlan, rng: &RngStream) -> Result<RunReport> {
    plan.validate()?;
    let data = plan.dataset.load()?;
    let test = plan.test.load()?;
    evaluate_grid(&data, &test, &plan.architectures, &plan.seeds, &plan.budgets, &plan.attack, &plan.train, rng)
}

/// Cross grid of architectures and seeds at the attack's own budget.
pub fn transfer_matrix(
    dataset: &Dataset,
    test: &Dataset,
    architectures: &[ArchSpec],
    seeds: &[u64],
    attack: &AttackConfig,
    train: &TrainConfig,
    rng: &RngStream,
) -> Result<RunReport> {
    if architectures.is_empty() || seeds.is_empty() {
        return Err(Error::param("transfer needs at least one architecture and seed"));
    }
    attack.validate()?;
    evaluate_grid(dataset, test, architectures, seeds, &[attack.epsilon], attack, train, rng)
}

/// The two-class 2-D Gaussian toy: class `y` centered at `y·mean` with
/// independent per-coordinate standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Points per cloud (both classes together).
    pub n: usize,
    pub n_test: usize,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// ℓ∞ budget; 0 disables every attack.
    pub epsilon: f64,
    pub attack_steps: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            n_test: 5000,
            mean: [2.0, 0.5],
            std: [1.0, 0.1],
            epsilon: 1.0,
            attack_steps: 20,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Dataset> {
        if n < 1 || self.std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::param("toy needs n >= 1 and non-negative std"));
        }
        let mut x = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.rademacher();
            for j in 0..2 {
                x.push(y as f64 * self.mean[j] + self.std[j] * rng.standard_normal());
            }
            labels.push(y);
        }
        Ok(Dataset::new(Tensor::matrix(n, 2, x)?, labels, None)?.with_provenance(json!({
            "generator": "toy2d",
            "mean": self.mean,
            "std": self.std,
            "n": n,
            "seed": rng.seed(),
            "counter": rng.counter(),
        })))
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub report: RunReport,
    pub robust_model: Model,
    pub retrained_model: Model,
    pub natural: Dataset,
    pub adversarial: Dataset,
    /// Angle between the two weight vectors, in degrees.
    pub angle_degrees: f64,
}

impl ToyOutcome {
    /// `kind,x1,x2,label`: every natural and adversarial point, then one row
    /// per decision line holding its normal vector (label left empty).
    pub fn points_csv(&self) -> String {
        let mut s = String::from("kind,x1,x2,label\n");
        for (kind, d) in [("natural", &self.natural), ("adversarial", &self.adversarial)] {
            for i in 0..d.len() {
                let r = d.features().row(i);
                let _ = writeln!(s, "{kind},{},{},{}", r[0], r[1], d.labels()[i]);
            }
        }
        for (kind, m) in [("line_robust", &self.robust_model), ("line_retrained", &self.retrained_model)] {
            let w = m.weights().expect("linear");
            let _ = writeln!(s, "{kind},{},{},", w[0], w[1]);
        }
        s
    }

    pub fn robust_gap(&self) -> f64 {
        self.report.cells[0].robust_acc - self.report.cells[1].robust_acc
    }
}

/// Adversarially trains a linear classifier on the toy, replaces the data by
/// its PGD examples, trains a fresh classifier on them naturally and attacks
/// both on clean test points.
pub fn figure2_toy(cfg: &ToyConfig, rng: &RngStream) -> Result<ToyOutcome> {
    cfg.train.validate()?;
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::param("toy epsilon must be >= 0"));
    }
    let natural = cfg.sample(cfg.n, &mut rng.derive(1))?;
    let test = cfg.sample(cfg.n_test, &mut rng.derive(2))?;
    let arch = Architecture::Linear { input: 2 };
    let init = arch.init(&mut RngStream::new(cfg.seed));
    let attack = AttackConfig::linf(cfg.epsilon).with_steps(cfg.attack_steps);
    let start = Instant::now();
    let (robust_model, adversarial) = if cfg.epsilon > 0.0 {
        let m = adversarially_train_reference(&init, &natural, &attack, &cfg.train, &rng.derive(3))?.model;
        let adv = baseline_adv_dataset(&m, &natural, &attack, &rng.derive(4))?;
        (m, adv)
    } else {
        (sgd_train(&init, &natural, &cfg.train, arch.default_loss())?.model, natural.clone())
    };
    let retrain_init = arch.init(&mut RngStream::new(cfg.seed.wrapping_add(1)));
    let retrained_model = sgd_train(&retrain_init, &adversarial, &cfg.train, arch.default_loss())?.model;
    let mut cells = Vec::new();
    for (name, m) in [("robust_classifier", &robust_model), ("retrained_on_adv", &retrained_model)] {
        let nat = accuracy(m, &test)?;
        let rob = if cfg.epsilon > 0.0 {
            robust_accuracy_grid(m, &test, &attack, &[cfg.epsilon], &rng.derive(5))?[0]
        } else {
            nat
        };
        cells.push(Cell {
            arch: name.into(),
            seed: cfg.seed,
            budget: cfg.epsilon,
            natural_acc: nat,
            robust_acc: rob,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let a = robust_model.weights().unwrap();
    let b = retrained_model.weights().unwrap();
    let cos = (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1])).max(1e-300);
    let angle_degrees = cos.clamp(-1.0, 1.0).acos().to_degrees();
    Ok(ToyOutcome {
        report: RunReport {
            cells,
            provenance: json!({ "toy": cfg, "rng_seed": rng.seed(), "rng_counter": rng.counter() }),
        },
        robust_model,
        retrained_model,
        natural,
        adversarial,
        angle_degrees,
    })
}
