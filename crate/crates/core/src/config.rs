//! Experiment configuration documents. Every field is optional, unknown keys
//! are rejected, and the hash covers the defaults-filled document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, Norm};
use crate::data::ValueRange;
use crate::error::{Error, Result};
use crate::eval::{ArchSpec, ToyConfig};
use crate::learn::{LearnMode, RobustLearnConfig};
use crate::models::TrainConfig;
use crate::theory::{DistributionMode, DistributionSpec, TheoryVerifyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistributionSection {
    pub d: usize,
    pub mu: f64,
    pub p: f64,
    pub mode: DistributionMode,
    pub n_train: usize,
}

impl Default for DistributionSection {
    fn default() -> Self {
        Self {
            d: 20,
            mu: 4.0 / 20f64.sqrt(),
            p: 0.9,
            mode: DistributionMode::Gaussian,
            n_train: 2000,
        }
    }
}

impl DistributionSection {
    pub fn spec(&self) -> DistributionSpec {
        DistributionSpec {
            d: self.d,
            mu: self.mu,
            p: self.p,
            mode: self.mode.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Architecture used for learning and for baseline source models.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub norm: Norm,
    /// Defaults to `2μ` of the distribution section.
    pub epsilon: Option<f64>,
    /// Defaults to `epsilon / 10`.
    pub alpha: Option<f64>,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: None,
            alpha: None,
            steps: 10,
            random_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustLearnSection {
    pub epochs: usize,
    pub gamma: f64,
    /// Defaults to 0.01 for unbounded data and 0.5/255 with a range.
    pub beta: Option<f64>,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub weight_decay: f64,
    pub mode: LearnMode,
    pub range: Option<ValueRange>,
}

impl Default for RobustLearnSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            gamma: 0.1,
            beta: None,
            batch_size: 64,
            init_seed: 0,
            shuffle_seed: 0,
            weight_decay: 1e-3,
            mode: LearnMode::MetaGradient,
            range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub architectures: Vec<ArchSpec>,
    pub seeds: Vec<u64>,
    /// Defaults to `{μ, 2μ}`.
    pub budgets: Option<Vec<f64>>,
    pub n_test: usize,
    pub test_seed: u64,
    pub train: TrainConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            architectures: vec![ArchSpec::linear(), ArchSpec::mlp(&[32, 32])],
            seeds: vec![0, 1, 2, 3, 4],
            budgets: None,
            n_test: 10_000,
            test_seed: 1_000_003,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub distribution: DistributionSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub robust_learn: RobustLearnSection,
    pub eval: EvalSection,
    pub theory: TheoryVerifyConfig,
    pub toy: ToyConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution.spec().validate()?;
        if self.distribution.n_train < 1 {
            return Err(Error::param("distribution.n_train must be >= 1"));
        }
        self.model.train.validate()?;
        self.attack().validate()?;
        self.robust_learn().validate()?;
        self.eval.train.validate()?;
        if self.eval.architectures.is_empty() || self.eval.seeds.is_empty() || self.budgets().is_empty() {
            return Err(Error::param("eval needs at least one architecture, seed and budget"));
        }
        if self.eval.n_test < 1 {
            return Err(Error::param("eval.n_test must be >= 1"));
        }
        self.theory.separation.train.validate()?;
        self.toy.train.validate()
    }

    pub fn attack(&self) -> AttackConfig {
        let eps = self.attack.epsilon.unwrap_or(2.0 * self.distribution.mu);
        let mut a = AttackConfig::new(self.attack.norm, eps).with_steps(self.attack.steps);
        if let Some(alpha) = self.attack.alpha {
            a.alpha = alpha;
        }
        a.random_start = self.attack.random_start;
        a
    }

    pub fn robust_learn(&self) -> RobustLearnConfig {
        let r = &self.robust_learn;
        let beta = r.beta.unwrap_or(if r.range.is_some() { 0.5 / 255.0 } else { 0.01 });
        RobustLearnConfig {
            epochs: r.epochs,
            gamma: r.gamma,
            beta,
            attack: self.attack(),
            batch_size: r.batch_size,
            init_seed: r.init_seed,
            shuffle_seed: r.shuffle_seed,
            weight_decay: r.weight_decay,
            mode: r.mode,
            range: r.range,
        }
    }

    pub fn budgets(&self) -> Vec<f64> {
        self.eval
            .budgets
            .clone()
            .unwrap_or_else(|| vec![self.distribution.mu, 2.0 * self.distribution.mu])
    }

    /// Copy with every derived default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let attack = self.attack();
        c.attack.epsilon = Some(attack.epsilon);
        c.attack.alpha = Some(attack.alpha);
        c.robust_learn.beta = Some(self.robust_learn().beta);
        c.eval.budgets = Some(self.budgets());
        c
    }

    /// The resolved document; what the hash covers.
    pub fn canonical(&self) -> Value {
        serde_json::to_value(self.resolved()).expect("config serializes")
    }

    /// First 8 bytes of SHA-256 over the canonical document, as 16 hex digits.
    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }
}

/// Digest of a JSON document with object keys sorted at every level.
pub fn config_hash(doc: &Value) -> String {
    let text = sorted(doc).to_string();
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&m[k]))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
        other => other.clone(),
    }
}
