//! The strong/weak feature model and its closed-form facts.
//!
//! Rows are `(x₁, x₂, …, x_{d+1})` with a label `y ∈ {-1, +1}`. The first
//! coordinate equals `y` with probability `p` and `-y` otherwise; the `d`
//! remaining coordinates are weakly label-correlated (Gaussian mode: `N(μy, 1)`)
//! or the constant 1 (the robust-star construction). For linear soft-margin
//! SVMs, the worst ℓ∞ perturbation, the natural/robust accuracies and the
//! shape of optimal weights are all available in closed form; this module
//! computes them and the checks that compare them against training runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{robust_accuracy, AttackConfig};
use crate::data::Dataset;
use crate::models::{accuracy, sgd_train, Architecture, LossKind, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{dot, sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Gaussian,
    Uniform,
    Laplace,
}

/// A law symmetric about `mean · y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricLaw {
    pub kind: LawKind,
    pub mean: f64,
    /// Standard deviation (gaussian), half-width (uniform) or scale b (laplace).
    pub scale: f64,
}

impl SymmetricLaw {
    /// Unit-variance law of the given family.
    pub fn unit_variance(kind: LawKind, mean: f64) -> Self {
        let scale = match kind {
            LawKind::Gaussian => 1.0,
            LawKind::Uniform => 3f64.sqrt(),
            LawKind::Laplace => std::f64::consts::FRAC_1_SQRT_2,
        };
        Self { kind, mean, scale }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.mean.is_finite()) {
            return Err(Error::param(format!("invalid symmetric law {self:?}")));
        }
        if self.mean > 1.0 {
            return Err(Error::param(format!("law mean {} exceeds 1", self.mean)));
        }
        Ok(())
    }

    /// A centered draw (add the mean yourself).
    pub fn sample_centered(&self, rng: &mut RngStream) -> f64 {
        match self.kind {
            LawKind::Gaussian => self.scale * rng.standard_normal(),
            LawKind::Uniform => self.scale * (2.0 * rng.uniform() - 1.0),
            LawKind::Laplace => {
                // inverse CDF on u ∈ (-1/2, 1/2)
                let u = rng.uniform() - 0.5;
                let a = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -self.scale * sign(u) * a.ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionMode {
    /// Weak coordinates `N(μy, 1)`.
    Gaussian,
    /// Weak coordinate `i` drawn from `laws[i]` around `laws[i].mean · y`.
    GeneralSymmetric { laws: Vec<SymmetricLaw> },
    /// Weak coordinates replaced by the constant 1.
    RobustStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    /// Number of weak coordinates; rows have `d + 1` features.
    pub d: usize,
    pub mu: f64,
    /// Probability that the strong coordinate agrees with the label.
    pub p: f64,
    pub mode: DistributionMode,
}

impl DistributionSpec {
    pub fn gaussian(d: usize, mu: f64, p: f64) -> Self {
        Self { d, mu, p, mode: DistributionMode::Gaussian }
    }

    pub fn robust_star(d: usize, mu: f64, p: f64) -> Self {
        Self { d, mu, p, mode: DistributionMode::RobustStar }
    }

    /// Every weak coordinate from the same unit-variance family with mean `mu`.
    pub fn symmetric(d: usize, mu: f64, p: f64, kind: LawKind) -> Self {
        Self {
            d,
            mu,
            p,
            mode: DistributionMode::GeneralSymmetric {
                laws: vec![SymmetricLaw::unit_variance(kind, mu); d],
            },
        }
    }

    /// Same `d`, `μ` and `p` in another mode.
    pub fn with_mode(&self, mode: DistributionMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::param("d must be >= 1"));
        }
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::param(format!("p must be in (0.5, 1], got {}", self.p)));
        }
        if !self.mu.is_finite() {
            return Err(Error::param("mu must be finite"));
        }
        if let DistributionMode::GeneralSymmetric { laws } = &self.mode {
            if laws.len() != self.d {
                return Err(Error::param(format!(
                    "{} laws for {} weak coordinates",
                    laws.len(),
                    self.d
                )));
            }
            for l in laws {
                l.validate()?;
            }
        }
        Ok(())
    }

    fn ensure_gaussian(&self) -> Result<()> {
        self.validate()?;
        match self.mode {
            DistributionMode::Gaussian => Ok(()),
            _ => Err(Error::param("closed form needs the gaussian mode")),
        }
    }
}

/// Draws `n` labeled rows.
pub fn sample(spec: &DistributionSpec, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::param("sample size must be >= 1"));
    }
    let seed = rng.seed();
    let counter = rng.counter();
    let m = spec.d + 1;
    let mut x = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.rademacher();
        let yf = y as f64;
        x.push(if rng.bernoulli(spec.p) { yf } else { -yf });
        match &spec.mode {
            DistributionMode::Gaussian => {
                for _ in 0..spec.d {
                    x.push(spec.mu * yf + rng.standard_normal());
                }
            }
            DistributionMode::GeneralSymmetric { laws } => {
                for law in laws {
                    x.push(law.mean * yf + law.sample_centered(rng));
                }
            }
            DistributionMode::RobustStar => x.extend(std::iter::repeat_n(1.0, spec.d)),
        }
        labels.push(y);
    }
    Ok(Dataset::new(Tensor::matrix(n, m, x)?, labels, None)?.with_provenance(json!({
        "generator": "theory",
        "distribution": spec,
        "n": n,
        "seed": seed,
        "counter": counter,
    })))
}

/// Standard normal CDF, `Φ(x) = erfc(-x/√2) / 2`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `δ = -ε · sign(y w)` entrywise; maximizes the hinge loss over the ℓ∞ ball.
pub fn optimal_linf_perturbation(w: &[f64], y: i32, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("epsilon must be > 0, got {eps}")));
    }
    if y != 1 && y != -1 {
        return Err(Error::data(format!("label {y} outside {{-1, +1}}")));
    }
    Ok(w.iter().map(|&wi| -eps * sign(y as f64 * wi)).collect())
}

/// `max{0, 1 - y wᵀx + ε‖w‖₁}`, the hinge loss at the worst ℓ∞ perturbation.
pub fn worst_case_hinge(w: &[f64], x: &[f64], y: i32, eps: f64) -> f64 {
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    (1.0 - y as f64 * dot(w, x) + eps * l1).max(0.0)
}

/// Brute-force maximum of the hinge loss over all `2^len` corners `x ± ε`.
pub fn corner_max_hinge(w: &[f64], x: &[f64], y: i32, eps: f64) -> Result<f64> {
    let k = w.len();
    if k > 24 {
        return Err(Error::param("corner enumeration limited to 24 coordinates"));
    }
    let mut best = f64::NEG_INFINITY;
    let mut corner = vec![0.0; k];
    for mask in 0u64..(1u64 << k) {
        for j in 0..k {
            corner[j] = x[j] + if mask >> j & 1 == 1 { eps } else { -eps };
        }
        best = best.max((1.0 - y as f64 * dot(w, &corner)).max(0.0));
    }
    Ok(best)
}

/// Accuracies of `sign(wᵀx)` under the gaussian model when the weak block's
/// contribution is exactly Gaussian: `N(μ·S, ‖w_tail‖²)` with `S = Σ w_tail`.
/// The ℓ∞ adversary subtracts `ε‖w‖₁` from the signed score.
fn gaussian_tail_accuracy(w: &[f64], mu: f64, p: f64, eps: f64) -> f64 {
    let w1 = w[0];
    let tail = &w[1..];
    let s: f64 = tail.iter().sum();
    let l1_tail: f64 = tail.iter().map(|v| v.abs()).sum();
    let sigma = tail.iter().map(|v| v * v).sum::<f64>().sqrt();
    let shift = eps * (w1.abs() + l1_tail);
    // signed score = w1·(y x1) + tail part - shift, with y x1 = ±1
    let prob_pos = |a: f64| -> f64 {
        let mean = a + mu * s - shift;
        if sigma == 0.0 {
            if mean > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf(mean / sigma)
        }
    };
    p * prob_pos(w1) + (1.0 - p) * prob_pos(-w1)
}

/// Natural and ℓ∞-robust accuracy of `sign(wᵀx)` for `w = (w₁, c, …, c)`
/// under the gaussian model:
/// `p·Φ((w₁/c + dμ)/√d) + (1-p)·Φ((-w₁/c + dμ)/√d)` and its perturbed
/// counterpart with `x₁ → ±y(1∓ε)`-type shifts and `μ → μ - ε`.
pub fn closed_form_accuracies(w: &[f64], spec: &DistributionSpec, eps: f64) -> Result<(f64, f64)> {
    spec.ensure_gaussian()?;
    if w.len() != spec.d + 1 {
        return Err(Error::param(format!(
            "weight length {} for d = {}",
            w.len(),
            spec.d
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::param("epsilon must be >= 0"));
    }
    let c = w[1];
    let scale = w.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if w[1..].iter().any(|v| (v - c).abs() > 1e-9 * scale) {
        return Err(Error::param("tail weights must be equal"));
    }
    if c < 0.0 {
        return Err(Error::param(format!("tail weight {c} is negative")));
    }
    if c == 0.0 && w[0] == 0.0 {
        return Err(Error::param("all-zero weights have no decision rule"));
    }
    let mut sym = vec![c; w.len()];
    sym[0] = w[0];
    Ok((
        gaussian_tail_accuracy(&sym, spec.mu, spec.p, 0.0),
        gaussian_tail_accuracy(&sym, spec.mu, spec.p, eps),
    ))
}

/// `(w₁, mean(w_tail), …, mean(w_tail))`.
pub fn symmetrize(w: &[f64]) -> Vec<f64> {
    let tail_mean = w[1..].iter().sum::<f64>() / (w.len() - 1) as f64;
    let mut out = vec![tail_mean; w.len()];
    out[0] = w[0];
    out
}

/// Monte-Carlo natural and ℓ∞-robust accuracy of `sign(wᵀx)` on fresh
/// samples, perturbing each row by `-ε sign(y w)`.
pub fn empirical_accuracies(
    w: &[f64],
    spec: &DistributionSpec,
    eps: f64,
    n: usize,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    spec.validate()?;
    if w.len() != spec.d + 1 {
        return Err(Error::param("weight length does not match d + 1"));
    }
    const CHUNK: usize = 50_000;
    let shards: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let counts = shards
        .par_iter()
        .map(|&s| {
            let rows = CHUNK.min(n - s * CHUNK);
            let mut r = rng.derive(s as u64);
            let data = sample(spec, rows, &mut r)?;
            let mut nat = 0usize;
            let mut rob = 0usize;
            for i in 0..rows {
                let x = data.features().row(i);
                let y = data.labels()[i];
                let score = y as f64 * dot(w, x);
                if score > 0.0 {
                    nat += 1;
                }
                if eps > 0.0 {
                    let delta = optimal_linf_perturbation(w, y, eps)?;
                    let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
                    if score > 0.0 && y as f64 * dot(w, &adv) > 0.0 {
                        rob += 1;
                    }
                } else if score > 0.0 {
                    rob += 1;
                }
            }
            Ok((nat, rob))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nat, rob) = counts.iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    Ok((nat as f64 / n as f64, rob as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureTolerances {
    /// Max coefficient of variation of the weak-coordinate weights.
    pub max_tail_cv: f64,
    /// Smallest admissible weak-coordinate weight.
    pub min_tail: f64,
    /// `w₁ < (1 + slack)·√d·mean(tail)`.
    pub ordering_slack: f64,
    /// Robust pattern: `max|tail| ≤ ratio·|w₁|`.
    pub vanish_ratio: f64,
}

impl Default for StructureTolerances {
    fn default() -> Self {
        Self {
            max_tail_cv: 0.2,
            min_tail: -1e-3,
            ordering_slack: 0.1,
            vanish_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStructureReport {
    pub w1: f64,
    pub tail_mean: f64,
    pub tail_std: f64,
    /// `tail_std / |tail_mean|`; 0 when the tail is constant.
    pub tail_cv: f64,
    pub tail_min: f64,
    pub tail_max_abs: f64,
    /// Weak weights equal up to the CV tolerance.
    pub equal_tail: bool,
    pub nonnegative: bool,
    /// `w₁ < (1 + slack)·√d·mean(tail)`; the natural-training pattern.
    pub ordering: bool,
    /// `w₁ > 0` and weak weights negligible; the robust-training pattern.
    pub tail_vanishing: bool,
}

pub fn verify_weight_structure(w: &[f64], d: usize, tol: &StructureTolerances) -> Result<WeightStructureReport> {
    if w.len() != d + 1 || d == 0 {
        return Err(Error::param(format!("weight length {} for d = {d}", w.len())));
    }
    let tail = &w[1..];
    let mean = tail.iter().sum::<f64>() / d as f64;
    let std = if d > 1 {
        (tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1) as f64).sqrt()
    } else {
        0.0
    };
    let cv = if std == 0.0 { 0.0 } else { std / mean.abs() };
    let tail_min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let tail_max_abs = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let w1 = w[0];
    Ok(WeightStructureReport {
        w1,
        tail_mean: mean,
        tail_std: std,
        tail_cv: cv,
        tail_min,
        tail_max_abs,
        equal_tail: cv <= tol.max_tail_cv,
        nonnegative: tail_min >= tol.min_tail && w1 >= tol.min_tail,
        ordering: w1 < (1.0 + tol.ordering_slack) * (d as f64).sqrt() * mean,
        tail_vanishing: w1 > 0.0 && tail_max_abs <= tol.vanish_ratio * w1.abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricSumReport {
    pub n: usize,
    pub skewness: f64,
    pub tolerance: f64,
    pub symmetric: bool,
}

/// Empirical skewness of `Σ (X_i - mean_i)` for independent draws from `laws`.
pub fn symmetric_sum_check(laws: &[SymmetricLaw], n: usize, rng: &mut RngStream) -> Result<SymmetricSumReport> {
    if laws.is_empty() || n < 3 {
        return Err(Error::param("need at least one law and three draws"));
    }
    for l in laws {
        if !(l.scale > 0.0 && l.scale.is_finite() && l.mean.is_finite()) {
            return Err(Error::param(format!("invalid law {l:?}")));
        }
    }
    let draws: Vec<f64> = (0..n)
        .map(|_| laws.iter().map(|l| l.sample_centered(rng)).sum())
        .collect();
    let nf = n as f64;
    let mean = draws.iter().sum::<f64>() / nf;
    let (m2, m3) = draws.iter().fold((0.0, 0.0), |(a, b), v| {
        let c = v - mean;
        (a + c * c, b + c * c * c)
    });
    let (m2, m3) = (m2 / nf, m3 / nf);
    let skewness = m3 / m2.powf(1.5);
    let tolerance = 0.05;
    Ok(SymmetricSumReport {
        n,
        skewness,
        tolerance,
        symmetric: skewness.abs() <= tolerance,
    })
}

/// Exact natural and ℓ∞-robust accuracy of `sign(wᵀx)` in gaussian mode for
/// arbitrary weights: the weak block contributes `N(μ·Σw_tail, ‖w_tail‖²)`.
pub fn gaussian_accuracies(w: &[f64], spec: &DistributionSpec, eps: f64) -> Result<(f64, f64)> {
    spec.ensure_gaussian()?;
    if w.len() != spec.d + 1 {
        return Err(Error::param("weight length does not match d + 1"));
    }
    Ok((
        gaussian_tail_accuracy(w, spec.mu, spec.p, 0.0),
        gaussian_tail_accuracy(w, spec.mu, spec.p, eps),
    ))
}

/// Settings of the natural-vs-robust-star SVM experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub distribution: DistributionSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Budget for the naturally trained SVM; defaults to `2μ`.
    pub eps_natural: f64,
    /// Budget for the SVM trained on robust-star samples.
    pub eps_star: f64,
    pub attack_steps: usize,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            distribution: DistributionSpec::gaussian(100, 0.4, 0.9),
            n_train: 20_000,
            n_test: 10_000,
            eps_natural: 0.8,
            eps_star: 0.5,
            attack_steps: 10,
            train: TrainConfig {
                lr: 0.003,
                momentum: 0.9,
                weight_decay: 0.03,
                epochs: 40,
                batch_size: 64,
                seed: 0,
            },
            init_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmSummary {
    pub epsilon: f64,
    pub natural_acc: f64,
    /// PGD robust accuracy on clean test data.
    pub robust_acc: f64,
    /// Exact accuracies of the trained weights (gaussian test law only).
    pub exact_natural: Option<f64>,
    pub exact_robust: Option<f64>,
    pub weights: Vec<f64>,
    pub structure: WeightStructureReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub natural: SvmSummary,
    pub star: SvmSummary,
    /// Natural accuracy ≥ 0.98 and robust ≤ 0.02.
    pub natural_regime: bool,
    /// Both star accuracies within `p ± 0.02`.
    pub star_regime: bool,
    /// Star weights: `w₁ > 0`, tail ≤ 0.05·|w₁|.
    pub star_structure: bool,
    /// Natural weights: CV, sign and ordering checks.
    pub natural_structure: bool,
}

impl SeparationReport {
    pub fn passed(&self) -> bool {
        self.natural_regime && self.star_regime && self.star_structure && self.natural_structure
    }
}

fn summarize(
    model: &Model,
    spec: &DistributionSpec,
    test: &Dataset,
    eps: f64,
    cfg: &SeparationConfig,
    rng: &RngStream,
) -> Result<SvmSummary> {
    let attack = AttackConfig::linf(eps).with_steps(cfg.attack_steps);
    let w = model.weights().expect("linear model").to_vec();
    let exact = gaussian_accuracies(&w, spec, eps).ok();
    Ok(SvmSummary {
        epsilon: eps,
        natural_acc: accuracy(model, test)?,
        robust_acc: robust_accuracy(model, test, &attack, rng)?,
        exact_natural: exact.map(|e| e.0),
        exact_robust: exact.map(|e| e.1),
        structure: verify_weight_structure(&w, spec.d, &StructureTolerances::default())?,
        weights: w,
    })
}

/// Trains hinge SVMs on samples of `cfg.distribution` and of its robust-star
/// counterpart, then attacks both on held-out samples of the former.
pub fn run_separation(cfg: &SeparationConfig) -> Result<SeparationReport> {
    let spec = &cfg.distribution;
    spec.validate()?;
    if matches!(spec.mode, DistributionMode::RobustStar) {
        return Err(Error::param("separation needs a non-star training law"));
    }
    let root = RngStream::new(cfg.seed);
    let train = sample(spec, cfg.n_train, &mut root.derive(1))?;
    let star_train = sample(&spec.with_mode(DistributionMode::RobustStar), cfg.n_train, &mut root.derive(2))?;
    let test = sample(spec, cfg.n_test, &mut root.derive(3))?;
    let arch = Architecture::Linear { input: spec.d + 1 };
    let init = arch.init(&mut RngStream::new(cfg.init_seed));
    let natural = sgd_train(&init, &train, &cfg.train, LossKind::Hinge)?.model;
    let star = sgd_train(&init, &star_train, &cfg.train, LossKind::Hinge)?.model;
    let natural = summarize(&natural, spec, &test, cfg.eps_natural, cfg, &root.derive(4))?;
    let star = summarize(&star, spec, &test, cfg.eps_star, cfg, &root.derive(5))?;
    let p = spec.p;
    let ns = &natural.structure;
    Ok(SeparationReport {
        natural_regime: natural.natural_acc >= 0.98 && natural.robust_acc <= 0.02,
        star_regime: (star.natural_acc - p).abs() <= 0.02 && (star.robust_acc - p).abs() <= 0.02,
        star_structure: star.structure.tail_vanishing,
        natural_structure: ns.equal_tail && ns.nonnegative && ns.ordering,
        natural,
        star,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub tuples: usize,
    /// Largest `corner maximum - attained hinge` over all tuples.
    pub max_gap: f64,
    pub passed: bool,
}

/// Compares `-ε sign(yw)` with exhaustive corner search on random tuples.
pub fn lemma2_check(tuples: usize, max_dim: usize, rng: &mut RngStream) -> Result<Lemma2Report> {
    let mut max_gap = 0.0f64;
    for _ in 0..tuples {
        let k = 1 + rng.index(max_dim);
        let w: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
        let x: Vec<f64> = (0..k).map(|_| 2.0 * rng.standard_normal()).collect();
        let y = rng.rademacher();
        let eps = 0.01 + 0.99 * rng.uniform();
        let delta = optimal_linf_perturbation(&w, y, eps)?;
        let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let attained = (1.0 - y as f64 * dot(&w, &adv)).max(0.0);
        max_gap = max_gap.max((corner_max_hinge(&w, &x, y, eps)? - attained).abs());
    }
    Ok(Lemma2Report { tuples, max_gap, passed: max_gap <= 1e-9 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormTuple {
    pub d: usize,
    pub mu: f64,
    pub p: f64,
    pub w1: f64,
    pub c: f64,
    pub eps: f64,
    pub closed_form: (f64, f64),
    pub empirical: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormReport {
    pub samples: usize,
    pub max_deviation: f64,
    pub tuples: Vec<ClosedFormTuple>,
    pub passed: bool,
}

/// One random valid closed-form parameter tuple.
pub fn random_closed_form_tuple(rng: &mut RngStream) -> (DistributionSpec, Vec<f64>, f64) {
    let d = 1 + rng.index(30);
    let mu = 0.05 + 0.95 * rng.uniform();
    let p = 0.55 + 0.45 * rng.uniform();
    let c = 0.05 + rng.uniform();
    let w1 = 4.0 * rng.uniform() - 2.0;
    let eps = 1.2 * rng.uniform();
    let mut w = vec![c; d + 1];
    w[0] = w1;
    (DistributionSpec::gaussian(d, mu, p), w, eps)
}

/// Closed-form accuracies against Monte-Carlo estimates on random tuples.
pub fn closed_form_check(tuples: usize, samples: usize, rng: &mut RngStream) -> Result<ClosedFormReport> {
    let mut out = Vec::with_capacity(tuples);
    let mut max_deviation = 0.0f64;
    for t in 0..tuples {
        let (spec, w, eps) = random_closed_form_tuple(rng);
        let cf = closed_form_accuracies(&w, &spec, eps)?;
        let em = empirical_accuracies(&w, &spec, eps, samples, &rng.derive(t as u64))?;
        max_deviation = max_deviation.max((cf.0 - em.0).abs()).max((cf.1 - em.1).abs());
        out.push(ClosedFormTuple {
            d: spec.d,
            mu: spec.mu,
            p: spec.p,
            w1: w[0],
            c: w[1],
            eps,
            closed_form: cf,
            empirical: em,
        });
    }
    Ok(ClosedFormReport {
        samples,
        max_deviation,
        passed: max_deviation <= 0.005,
        tuples: out,
    })
}

/// Everything `theory-verify` checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub separation: SeparationReport,
    pub lemma2: Lemma2Report,
    pub closed_form: ClosedFormReport,
    pub symmetric_sum: SymmetricSumReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryVerifyConfig {
    pub separation: SeparationConfig,
    pub lemma2_tuples: usize,
    pub closed_form_tuples: usize,
    pub closed_form_samples: usize,
    pub symmetric_laws: Vec<SymmetricLaw>,
    pub symmetric_samples: usize,
}

impl Default for TheoryVerifyConfig {
    fn default() -> Self {
        Self {
            separation: SeparationConfig::default(),
            lemma2_tuples: 500,
            closed_form_tuples: 20,
            closed_form_samples: 1_000_000,
            symmetric_laws: vec![
                SymmetricLaw::unit_variance(LawKind::Gaussian, 0.3),
                SymmetricLaw::unit_variance(LawKind::Laplace, -0.2),
            ],
            symmetric_samples: 1_000_000,
        }
    }
}

pub fn verify_theory(cfg: &TheoryVerifyConfig) -> Result<TheoryReport> {
    let root = RngStream::new(cfg.separation.seed).derive(100);
    let separation = run_separation(&cfg.separation)?;
    let lemma2 = lemma2_check(cfg.lemma2_tuples, 10, &mut root.derive(1))?;
    let closed_form = closed_form_check(cfg.closed_form_tuples, cfg.closed_form_samples, &mut root.derive(2))?;
    let symmetric_sum = symmetric_sum_check(&cfg.symmetric_laws, cfg.symmetric_samples, &mut root.derive(3))?;
    let passed = separation.passed() && lemma2.passed && closed_form.passed && symmetric_sum.symmetric;
    Ok(TheoryReport {
        separation,
        lemma2,
        closed_form,
        symmetric_sum,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        // Reference values of Φ to 16 digits.
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-17);
        assert!((normal_cdf(3.0) - 0.998_650_101_968_369_9).abs() < 1e-15);
        assert!((normal_cdf(-8.0) - 6.220_960_574_271_784e-16).abs() < 1e-27);
    }

    #[test]
    fn robust_star_rows_have_constant_tail() {
        let spec = DistributionSpec::robust_star(7, 0.3, 0.9);
        let d = sample(&spec, 50, &mut RngStream::new(1)).unwrap();
        for i in 0..50 {
            assert!(d.features().row(i)[1..].iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn p_one_means_strong_feature_is_label() {
        let spec = DistributionSpec::gaussian(3, 0.4, 1.0);
        let d = sample(&spec, 10_000, &mut RngStream::new(2)).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.features().row(i)[0], d.labels()[i] as f64);
        }
    }

    #[test]
    fn weak_means_match_mu() {
        let spec = DistributionSpec::gaussian(100, 0.4, 0.9);
        let d = sample(&spec, 100_000, &mut RngStream::new(3)).unwrap();
        let mut sums = vec![0.0; 100];
        for i in 0..d.len() {
            let y = d.labels()[i] as f64;
            for (s, v) in sums.iter_mut().zip(&d.features().row(i)[1..]) {
                *s += y * v;
            }
        }
        for s in sums {
            assert!((s / d.len() as f64 - 0.4).abs() <= 0.01);
        }
    }

    #[test]
    fn symmetric_laws_have_unit_variance() {
        let mut rng = RngStream::new(4);
        for kind in [LawKind::Gaussian, LawKind::Uniform, LawKind::Laplace] {
            let l = SymmetricLaw::unit_variance(kind, 0.0);
            let n = 200_000;
            let draws: Vec<f64> = (0..n).map(|_| l.sample_centered(&mut rng)).collect();
            let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.02, "{kind:?} {var}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rng = RngStream::new(0);
        assert!(sample(&DistributionSpec::gaussian(3, 0.4, 0.4), 5, &mut rng).is_err());
        assert!(sample(&DistributionSpec::gaussian(0, 0.4, 0.9), 5, &mut rng).is_err());
        let mut bad = DistributionSpec::symmetric(3, 0.4, 0.9, LawKind::Uniform);
        if let DistributionMode::GeneralSymmetric { laws } = &mut bad.mode {
            laws.pop();
        }
        assert!(matches!(sample(&bad, 5, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn perturbation_examples() {
        assert_eq!(optimal_linf_perturbation(&[1.0, -2.0], 1, 0.1).unwrap(), vec![-0.1, 0.1]);
        assert_eq!(optimal_linf_perturbation(&[0.0, 3.0], -1, 0.5).unwrap(), vec![0.0, 0.5]);
        assert!(optimal_linf_perturbation(&[1.0], 1, 0.0).is_err());
    }

    #[test]
    fn perturbation_attains_corner_maximum() {
        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let k = 2 + rng.index(9);
            let w: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let x: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let y = rng.rademacher();
            let eps = 0.01 + rng.uniform();
            let delta = optimal_linf_perturbation(&w, y, eps).unwrap();
            let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let attained = (1.0 - y as f64 * dot(&w, &adv)).max(0.0);
            let brute = corner_max_hinge(&w, &x, y, eps).unwrap();
            assert!((attained - brute).abs() <= 1e-9);
            assert!((attained - worst_case_hinge(&w, &x, y, eps)).abs() <= 1e-9);
        }
    }

    #[test]
    fn strong_only_weights_give_p_p() {
        let spec = DistributionSpec::gaussian(10, 0.4, 0.9);
        let mut w = vec![0.0; 11];
        w[0] = 1.0;
        let (nat, rob) = closed_form_accuracies(&w, &spec, 0.5).unwrap();
        assert_eq!((nat, rob), (0.9, 0.9));
    }

    #[test]
    fn equal_weights_at_four_over_root_d_are_broken() {
        let d = 100;
        let mu = 4.0 / (d as f64).sqrt();
        let spec = DistributionSpec::gaussian(d, mu, 0.9);
        // w₁ between 0 and √d·c, as the optimal classifier satisfies
        for w1 in [0.0, 0.3, 1.0, 9.9] {
            let mut w = vec![1.0; d + 1];
            w[0] = w1;
            let (nat, rob) = closed_form_accuracies(&w, &spec, 2.0 * mu).unwrap();
            assert!(nat >= 0.9986, "{nat}");
            assert!(rob <= 0.001_35, "{rob}");
        }
    }

    #[test]
    fn closed_form_rejects_bad_weights() {
        let spec = DistributionSpec::gaussian(3, 0.4, 0.9);
        assert!(closed_form_accuracies(&[1.0, -0.1, -0.1, -0.1], &spec, 0.1).is_err());
        assert!(closed_form_accuracies(&[1.0, 0.1, 0.2, 0.1], &spec, 0.1).is_err());
        assert!(closed_form_accuracies(&[0.0, 0.0, 0.0, 0.0], &spec, 0.1).is_err());
        let star = DistributionSpec::robust_star(3, 0.4, 0.9);
        assert!(closed_form_accuracies(&[1.0, 0.1, 0.1, 0.1], &star, 0.1).is_err());
    }

    #[test]
    fn closed_form_matches_monte_carlo_spot_check() {
        let spec = DistributionSpec::gaussian(12, 0.3, 0.85);
        let mut w = vec![0.2; 13];
        w[0] = 0.7;
        let (cn, cr) = closed_form_accuracies(&w, &spec, 0.25).unwrap();
        let (en, er) = empirical_accuracies(&w, &spec, 0.25, 400_000, &RngStream::new(6)).unwrap();
        assert!((cn - en).abs() < 0.005 && (cr - er).abs() < 0.005, "{cn} {en} {cr} {er}");
    }

    #[test]
    fn structure_patterns() {
        let tol = StructureTolerances::default();
        let mut w = vec![0.0; 11];
        w[0] = 1.0;
        let r = verify_weight_structure(&w, 10, &tol).unwrap();
        assert!(r.tail_vanishing && !r.ordering);

        let mut w = vec![0.05; 11];
        w[0] = 0.1;
        let r = verify_weight_structure(&w, 10, &tol).unwrap();
        assert!(r.ordering && r.equal_tail && r.nonnegative && !r.tail_vanishing);
        assert!(verify_weight_structure(&w, 9, &tol).is_err());
    }

    #[test]
    fn symmetric_sums() {
        let mut rng = RngStream::new(8);
        let u = SymmetricLaw { kind: LawKind::Uniform, mean: 0.0, scale: 1.0 };
        assert!(symmetric_sum_check(&[u, u], 1_000_000, &mut rng).unwrap().symmetric);
        let g = SymmetricLaw::unit_variance(LawKind::Gaussian, 0.3);
        let l = SymmetricLaw::unit_variance(LawKind::Laplace, -0.2);
        assert!(symmetric_sum_check(&[g, l], 1_000_000, &mut rng).unwrap().symmetric);
        assert!(symmetric_sum_check(&[g], 1_000_000, &mut rng).unwrap().symmetric);
    }
}
