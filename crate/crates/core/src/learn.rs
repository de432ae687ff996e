//! Robust dataset learning: a classifier parameterized by the data through
//! one gradient step, attacked on the natural data, with the data then moved
//! to lower the attacked loss. Plus baseline generators and subsampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{default_attack_loss, pgd_attack, attack_dataset, AttackConfig};
use crate::autodiff::{self, mixed_vjp, Tape, Var};
use crate::data::{Dataset, ValueRange};
use crate::error::{Error, Result};
use crate::models::{epoch_batches, Architecture, LossKind, Model, Momentum, TrainConfig, TrainOutcome};
use crate::rng::RngStream;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnMode {
    /// Differentiate the attacked loss through the step-1 update.
    #[default]
    MetaGradient,
    /// Hold θ fixed at the updated classifier and use
    /// `-γ ∇_x ⟨∇_θ L(θ⁺, x), ∇_θ L_adv(θ⁺)⟩`.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustLearnConfig {
    /// Epochs T.
    pub epochs: usize,
    /// Classifier step size γ.
    pub gamma: f64,
    /// Data step size β.
    pub beta: f64,
    pub attack: AttackConfig,
    pub batch_size: usize,
    /// Seed of the classifier initialization θ₀.
    pub init_seed: u64,
    /// Seed of the per-epoch batch order.
    pub shuffle_seed: u64,
    /// λ of the classifier objective `mean loss + λ‖θ‖²`.
    pub weight_decay: f64,
    pub mode: LearnMode,
    /// Clamp for learned data; falls back to the dataset's own range.
    pub range: Option<ValueRange>,
}

impl RobustLearnConfig {
    /// Defaults for unbounded synthetic data (`β = 0.01`).
    pub fn synthetic(attack: AttackConfig) -> Self {
        Self {
            epochs: 50,
            gamma: 0.1,
            beta: 0.01,
            attack,
            batch_size: 64,
            init_seed: 0,
            shuffle_seed: 0,
            weight_decay: 1e-3,
            mode: LearnMode::MetaGradient,
            range: None,
        }
    }

    /// Defaults for `[0, 1]` image-like data (`β = 0.5/255`).
    pub fn image(attack: AttackConfig) -> Self {
        Self {
            beta: 0.5 / 255.0,
            range: Some(ValueRange { lo: 0.0, hi: 1.0 }),
            ..Self::synthetic(attack)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::param(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay must be >= 0"));
        }
        if let Some(r) = self.range {
            ValueRange::new(r.lo, r.hi)?;
        }
        self.attack.validate()
    }
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnTrace {
    /// Classifier objective on the learned batch before step 1.
    pub clean_loss: Vec<f64>,
    /// Objective of the updated classifier on the adversarial batch.
    pub adv_loss: Vec<f64>,
    /// ℓ2 norm of the total data change over the epoch.
    pub update_norm: Vec<f64>,
}

impl LearnTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,clean_loss,adv_loss,update_norm\n");
        for i in 0..self.clean_loss.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                i + 1,
                self.clean_loss[i],
                self.adv_loss[i],
                self.update_norm[i]
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub dataset: Dataset,
    pub trace: LearnTrace,
    /// Classifier after the last step 1.
    pub model: Model,
}

fn train_loss_fn(
    model: &Model,
    kind: LossKind,
    lambda: f64,
    labels: &[i32],
) -> impl for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Result<Var<'t>> {
    let model = model.clone();
    let labels = labels.to_vec();
    move |_t, p, x| model.objective(kind, lambda, p, x, &labels)
}

/// Step-3 direction `∇_{x_rob}` of the attacked loss, before taking its sign.
///
/// `params` is θ before step 1 and `updated` is θ⁺. Meta-gradient mode
/// differentiates `L_adv(θ⁺(x_rob))`; alternating mode uses θ⁺ for both
/// factors. Both vanish when `gamma = 0`.
#[allow(clippy::too_many_arguments)]
pub fn step3_direction(
    mode: LearnMode,
    model: &Model,
    kind: LossKind,
    lambda: f64,
    gamma: f64,
    params: &[Tensor],
    updated: &[Tensor],
    x_rob: &Tensor,
    x_adv: &Tensor,
    labels: &[i32],
) -> Result<(Tensor, f64)> {
    let adv_labels = labels.to_vec();
    let adv_model = model.clone();
    let x_adv_c = x_adv.clone();
    let (adv, g) = autodiff::grad(
        move |t, p| {
            let x = t.constant(x_adv_c.clone());
            adv_model.objective(kind, lambda, p, x, &adv_labels)
        },
        updated,
    )?;
    if gamma == 0.0 {
        return Ok((Tensor::zeros(x_rob.shape()), adv));
    }
    let train = train_loss_fn(model, kind, lambda, labels);
    let at = match mode {
        LearnMode::MetaGradient => params,
        LearnMode::Alternating => updated,
    };
    Ok((mixed_vjp(&train, at, x_rob, &g)?.scale(-gamma), adv))
}

fn provenance(kind: &str, source: &Dataset, extra: serde_json::Value) -> serde_json::Value {
    let mut p = json!({ "generator": kind, "source": source.provenance() });
    if let (Some(obj), serde_json::Value::Object(e)) = (p.as_object_mut(), extra) {
        obj.extend(e);
    }
    p
}

/// Learns `X_rob` starting from `X_nat`.
pub fn learn_robust_dataset(
    x_nat: &Dataset,
    arch: &Architecture,
    cfg: &RobustLearnConfig,
    rng: &RngStream,
) -> Result<LearnOutcome> {
    learn_from(x_nat, x_nat, arch, cfg, rng)
}

/// Learns from an explicit starting `x_rob`, which must be index-aligned with
/// `x_nat` (same size, width and labels).
pub fn learn_from(
    x_nat: &Dataset,
    x_rob: &Dataset,
    arch: &Architecture,
    cfg: &RobustLearnConfig,
    rng: &RngStream,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    x_nat.ensure_nonempty()?;
    if x_nat.len() != x_rob.len() || x_nat.width() != x_rob.width() || x_nat.labels() != x_rob.labels() {
        return Err(Error::contract("natural and robust datasets are not index-aligned"));
    }
    if arch.input_width() != x_nat.width() {
        return Err(Error::param(format!(
            "architecture expects width {}, dataset has {}",
            arch.input_width(),
            x_nat.width()
        )));
    }
    let range = cfg.range.or(x_nat.range());
    let attack = cfg.attack.clone().with_range(cfg.attack.range.or(range));
    let kind = arch.default_loss();
    let lambda = cfg.weight_decay;
    let mut model = arch.init(&mut RngStream::new(cfg.init_seed));
    let attack_loss = default_attack_loss(&model);
    let step_cfg = TrainConfig {
        lr: cfg.gamma,
        momentum: 0.0,
        weight_decay: lambda,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.shuffle_seed,
    };
    let mut stepper = Momentum::new(&model);
    let mut order_rng = RngStream::new(cfg.shuffle_seed);
    let width = x_nat.width();
    let mut rob = x_rob.features().clone();
    if let Some(rg) = range {
        rob = rob.map(|v| rg.clamp(v));
    }
    let nat = x_nat.features();
    let mut trace = LearnTrace::default();
    let mut batch_counter = 0u64;
    for _ in 0..cfg.epochs {
        let batches = epoch_batches(&mut order_rng, x_nat.len(), cfg.batch_size);
        let (mut clean_sum, mut adv_sum, mut moved) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let labels: Vec<i32> = idx.iter().map(|&i| x_nat.labels()[i]).collect();
            let b_rob = rob.select_rows(idx);
            let b_nat = nat.select_rows(idx);
            let params = model.params().to_vec();
            // step 1
            let (clean, g) = model.objective_grad(kind, lambda, &b_rob, &labels)?;
            stepper.step(&mut model, &g, &step_cfg)?;
            // step 2
            let mut attack_rng = rng.derive(batch_counter);
            batch_counter += 1;
            let x_adv = pgd_attack(&model, &b_nat, &labels, &attack, attack_loss, &mut attack_rng)?;
            // step 3
            let (dir, adv) = step3_direction(
                cfg.mode,
                &model,
                kind,
                lambda,
                cfg.gamma,
                &params,
                model.params(),
                &b_rob,
                &x_adv,
                &labels,
            )?;
            clean_sum += clean;
            adv_sum += adv;
            for (r, &i) in idx.iter().enumerate() {
                let d = &dir.data()[r * width..(r + 1) * width];
                for (v, di) in rob.row_mut(i).iter_mut().zip(d) {
                    let mut nv = *v - cfg.beta * sign(*di);
                    if let Some(rg) = range {
                        nv = rg.clamp(nv);
                    }
                    moved += (nv - *v) * (nv - *v);
                    *v = nv;
                }
            }
        }
        let nb = batches.len() as f64;
        trace.clean_loss.push(clean_sum / nb);
        trace.adv_loss.push(adv_sum / nb);
        trace.update_norm.push(moved.sqrt());
    }
    let out = Dataset::new(rob, x_nat.labels().to_vec(), range)?.with_provenance(provenance(
        "robust_learn",
        x_nat,
        json!({ "architecture": arch, "config": cfg, "rng_seed": rng.seed(), "rng_counter": rng.counter() }),
    ));
    Ok(LearnOutcome {
        dataset: out,
        trace,
        model,
    })
}

/// Every row replaced by its PGD example against `source`.
pub fn baseline_adv_dataset(source: &Model, x_nat: &Dataset, attack: &AttackConfig, rng: &RngStream) -> Result<Dataset> {
    let attack = attack.clone().with_range(attack.range.or(x_nat.range()));
    let mut out = attack_dataset(source, x_nat, &attack, default_attack_loss(source), rng)?;
    *out.provenance_mut() = provenance(
        "adversarial_baseline",
        x_nat,
        json!({
            "source_model": source.architecture(),
            "attack": attack,
            "rng_seed": rng.seed(),
            "rng_counter": rng.counter(),
        }),
    );
    Ok(out)
}

/// PGD adversarial training: each batch is replaced by its PGD examples
/// against the current model before the momentum step.
pub fn adversarially_train_reference(
    init: &Model,
    dataset: &Dataset,
    attack: &AttackConfig,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    attack.validate()?;
    dataset.ensure_nonempty()?;
    let attack = attack.clone().with_range(attack.range.or(dataset.range()));
    let mut model = init.clone();
    let kind = model.architecture().default_loss();
    let attack_loss = default_attack_loss(&model);
    let mut momentum = Momentum::new(&model);
    let mut order = RngStream::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut counter = 0u64;
    for _ in 0..cfg.epochs {
        let batches = epoch_batches(&mut order, dataset.len(), cfg.batch_size);
        let mut total = 0.0;
        for idx in &batches {
            let x = dataset.features().select_rows(idx);
            let labels: Vec<i32> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let mut r = rng.derive(counter);
            counter += 1;
            let x_adv = pgd_attack(&model, &x, &labels, &attack, attack_loss, &mut r)?;
            let (l, g) = model.objective_grad(kind, cfg.weight_decay, &x_adv, &labels)?;
            total += l;
            momentum.step(&mut model, &g, cfg)?;
        }
        trace.push(total / batches.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Class-stratified subsample of `⌈fraction·n⌉` rows. Per-class quotas are
/// `fraction·count` rounded by largest remainder; rows keep their original
/// order.
pub fn subsample(dataset: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("fraction must be in (0, 1], got {fraction}")));
    }
    dataset.ensure_nonempty()?;
    let n = dataset.len();
    let target = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in dataset.labels().iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    let mut quotas: Vec<(i32, usize, f64)> = members
        .iter()
        .map(|(&y, rows)| {
            let exact = fraction * rows.len() as f64;
            (y, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    let mut k = 0;
    while assigned < target {
        let q = &mut quotas[by_remainder[k % by_remainder.len()]];
        if q.1 < members[&q.0].len() {
            q.1 += 1;
            assigned += 1;
        }
        k += 1;
    }
    let mut picked = Vec::with_capacity(target);
    for (y, quota, _) in &quotas {
        let mut rows = members[y].clone();
        rng.shuffle(&mut rows);
        picked.extend_from_slice(&rows[..*quota]);
    }
    picked.sort_unstable();
    let mut out = dataset.select(&picked);
    *out.provenance_mut() = provenance(
        "subsample",
        dataset,
        json!({ "fraction": fraction, "rng_seed": rng.seed(), "rng_counter": rng.counter() }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::sgd_train;
    use crate::theory::{sample, DistributionSpec};

    fn task(n: usize, seed: u64) -> Dataset {
        let mu = 4.0 / 20f64.sqrt();
        sample(&DistributionSpec::gaussian(20, mu, 0.9), n, &mut RngStream::new(seed)).unwrap()
    }

    fn cfg() -> RobustLearnConfig {
        let mut c = RobustLearnConfig::synthetic(AttackConfig::linf(0.4).with_steps(5));
        c.epochs = 3;
        c
    }

    #[test]
    fn zero_beta_keeps_data_and_matches_natural_training() {
        let data = task(300, 1);
        let arch = Architecture::Linear { input: 21 };
        let mut c = cfg();
        c.beta = 0.0;
        let out = learn_robust_dataset(&data, &arch, &c, &RngStream::new(2)).unwrap();
        assert_eq!(out.dataset.features(), data.features());
        assert_eq!(out.dataset.labels(), data.labels());
        let tc = TrainConfig {
            lr: c.gamma,
            momentum: 0.0,
            weight_decay: c.weight_decay,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: c.shuffle_seed,
        };
        let init = arch.init(&mut RngStream::new(c.init_seed));
        let natural = sgd_train(&init, &data, &tc, LossKind::Hinge).unwrap();
        assert_eq!(out.model.params(), natural.model.params());
        assert_eq!(out.trace.clean_loss, natural.loss_trace);
    }

    #[test]
    fn labels_kept_and_range_respected() {
        let data = task(200, 3);
        let arch = Architecture::Linear { input: 21 };
        let mut c = cfg();
        c.beta = 0.5;
        c.range = Some(ValueRange::new(-1.5, 1.5).unwrap());
        let out = learn_robust_dataset(&data, &arch, &c, &RngStream::new(4)).unwrap();
        assert_eq!(out.dataset.labels(), data.labels());
        assert!(out.dataset.features().data().iter().all(|v| (-1.5..=1.5).contains(v)));
        assert_eq!(out.dataset.range(), c.range);
    }

    #[test]
    fn deterministic() {
        let data = task(200, 5);
        let arch = Architecture::mlp(21, &[8], 2);
        let a = learn_robust_dataset(&data, &arch, &cfg(), &RngStream::new(6)).unwrap();
        let b = learn_robust_dataset(&data, &arch, &cfg(), &RngStream::new(6)).unwrap();
        assert_eq!(a.dataset.features(), b.dataset.features());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let data = task(100, 7);
        let other = task(90, 8);
        let arch = Architecture::Linear { input: 21 };
        let err = learn_from(&data, &other, &arch, &cfg(), &RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn modes_coincide_at_zero_gamma_and_meta_is_nonzero() {
        let data = task(32, 9);
        let arch = Architecture::mlp(21, &[6], 2);
        let model = arch.init(&mut RngStream::new(1));
        let x = data.features().clone();
        let x_adv = x.map(|v| v + 0.3);
        let p = model.params().to_vec();
        let kind = LossKind::CrossEntropy;
        for mode in [LearnMode::MetaGradient, LearnMode::Alternating] {
            let (d, _) = step3_direction(mode, &model, kind, 1e-3, 0.0, &p, &p, &x, &x_adv, data.labels()).unwrap();
            assert!(d.data().iter().all(|v| *v == 0.0));
        }
        let (_, g) = model.objective_grad(kind, 1e-3, &x, data.labels()).unwrap();
        let updated: Vec<Tensor> = p
            .iter()
            .zip(&g)
            .map(|(a, b)| a.sub(&b.scale(0.1)).unwrap())
            .collect();
        let (d, _) = step3_direction(LearnMode::MetaGradient, &model, kind, 1e-3, 0.1, &p, &updated, &x, &x_adv, data.labels()).unwrap();
        assert!(d.norm_l2() > 0.0);
    }

    #[test]
    fn constant_source_gives_identity_baseline() {
        let data = task(50, 10);
        let zero = Model::linear(vec![0.0; 21]).unwrap();
        let out = baseline_adv_dataset(&zero, &data, &AttackConfig::linf(0.5), &RngStream::new(0)).unwrap();
        assert_eq!(out.features(), data.features());
    }

    #[test]
    fn tiny_epsilon_adversarial_training_tracks_natural() {
        let data = task(200, 11);
        let arch = Architecture::Linear { input: 21 };
        let init = arch.init(&mut RngStream::new(0));
        let tc = TrainConfig { epochs: 3, ..Default::default() };
        let adv = adversarially_train_reference(&init, &data, &AttackConfig::linf(1e-12), &tc, &RngStream::new(1)).unwrap();
        let nat = sgd_train(&init, &data, &tc, LossKind::Hinge).unwrap();
        for (a, b) in adv.model.params()[0].data().iter().zip(nat.model.params()[0].data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn subsample_examples() {
        let x = Tensor::matrix(100, 1, (0..100).map(f64::from).collect()).unwrap();
        let labels: Vec<i32> = (0..100).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let data = Dataset::new(x, labels, None).unwrap();
        let mut rng = RngStream::new(0);
        let full = subsample(&data, 1.0, &mut rng).unwrap();
        assert_eq!(full.features(), data.features());
        let half = subsample(&data, 0.5, &mut rng).unwrap();
        let counts = half.class_counts();
        assert_eq!(half.len(), 50);
        assert!(counts.values().all(|&c| c.abs_diff(25) <= 1));
        assert!(subsample(&data, 0.0, &mut rng).is_err());
        assert!(subsample(&data, 1.5, &mut rng).is_err());
        let tiny = subsample(&data, 0.013, &mut rng).unwrap();
        assert_eq!(tiny.len(), 2);
    }
}
