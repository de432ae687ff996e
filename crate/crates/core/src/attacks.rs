//! Projected gradient adversaries under ℓ∞ and ℓ2 threat models, and
//! robust-accuracy evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ValueRange};
use crate::error::{Error, Result};
use crate::models::{LossKind, Model};
use crate::rng::RngStream;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    /// PGD step size.
    pub alpha: f64,
    pub steps: usize,
    /// Applied after the ball projection.
    pub range: Option<ValueRange>,
    /// Start from a uniform point of the ball instead of the clean input.
    pub random_start: bool,
}

impl AttackConfig {
    /// `alpha = epsilon / 10`, ten steps, clean start.
    pub fn new(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            alpha: epsilon / 10.0,
            steps: 10,
            range: None,
            random_start: false,
        }
    }

    pub fn linf(epsilon: f64) -> Self {
        Self::new(Norm::Linf, epsilon)
    }

    pub fn l2(epsilon: f64) -> Self {
        Self::new(Norm::L2, epsilon)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_range(mut self, range: Option<ValueRange>) -> Self {
        self.range = range;
        self
    }

    /// Same attack at another budget, keeping the `alpha / epsilon` ratio.
    pub fn with_budget(&self, epsilon: f64) -> Self {
        let mut c = self.clone();
        c.alpha = self.alpha / self.epsilon * epsilon;
        c.epsilon = epsilon;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps < 1 {
            return Err(Error::param("attack needs at least one step"));
        }
        Ok(())
    }
}

/// A rank-1 tensor is one example; higher ranks hold one example per row.
fn example_width(x: &Tensor) -> usize {
    if x.shape().len() < 2 {
        x.len().max(1)
    } else {
        x.cols().max(1)
    }
}

/// Projects each row of `x` onto the threat ball around the matching row of
/// `center`, then clamps into the value range.
pub fn project_to_ball(x: &Tensor, center: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    x.expect_same_shape(center)?;
    let mut out = x.clone();
    let width = example_width(x);
    let eps = cfg.epsilon;
    for (row, c) in out
        .data_mut()
        .chunks_mut(width)
        .zip(center.data().chunks(width))
    {
        match cfg.norm {
            Norm::Linf => {
                for (v, &ci) in row.iter_mut().zip(c) {
                    *v = v.clamp(ci - eps, ci + eps);
                }
            }
            Norm::L2 => {
                let dist = row
                    .iter()
                    .zip(c)
                    .map(|(v, ci)| (v - ci).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist > eps {
                    let k = eps / dist;
                    for (v, &ci) in row.iter_mut().zip(c) {
                        *v = ci + (*v - ci) * k;
                    }
                }
            }
        }
        if let Some(r) = cfg.range {
            for v in row.iter_mut() {
                *v = r.clamp(*v);
            }
        }
    }
    Ok(out)
}

/// Attack objective used for evaluation: margin for linear models (so flat
/// hinge regions cannot stall the attack), cross-entropy for MLPs.
pub fn default_attack_loss(model: &Model) -> LossKind {
    if model.is_linear() {
        LossKind::Margin
    } else {
        LossKind::CrossEntropy
    }
}

fn random_start(x_nat: &Tensor, cfg: &AttackConfig, rng: &mut RngStream) -> Result<Tensor> {
    let mut x = x_nat.clone();
    let width = example_width(&x);
    for row in x.data_mut().chunks_mut(width) {
        match cfg.norm {
            Norm::Linf => {
                for v in row.iter_mut() {
                    *v += cfg.epsilon * (2.0 * rng.uniform() - 1.0);
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..row.len()).map(|_| rng.standard_normal()).collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
                let radius = cfg.epsilon * rng.uniform().powf(1.0 / row.len() as f64);
                for (v, d) in row.iter_mut().zip(dir) {
                    *v += radius * d / norm;
                }
            }
        }
    }
    project_to_ball(&x, x_nat, cfg)
}

/// PGD on a batch of inputs (one example per row). Rows are attacked
/// independently; sign(0) = 0, so zero-gradient coordinates never move.
pub fn pgd_attack(
    model: &Model,
    x_nat: &Tensor,
    labels: &[i32],
    cfg: &AttackConfig,
    loss: LossKind,
    rng: &mut RngStream,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = if cfg.random_start {
        random_start(x_nat, cfg, rng)?
    } else {
        x_nat.clone()
    };
    let width = example_width(&x);
    for _ in 0..cfg.steps {
        let (g, _) = model.input_grad(loss, &x, labels)?;
        for (row, grow) in x.data_mut().chunks_mut(width).zip(g.data().chunks(width)) {
            match cfg.norm {
                Norm::Linf => {
                    for (v, gi) in row.iter_mut().zip(grow) {
                        *v += cfg.alpha * sign(*gi);
                    }
                }
                Norm::L2 => {
                    let gn = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn > 0.0 {
                        for (v, gi) in row.iter_mut().zip(grow) {
                            *v += cfg.alpha * gi / gn;
                        }
                    }
                }
            }
        }
        x = project_to_ball(&x, x_nat, cfg)?;
    }
    Ok(x)
}

const SHARD: usize = 1024;

/// Attacks every row of `dataset` at each budget in `budgets`. A row counts
/// as robust at a budget only if it is classified correctly at its clean
/// input and at every adversarial point found at that or any smaller budget
/// (all of which lie inside the larger ball). Returned in `budgets` order.
pub fn robust_accuracy_grid(
    model: &Model,
    dataset: &Dataset,
    template: &AttackConfig,
    budgets: &[f64],
    rng: &RngStream,
) -> Result<Vec<f64>> {
    dataset.ensure_nonempty()?;
    template.validate()?;
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by(|&a, &b| budgets[a].total_cmp(&budgets[b]));
    let configs: Vec<AttackConfig> = budgets.iter().map(|&e| template.with_budget(e)).collect();
    for c in &configs {
        c.validate()?;
    }
    let loss = default_attack_loss(model);
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(SHARD).collect();
    let per_shard = starts
        .par_iter()
        .enumerate()
        .map(|(shard, &s)| {
            let mut shard_rng = rng.derive(shard as u64);
            let idx: Vec<usize> = (s..(s + SHARD).min(n)).collect();
            let x = dataset.features().select_rows(&idx);
            let labels = &dataset.labels()[s..s + idx.len()];
            let mut alive = model.correct(&x, labels)?;
            let mut counts = vec![0usize; budgets.len()];
            for &b in &order {
                let adv = pgd_attack(model, &x, labels, &configs[b], loss, &mut shard_rng)?;
                let ok = model.correct(&adv, labels)?;
                for (a, o) in alive.iter_mut().zip(ok) {
                    *a &= o;
                }
                counts[b] = alive.iter().filter(|v| **v).count();
            }
            Ok(counts)
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok((0..budgets.len())
        .map(|b| per_shard.iter().map(|c| c[b]).sum::<usize>() as f64 / n as f64)
        .collect())
}

/// Fraction of rows still classified correctly after a PGD attack.
pub fn robust_accuracy(model: &Model, dataset: &Dataset, cfg: &AttackConfig, rng: &RngStream) -> Result<f64> {
    Ok(robust_accuracy_grid(model, dataset, cfg, &[cfg.epsilon], rng)?[0])
}

/// PGD adversarial examples for every row of `dataset`; labels unchanged.
pub fn attack_dataset(model: &Model, dataset: &Dataset, cfg: &AttackConfig, loss: LossKind, rng: &RngStream) -> Result<Dataset> {
    cfg.validate()?;
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(SHARD).collect();
    let chunks = starts
        .par_iter()
        .enumerate()
        .map(|(shard, &s)| {
            let mut shard_rng = rng.derive(shard as u64);
            let idx: Vec<usize> = (s..(s + SHARD).min(n)).collect();
            let x = dataset.features().select_rows(&idx);
            pgd_attack(model, &x, &dataset.labels()[s..s + idx.len()], cfg, loss, &mut shard_rng)
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let mut data = Vec::with_capacity(dataset.features().len());
    for c in chunks {
        data.extend(c.into_data());
    }
    let mut out = dataset.clone();
    out.replace_features(Tensor::new(dataset.features().shape().to_vec(), data)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Model};

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let c = v(&[0.0, 0.0]);
        let inside = v(&[0.05, -0.02]);
        assert_eq!(project_to_ball(&inside, &c, &AttackConfig::linf(0.1)).unwrap(), inside);
        let p = project_to_ball(&v(&[0.5, -0.05]), &c, &AttackConfig::linf(0.1)).unwrap();
        assert_eq!(p.data(), &[0.1, -0.05]);
        let p = project_to_ball(&v(&[3.0, 4.0]), &c, &AttackConfig::l2(1.0)).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15 && (p.data()[1] - 0.8).abs() < 1e-15);
        assert!(project_to_ball(&v(&[1.0]), &c, &AttackConfig::linf(0.1)).is_err());
    }

    #[test]
    fn range_clamp_after_projection() {
        let cfg = AttackConfig::linf(0.3).with_range(Some(ValueRange::new(0.0, 1.0).unwrap()));
        let p = project_to_ball(&v(&[1.5, -0.5]), &v(&[0.9, 0.1]), &cfg).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_model_does_not_move_inputs() {
        let arch = Architecture::mlp(3, &[4], 2);
        let zeros: Vec<Tensor> = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let m = Model::new(arch, zeros).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let adv = pgd_attack(&m, &x, &[0, 1], &AttackConfig::linf(0.5), LossKind::CrossEntropy, &mut RngStream::new(0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn single_fgsm_step_reproduces_sign_formula() {
        let w = [0.5, -1.0, 0.0, 2.0];
        let m = Model::linear(w.to_vec()).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, -0.1]).unwrap();
        let eps = 0.05;
        let cfg = AttackConfig::linf(eps).with_steps(1).with_alpha(eps);
        for loss in [LossKind::Hinge, LossKind::Margin] {
            let adv = pgd_attack(&m, &x, &[1], &cfg, loss, &mut RngStream::new(0)).unwrap();
            for j in 0..4 {
                let expect = x.data()[j] - eps * sign(w[j]);
                assert!((adv.data()[j] - expect).abs() < 1e-15);
            }
        }
    }

    fn hinge(w: &[f64], x: &[f64], y: f64) -> f64 {
        (1.0 - y * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
    }

    #[test]
    fn linear_pgd_reaches_the_best_corner() {
        let mut rng = RngStream::new(31);
        let d = 8;
        for trial in 0..20 {
            let w: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let y = rng.rademacher() as f64;
            let eps = 0.05 + 0.5 * rng.uniform();
            let m = Model::linear(w.clone()).unwrap();
            let xt = Tensor::matrix(1, d, x.clone()).unwrap();
            let steps = 1 + trial % 5;
            let cfg = AttackConfig::linf(eps).with_steps(steps).with_alpha(eps / steps as f64 * 1.5);
            let adv = pgd_attack(&m, &xt, &[y as i32], &cfg, LossKind::Margin, &mut RngStream::new(0)).unwrap();
            let attained = hinge(&w, adv.data(), y);
            let mut best = f64::NEG_INFINITY;
            for mask in 0u32..(1 << d) {
                let corner: Vec<f64> = (0..d)
                    .map(|j| x[j] + if mask >> j & 1 == 1 { eps } else { -eps })
                    .collect();
                best = best.max(hinge(&w, &corner, y));
            }
            assert!((attained - best).abs() < 1e-9, "trial {trial}: {attained} vs {best}");
        }
    }

    #[test]
    fn outputs_stay_feasible() {
        let mut rng = RngStream::new(4);
        let m = Architecture::mlp(5, &[8], 3).init(&mut rng);
        let x = rng.sample_gaussian(0.5, 0.3, &[20, 5]).unwrap();
        let x = x.map(|v| v.clamp(0.0, 1.0));
        let y: Vec<i32> = (0..20).map(|i| (i % 3) as i32).collect();
        let range = Some(ValueRange::new(0.0, 1.0).unwrap());
        for cfg in [AttackConfig::linf(0.1), AttackConfig::l2(0.5)] {
            let mut cfg = cfg.with_range(range);
            cfg.random_start = true;
            let adv = pgd_attack(&m, &x, &y, &cfg, LossKind::CrossEntropy, &mut rng).unwrap();
            for i in 0..20 {
                let off: Vec<f64> = adv.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
                let dist = match cfg.norm {
                    Norm::Linf => off.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    Norm::L2 => off.iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
                assert!(dist <= cfg.epsilon + 1e-9);
                assert!(adv.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn first_step_does_not_lower_loss() {
        let mut rng = RngStream::new(9);
        let m = Architecture::mlp(4, &[6], 2).init(&mut rng);
        let x = rng.sample_gaussian(0.0, 1.0, &[30, 4]).unwrap();
        let y: Vec<i32> = (0..30).map(|i| (i % 2) as i32).collect();
        let cfg = AttackConfig::linf(1e-4).with_steps(1).with_alpha(1e-4);
        let adv = pgd_attack(&m, &x, &y, &cfg, LossKind::CrossEntropy, &mut rng).unwrap();
        let (_, before) = m.input_grad(LossKind::CrossEntropy, &x, &y).unwrap();
        let (_, after) = m.input_grad(LossKind::CrossEntropy, &adv, &y).unwrap();
        for (b, a) in before.iter().zip(after) {
            assert!(a >= b - 1e-12);
        }
    }

    #[test]
    fn tiny_budget_matches_clean_accuracy_and_never_exceeds_it() {
        let mut rng = RngStream::new(12);
        let m = Architecture::mlp(3, &[8], 2).init(&mut rng);
        let x = rng.sample_gaussian(0.0, 1.0, &[500, 3]).unwrap();
        let y: Vec<i32> = (0..500).map(|_| (rng.next_u64() % 2) as i32).collect();
        let d = Dataset::new(x, y, None).unwrap();
        let clean = crate::models::accuracy(&m, &d).unwrap();
        let r0 = robust_accuracy(&m, &d, &AttackConfig::linf(1e-9), &rng).unwrap();
        assert_eq!(r0, clean);
        let grid = [0.01, 0.05, 0.1, 0.3, 0.6];
        let rs = robust_accuracy_grid(&m, &d, &AttackConfig::linf(0.1), &grid, &rng).unwrap();
        for w in rs.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(rs.iter().all(|r| *r <= clean + 1e-12));
    }
}
