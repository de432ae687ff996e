//! Linear soft-margin SVMs, small rectifier MLPs, their losses, and
//! mini-batch SGD with momentum.
//!
//! Labels follow two conventions: `{-1, +1}` for the SVM, and class indices
//! `0..k` for the MLP. A binary MLP also accepts `{-1, +1}`, mapping `-1` to
//! class 0 and `+1` to class 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `max(0, 1 - y wᵀx)`; linear models only.
    Hinge,
    /// Softmax cross-entropy; MLPs only.
    CrossEntropy,
    /// Negated signed score `-y wᵀx`; an attack objective for linear
    /// models whose input gradient never vanishes.
    Margin,
}

/// Shape of a classifier, independent of its parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Linear { input: usize },
    /// Layer widths from input to output; hidden layers use the rectifier.
    Mlp { sizes: Vec<usize> },
}

impl Architecture {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Architecture::Mlp { sizes }
    }

    /// Layer widths as stored in checkpoints; a linear model is `[m, 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        match self {
            Architecture::Linear { input } => vec![*input, 1],
            Architecture::Mlp { sizes } => sizes.clone(),
        }
    }

    pub fn from_layer_sizes(sizes: &[usize]) -> Result<Self> {
        match sizes {
            [m, 1] => Ok(Architecture::Linear { input: *m }),
            s if s.len() >= 2 && *s.last().unwrap() >= 2 && s.iter().all(|&w| w > 0) => {
                Ok(Architecture::Mlp { sizes: s.to_vec() })
            }
            s => Err(Error::param(format!("invalid layer sizes {s:?}"))),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes()[0]
    }

    pub fn default_loss(&self) -> LossKind {
        match self {
            Architecture::Linear { .. } => LossKind::Hinge,
            Architecture::Mlp { .. } => LossKind::CrossEntropy,
        }
    }

    /// Short label such as `linear(21)` or `mlp(2-16-2)`.
    pub fn describe(&self) -> String {
        match self {
            Architecture::Linear { input } => format!("linear({input})"),
            Architecture::Mlp { sizes } => format!(
                "mlp({})",
                sizes
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join("-")
            ),
        }
    }

    /// Parameter shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::Linear { input } => vec![vec![*input]],
            Architecture::Mlp { sizes } => sizes
                .windows(2)
                .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                .collect(),
        }
    }

    /// Fresh parameters: `N(0, 0.01²)` for linear weights, He-normal for MLP
    /// weights with zero biases.
    pub fn init(&self, rng: &mut RngStream) -> Model {
        let params = match self {
            Architecture::Linear { input } => {
                vec![rng.sample_gaussian(0.0, 0.01, &[*input]).expect("valid std")]
            }
            Architecture::Mlp { sizes } => sizes
                .windows(2)
                .flat_map(|w| {
                    let std = (2.0 / w[0] as f64).sqrt();
                    [
                        rng.sample_gaussian(0.0, std, &[w[0], w[1]]).expect("valid std"),
                        Tensor::zeros(&[w[1]]),
                    ]
                })
                .collect(),
        };
        Model {
            arch: self.clone(),
            params,
        }
    }
}

/// A classifier: architecture plus parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

/// Linear classifier `sign(wᵀx)` without a bias term.
pub type LinearClassifier = Model;
/// Rectifier MLP classifier.
pub type MlpClassifier = Model;

impl Model {
    pub fn new(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::contract(format!(
                "parameters do not fit {}",
                arch.describe()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn linear(w: Vec<f64>) -> Result<Self> {
        let m = w.len();
        Self::new(Architecture::Linear { input: m }, vec![Tensor::vector(w)?])
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        *self = Self::new(self.arch.clone(), params)?;
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.arch, Architecture::Linear { .. })
    }

    /// Linear weight vector; `None` for MLPs.
    pub fn weights(&self) -> Option<&[f64]> {
        self.is_linear().then(|| self.params[0].data())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, m) = x.dims2("model input")?;
        if m != self.arch.input_width() {
            return Err(Error::data(format!(
                "feature width {m} does not match {}",
                self.arch.describe()
            )));
        }
        Ok(())
    }

    pub fn check_loss(&self, kind: LossKind) -> Result<()> {
        match (&self.arch, kind) {
            (Architecture::Linear { .. }, LossKind::Hinge | LossKind::Margin)
            | (Architecture::Mlp { .. }, LossKind::CrossEntropy) => Ok(()),
            (a, k) => Err(Error::param(format!(
                "loss {k:?} not defined for {}",
                a.describe()
            ))),
        }
    }

    /// Signed scores `wᵀx` per row (linear) or logits `[n, k]` (MLP).
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        match &self.arch {
            Architecture::Linear { input } => {
                let n = x.value().rows();
                x.matmul(params[0].reshape(&[*input, 1])).reshape(&[n])
            }
            Architecture::Mlp { sizes } => {
                let n = x.value().rows();
                let layers = sizes.len() - 1;
                let mut h = x;
                for l in 0..layers {
                    h = h.matmul(params[2 * l]) + params[2 * l + 1].broadcast_rows(n);
                    if l + 1 < layers {
                        h = h.relu();
                    }
                }
                h
            }
        }
    }

    /// Per-row loss values `[n]` on the tape.
    pub fn per_example_loss<'t>(
        &self,
        kind: LossKind,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: &[i32],
    ) -> Result<Var<'t>> {
        self.check_loss(kind)?;
        self.check_input(&x.value())?;
        if labels.len() != x.value().rows() {
            return Err(Error::data("label count differs from batch rows"));
        }
        let tape = x.tape();
        let scores = self.forward(params, x);
        match kind {
            LossKind::Hinge | LossKind::Margin => {
                let y = tape.constant(Tensor::from_parts(
                    vec![labels.len()],
                    signed_labels(labels)?,
                ));
                let margin = scores * y;
                Ok(match kind {
                    LossKind::Hinge => (-margin).add_scalar(1.0).relu(),
                    _ => -margin,
                })
            }
            LossKind::CrossEntropy => {
                let k = scores.value().cols();
                let onehot = tape.constant(one_hot(labels, k)?);
                Ok(scores.logsumexp_rows() - (scores * onehot).sum_cols())
            }
        }
    }

    /// Mean loss plus `penalty * Σ‖θ‖²` over every parameter tensor.
    pub fn objective<'t>(
        &self,
        kind: LossKind,
        penalty: f64,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: &[i32],
    ) -> Result<Var<'t>> {
        let mut loss = self.per_example_loss(kind, params, x, labels)?.mean();
        if penalty != 0.0 {
            for p in params {
                loss = loss + p.square().sum().scale(penalty);
            }
        }
        Ok(loss)
    }

    /// Non-tape evaluation of [`Model::objective`].
    pub fn objective_value(&self, kind: LossKind, penalty: f64, batch: &Dataset) -> Result<f64> {
        let tape = Tape::new();
        let p = self.tape_params(&tape);
        let x = tape.constant(batch.features().clone());
        let v = self.objective(kind, penalty, &p, x, batch.labels())?;
        tape.check()?;
        Ok(v.item())
    }

    pub fn tape_params<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Value and parameter gradient of [`Model::objective`] on a batch.
    /// Linear hinge uses the closed-form subgradient; everything else goes
    /// through the tape.
    pub fn objective_grad(
        &self,
        kind: LossKind,
        penalty: f64,
        x: &Tensor,
        labels: &[i32],
    ) -> Result<(f64, Vec<Tensor>)> {
        if self.is_linear() && kind == LossKind::Hinge {
            return self.hinge_grad_analytic(penalty, x, labels);
        }
        self.objective_grad_tape(kind, penalty, x, labels)
    }

    pub fn objective_grad_tape(
        &self,
        kind: LossKind,
        penalty: f64,
        x: &Tensor,
        labels: &[i32],
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.tape_params(&tape);
        let xv = tape.constant(x.clone());
        let loss = self.objective(kind, penalty, &p, xv, labels)?;
        let gs = tape.grad(loss, &p)?;
        Ok((loss.item(), gs.iter().map(|g| (*g.value()).clone()).collect()))
    }

    fn hinge_grad_analytic(
        &self,
        penalty: f64,
        x: &Tensor,
        labels: &[i32],
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(x)?;
        let ys = signed_labels(labels)?;
        if ys.len() != x.rows() {
            return Err(Error::data("label count differs from batch rows"));
        }
        let w = self.params[0].data();
        let n = ys.len().max(1) as f64;
        let mut g = vec![0.0; w.len()];
        let mut loss = 0.0;
        for (i, &y) in ys.iter().enumerate() {
            let row = x.row(i);
            let margin = y * dot(w, row);
            if margin < 1.0 {
                loss += 1.0 - margin;
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj -= y * xj / n;
                }
            }
        }
        loss /= n;
        let sq: f64 = w.iter().map(|v| v * v).sum();
        loss += penalty * sq;
        for (gj, wj) in g.iter_mut().zip(w) {
            *gj += 2.0 * penalty * wj;
        }
        Ok((loss, vec![Tensor::from_parts(vec![w.len()], g)]))
    }

    /// Per-row gradient of the loss with respect to the inputs, and the
    /// per-row loss values.
    pub fn input_grad(&self, kind: LossKind, x: &Tensor, labels: &[i32]) -> Result<(Tensor, Vec<f64>)> {
        self.check_loss(kind)?;
        self.check_input(x)?;
        if let (Architecture::Linear { .. }, Some(w)) = (&self.arch, self.weights()) {
            let ys = signed_labels(labels)?;
            let (n, m) = (x.rows(), x.cols());
            let mut g = vec![0.0; n * m];
            let mut losses = Vec::with_capacity(n);
            for (i, &y) in ys.iter().enumerate() {
                let margin = y * dot(w, x.row(i));
                let active = match kind {
                    LossKind::Hinge => margin < 1.0,
                    _ => true,
                };
                losses.push(match kind {
                    LossKind::Hinge => (1.0 - margin).max(0.0),
                    _ => -margin,
                });
                if active {
                    for (gj, wj) in g[i * m..(i + 1) * m].iter_mut().zip(w) {
                        *gj = -y * wj;
                    }
                }
            }
            return Ok((Tensor::from_parts(vec![n, m], g), losses));
        }
        let tape = Tape::new();
        let p: Vec<Var<'_>> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.var(x.clone());
        let per = self.per_example_loss(kind, &p, xv, labels)?;
        let g = tape.grad(per.sum(), &[xv])?;
        Ok(((*g[0].value()).clone(), per.value().data().to_vec()))
    }

    /// Raw scores: `[n]` signed scores (linear) or `[n, k]` logits (MLP).
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        match &self.arch {
            Architecture::Linear { input } => {
                let w = self.params[0].data();
                let n = x.rows();
                let _ = input;
                Ok(Tensor::from_parts(
                    vec![n],
                    (0..n).map(|i| dot(w, x.row(i))).collect(),
                ))
            }
            Architecture::Mlp { sizes } => {
                let layers = sizes.len() - 1;
                let mut h = x.clone();
                for l in 0..layers {
                    let mut z = h.matmul(&self.params[2 * l])?;
                    let b = self.params[2 * l + 1].data();
                    let width = b.len();
                    for row in z.data_mut().chunks_mut(width) {
                        for (v, bj) in row.iter_mut().zip(b) {
                            *v += bj;
                        }
                    }
                    if l + 1 < layers {
                        z = z.map(|v| v.max(0.0));
                    }
                    h = z;
                }
                Ok(h)
            }
        }
    }

    /// Whether each row is classified correctly. A linear score of exactly 0
    /// counts as wrong; MLP ties resolve to the lowest class index.
    pub fn correct(&self, x: &Tensor, labels: &[i32]) -> Result<Vec<bool>> {
        let s = self.scores(x)?;
        if labels.len() != x.rows() {
            return Err(Error::data("label count differs from rows"));
        }
        match &self.arch {
            Architecture::Linear { .. } => {
                let ys = signed_labels(labels)?;
                Ok(ys.iter().zip(s.data()).map(|(y, v)| y * v > 0.0).collect())
            }
            Architecture::Mlp { .. } => {
                let k = s.cols();
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let c = class_index(y, k)?;
                        let row = s.row(i);
                        let best = row
                            .iter()
                            .enumerate()
                            .fold(0usize, |b, (j, v)| if *v > row[b] { j } else { b });
                        Ok(best == c)
                    })
                    .collect()
            }
        }
    }
}

pub fn signed_labels(labels: &[i32]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&y| match y {
            1 => Ok(1.0),
            -1 => Ok(-1.0),
            other => Err(Error::data(format!("label {other} outside {{-1, +1}}"))),
        })
        .collect()
}

/// Class index of a label for a `k`-way MLP.
pub fn class_index(label: i32, k: usize) -> Result<usize> {
    let c = if label == -1 && k == 2 { 0 } else { label };
    if c < 0 || c as usize >= k {
        return Err(Error::data(format!("class {label} out of range for {k} classes")));
    }
    Ok(c as usize)
}

fn one_hot(labels: &[i32], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + class_index(y, k)?] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), k], data))
}

/// Mean hinge loss plus `lambda * ‖w‖²`.
pub fn hinge_objective(model: &Model, batch: &Dataset, lambda: f64) -> Result<f64> {
    if !model.is_linear() {
        return Err(Error::param("hinge objective needs a linear model"));
    }
    model.objective_value(LossKind::Hinge, lambda, batch)
}

/// Mean softmax cross-entropy of the true class.
pub fn cross_entropy(model: &Model, batch: &Dataset) -> Result<f64> {
    model.objective_value(LossKind::CrossEntropy, 0.0, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Coefficient λ of the `λ‖θ‖²` penalty; its gradient is `2λθ`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean mini-batch objective per epoch.
    pub loss_trace: Vec<f64>,
}

/// Momentum state shared by natural and adversarial training loops.
pub(crate) struct Momentum {
    velocity: Vec<Tensor>,
}

impl Momentum {
    pub(crate) fn new(model: &Model) -> Self {
        Self {
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `v ← μv + g; θ ← θ − lr·v`.
    pub(crate) fn step(&mut self, model: &mut Model, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        let mut params = model.params().to_vec();
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = cfg.momentum * *vi + gi;
            }
            p.axpy(-cfg.lr, v)?;
        }
        model.set_params(params)
    }
}

/// Mini-batch index lists for one epoch.
pub(crate) fn epoch_batches(rng: &mut RngStream, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Natural training by mini-batch SGD with classical momentum.
pub fn sgd_train(model: &Model, dataset: &Dataset, cfg: &TrainConfig, loss: LossKind) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.ensure_nonempty()?;
    model.check_loss(loss)?;
    let mut model = model.clone();
    let mut momentum = Momentum::new(&model);
    let mut rng = RngStream::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(&mut rng, dataset.len(), cfg.batch_size);
        for idx in &batches {
            let x = dataset.features().select_rows(idx);
            let labels: Vec<i32> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let (l, g) = model.objective_grad(loss, cfg.weight_decay, &x, &labels)?;
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

const SHARD: usize = 2048;

/// Fraction of rows classified correctly. Sharded across threads; the count
/// is an integer sum, so the result does not depend on sharding.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    dataset.ensure_nonempty()?;
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(SHARD).collect();
    let counts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + SHARD).min(n)).collect();
            let x = dataset.features().select_rows(&idx);
            let ok = model.correct(&x, &dataset.labels()[s..s + idx.len()])?;
            Ok(ok.iter().filter(|b| **b).count())
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / n as f64)
}

/// Generic-tape hinge objective, used to cross-check the closed-form path.
pub fn hinge_objective_tape(w: &Tensor, x: &Tensor, labels: &[i32], lambda: f64) -> Result<(f64, Tensor)> {
    let model = Model::new(Architecture::Linear { input: w.len() }, vec![w.clone()])?;
    let (v, g) = autodiff::grad(
        |_t, p| {
            let xv = p[0].tape().constant(x.clone());
            model.objective(LossKind::Hinge, lambda, p, xv, labels)
        },
        std::slice::from_ref(w),
    )?;
    Ok((v, g.into_iter().next().unwrap()))
}
