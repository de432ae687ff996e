//! Reverse-mode differentiation on a recording tape.
//!
//! The backward pass is itself expressed with tape operations, so gradients
//! returned by [`Tape::grad`] are ordinary [`Var`]s that can be differentiated
//! again. That is all the machinery needed to push a data gradient through a
//! gradient-descent parameter update.
//!
//! Shape errors inside graph construction are programming errors and panic;
//! non-finite intermediate values are recorded on the tape and surface as
//! [`Error::NonFinite`] from [`Tape::grad`] and [`Tape::check`].

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    /// Full reduction to shape `[1]`.
    Sum(usize),
    /// `[1]` broadcast to the stored shape.
    Expand(usize),
    /// `[n, m] -> [m]`.
    SumRows(usize),
    /// `[m] -> [n, m]`.
    BroadcastRows(usize),
    /// `[n, m] -> [n]`.
    SumCols(usize),
    /// `[n] -> [n, m]`.
    BroadcastCols(usize),
    /// Row-wise log-sum-exp, `[n, m] -> [n]`.
    LogSumExpRows(usize),
    Reshape(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Relu(a)
            | Exp(a)
            | Sum(a)
            | Expand(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | LogSumExpRows(a)
            | Reshape(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<String>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Alias of [`Tape::var`]; reads better for values never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value)
    }

    /// First non-finite fault recorded, if any.
    pub fn check(&self) -> Result<()> {
        match self.fault.borrow().as_ref() {
            Some(what) => Err(Error::NonFinite(what.clone())),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, what: &'static str) -> Var<'_> {
        if !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(format!("tape op `{what}`"));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn wrap(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned handles live on this tape and may be differentiated again.
    /// Inputs that `output` does not depend on get a zero constant.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        assert!(std::ptr::eq(output.tape, self), "output from another tape");
        let out_val = self.value(output.id);
        if out_val.len() != 1 {
            return Err(Error::contract(format!(
                "grad needs a scalar objective, got shape {:?}",
                out_val.shape()
            )));
        }
        self.check()?;
        let n = output.id + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] && nodes[i].op.parents().iter().flatten().any(|&p| needs[p]) {
                    needs[i] = true;
                }
            }
        }
        let mut adj: Vec<Option<usize>> = vec![None; n];
        if needs[output.id] {
            adj[output.id] = Some(self.constant(Tensor::full(out_val.shape(), 1.0)).id);
        }
        for i in (0..n).rev() {
            let Some(g_id) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let g = self.wrap(g_id);
            let mut contribs: Vec<(usize, Var<'t>)> = Vec::with_capacity(2);
            let mut emit = |p: usize, f: &dyn Fn() -> Var<'t>| {
                if needs[p] {
                    contribs.push((p, f()));
                }
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    emit(a, &|| g);
                    emit(b, &|| g);
                }
                Op::Sub(a, b) => {
                    emit(a, &|| g);
                    emit(b, &|| -g);
                }
                Op::Mul(a, b) => {
                    emit(a, &|| g * self.wrap(b));
                    emit(b, &|| g * self.wrap(a));
                }
                Op::Neg(a) => emit(a, &|| -g),
                Op::Scale(a, k) => emit(a, &|| g.scale(k)),
                Op::AddScalar(a) => emit(a, &|| g),
                Op::MatMul(a, b) => {
                    emit(a, &|| g.matmul(self.wrap(b).t()));
                    emit(b, &|| self.wrap(a).t().matmul(g));
                }
                Op::Transpose(a) => emit(a, &|| g.t()),
                Op::Relu(a) => emit(a, &|| {
                    let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    g * self.constant(mask)
                }),
                Op::Exp(a) => emit(a, &|| g * self.wrap(i)),
                Op::Sum(a) => emit(a, &|| g.expand(self.value(a).shape())),
                Op::Expand(a) => emit(a, &|| g.sum()),
                Op::SumRows(a) => emit(a, &|| g.broadcast_rows(self.value(a).rows())),
                Op::BroadcastRows(a) => emit(a, &|| g.sum_rows()),
                Op::SumCols(a) => emit(a, &|| g.broadcast_cols(self.value(a).cols())),
                Op::BroadcastCols(a) => emit(a, &|| g.sum_cols()),
                Op::LogSumExpRows(a) => emit(a, &|| {
                    let x = self.wrap(a);
                    let m = self.value(a).cols();
                    let softmax = (x - self.wrap(i).broadcast_cols(m)).exp();
                    g.broadcast_cols(m) * softmax
                }),
                Op::Reshape(a) => emit(a, &|| g.reshape(self.value(a).shape())),
            }
            for (p, c) in contribs {
                adj[p] = Some(match adj[p] {
                    None => c.id,
                    Some(prev) => (self.wrap(prev) + c).id,
                });
            }
        }
        self.check()?;
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(id) => self.wrap(id),
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-entry variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn binary(self, other: Var<'t>, op: Op, what: &'static str, f: fn(f64, f64) -> f64) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "{what}: vars from different tapes");
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what);
        let v = a.zip_map(&b, f).expect("shapes checked");
        self.tape.push(v, op, what)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.tape.push(v, Op::Scale(self.id, k), "scale")
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x + k);
        self.tape.push(v, Op::AddScalar(self.id), "add_scalar")
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self
            .value()
            .matmul(&other.value())
            .unwrap_or_else(|e| panic!("matmul: {e}"));
        self.tape.push(v, Op::MatMul(self.id, other.id), "matmul")
    }

    /// Rank-2 transpose.
    pub fn t(self) -> Var<'t> {
        let v = self
            .value()
            .transpose()
            .unwrap_or_else(|e| panic!("transpose: {e}"));
        self.tape.push(v, Op::Transpose(self.id), "transpose")
    }

    /// Rectifier; its derivative at exactly 0 is taken as 0.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id), "relu")
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.push(v, Op::Exp(self.id), "exp")
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), 1, "expand: source must be a scalar");
        let v = Tensor::full(shape, x.data()[0]);
        self.tape.push(v, Op::Expand(self.id), "expand")
    }

    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let (n, m) = x.dims2("sum_rows").unwrap_or_else(|e| panic!("{e}"));
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.tape
            .push(Tensor::from_parts(vec![m], out), Op::SumRows(self.id), "sum_rows")
    }

    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 1, "broadcast_rows: source must be rank-1");
        let m = x.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        self.tape.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BroadcastRows(self.id),
            "broadcast_rows",
        )
    }

    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let (n, _) = x.dims2("sum_cols").unwrap_or_else(|e| panic!("{e}"));
        let out = (0..n).map(|i| x.row(i).iter().sum()).collect();
        self.tape
            .push(Tensor::from_parts(vec![n], out), Op::SumCols(self.id), "sum_cols")
    }

    pub fn broadcast_cols(self, m: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 1, "broadcast_cols: source must be rank-1");
        let n = x.len();
        let mut out = Vec::with_capacity(n * m);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, m));
        }
        self.tape.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BroadcastCols(self.id),
            "broadcast_cols",
        )
    }

    /// Numerically stable row-wise `log(sum(exp(.)))`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.value();
        let (n, _) = x.dims2("logsumexp_rows").unwrap_or_else(|e| panic!("{e}"));
        let out = (0..n)
            .map(|i| {
                let row = x.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        self.tape.push(
            Tensor::from_parts(vec![n], out),
            Op::LogSumExpRows(self.id),
            "logsumexp_rows",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.tape
            .push(v, Op::Reshape(self.id), "reshape")
    }

    /// `sum(self * other)`.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), "mul", |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.tape.push(v, Op::Neg(self.id), "neg")
    }
}

/// Objective over a list of inputs, built on a fresh tape.
pub trait Objective: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}
impl<F> Objective for F where F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}

/// Value and gradient of `objective` at `inputs`.
pub fn grad<F: Objective>(objective: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = objective(&tape, &vars)?;
    let gs = tape.grad(out, &vars)?;
    Ok((out.item(), gs.iter().map(|g| (*g.value()).clone()).collect()))
}

/// Evaluates `objective` without differentiating.
pub fn evaluate<F: Objective>(objective: &F, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = objective(&tape, &vars)?;
    tape.check()?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "objective must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Training loss `L(params, data)` used for a one-step parameter update.
pub trait ParamDataLoss: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Result<Var<'t>> {}
impl<F> ParamDataLoss for F where F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Result<Var<'t>> {}

/// Loss of the parameters alone (data held fixed inside the closure).
pub trait ParamLoss: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}
impl<F> ParamLoss for F where F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> {}

/// First-order pieces of a one-step update at `(params, data)`.
pub struct ParamStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Loss value and `∇_params train_loss(params, data)`.
pub fn param_grad<F: ParamDataLoss>(
    train_loss: &F,
    params: &[Tensor],
    data: &Tensor,
) -> Result<ParamStep> {
    let tape = Tape::new();
    let p: Vec<Var<'_>> = params.iter().map(|t| tape.var(t.clone())).collect();
    let x = tape.constant(data.clone());
    let loss = train_loss(&tape, &p, x)?;
    let gs = tape.grad(loss, &p)?;
    Ok(ParamStep {
        loss: loss.item(),
        grads: gs.iter().map(|g| (*g.value()).clone()).collect(),
    })
}

/// `∇_data ⟨∇_params train_loss(params, data), cotangent⟩`, with the
/// cotangent held constant. This is the mixed second derivative applied to a
/// vector, obtained by differentiating the recorded gradient graph.
pub fn mixed_vjp<F: ParamDataLoss>(
    train_loss: &F,
    params: &[Tensor],
    data: &Tensor,
    cotangent: &[Tensor],
) -> Result<Tensor> {
    if cotangent.len() != params.len() {
        return Err(Error::contract("cotangent count differs from param count"));
    }
    let tape = Tape::new();
    let p: Vec<Var<'_>> = params.iter().map(|t| tape.var(t.clone())).collect();
    let x = tape.var(data.clone());
    let loss = train_loss(&tape, &p, x)?;
    let gs = tape.grad(loss, &p)?;
    let mut inner: Option<Var<'_>> = None;
    for (g, c) in gs.iter().zip(cotangent) {
        g.value().expect_same_shape(c)?;
        let term = g.dot(tape.constant(c.clone()));
        inner = Some(match inner {
            None => term,
            Some(acc) => acc + term,
        });
    }
    let Some(inner) = inner else {
        return Ok(Tensor::zeros(data.shape()));
    };
    let dx = tape.grad(inner, &[x])?;
    Ok((*dx[0].value()).clone())
}

/// Result of [`unrolled_grad`].
pub struct Unrolled {
    /// `params - lr * ∇_params train_loss`.
    pub updated_params: Vec<Tensor>,
    /// `∇_data adv_loss(updated_params(data))`.
    pub data_grad: Tensor,
    pub train_loss: f64,
    pub adv_loss: f64,
}

/// Gradient of `adv_loss` at the one-step-updated parameters, taken with
/// respect to the data the update was computed from.
pub fn unrolled_grad<FT: ParamDataLoss, FA: ParamLoss>(
    train_loss: FT,
    adv_loss: FA,
    params: &[Tensor],
    data: &Tensor,
    lr: f64,
) -> Result<Unrolled> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::param(format!("learning rate must be > 0, got {lr}")));
    }
    let step = param_grad(&train_loss, params, data)?;
    let updated: Vec<Tensor> = params
        .iter()
        .zip(&step.grads)
        .map(|(p, g)| {
            let mut q = p.clone();
            q.axpy(-lr, g).map(|_| q)
        })
        .collect::<Result<_>>()?;
    let (adv, adv_grads) = grad(&adv_loss, &updated)?;
    let dx = mixed_vjp(&train_loss, params, data, &adv_grads)?;
    Ok(Unrolled {
        updated_params: updated,
        data_grad: dx.scale(-lr),
        train_loss: step.loss,
        adv_loss: adv,
    })
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Max of `|a - b| / max(|a|, |b|, 1e-8)` over comparable entries.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Entries where one-sided slopes disagree, i.e. a kink lies within one
    /// step of the point.
    pub non_comparable: Vec<usize>,
    pub compared: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn compare_central_differences(
    f: impl Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::param(format!("finite-difference step must be > 0, got {step}")));
    }
    point.expect_same_shape(analytic)?;
    let f0 = f(point)?;
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        non_comparable: Vec::new(),
        compared: 0,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        if (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()).max(1.0) {
            report.non_comparable.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * step);
        let err = relative_error(central, analytic.data()[i]);
        report.compared += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Checks the tape gradient of a single-input objective against central
/// differences with the given step.
pub fn finite_diff_check<F>(objective: F, point: &Tensor, step: f64) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let wrapped = objective_fn(|t, v| objective(t, v[0]));
    let (_, g) = grad(&wrapped, std::slice::from_ref(point))?;
    compare_central_differences(
        |x| evaluate(&wrapped, std::slice::from_ref(x)),
        point,
        &g[0],
        step,
    )
}

/// Pins a closure to the [`Objective`] signature so lifetimes infer.
pub fn objective_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn square_derivative() {
        let (v, g) = grad(|_t, x| Ok(x[0].square().sum()), &[s(3.0)]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn hinge_flat_region_has_zero_gradient() {
        let x = Tensor::vector(vec![2.0, 0.5]).unwrap();
        let w = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let (_, g) = grad(
            |t, v| {
                let margin = v[0].dot(t.constant(x.clone()));
                Ok((-margin).add_scalar(1.0).relu().sum())
            },
            &[w],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn hinge_kink_has_zero_subgradient() {
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let w = Tensor::vector(vec![1.0, 3.0]).unwrap();
        let (_, g) = grad(
            |t, v| Ok((-v[0].dot(t.constant(x.clone()))).add_scalar(1.0).relu().sum()),
            &[w],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_objective_is_contract_error() {
        let r = grad(|_t, x| Ok(x[0]), &[Tensor::zeros(&[3])]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_reported() {
        let r = grad(|_t, x| Ok(x[0].exp().sum()), &[s(1000.0)]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.var(s(2.0));
        let y = (x * x * x).sum();
        let dx = tape.grad(y, &[x]).unwrap()[0];
        assert_eq!(dx.item(), 12.0);
        let ddx = tape.grad(dx.sum(), &[x]).unwrap()[0];
        assert_eq!(ddx.item(), 12.0);
    }

    #[test]
    fn second_derivative_through_logsumexp() {
        // d²/dx² log(e^x + e^0) = σ(x)(1-σ(x))
        let tape = Tape::new();
        let x = tape.var(s(0.3));
        let z = tape.constant(s(0.0));
        let pair = x.reshape(&[1, 1]);
        let row = crate::autodiff::tests::hcat(&tape, pair, z.reshape(&[1, 1]));
        let y = row.logsumexp_rows().sum();
        let dx = tape.grad(y, &[x]).unwrap()[0];
        let ddx = tape.grad(dx.sum(), &[x]).unwrap()[0].item();
        let sig = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((dx.item() - sig).abs() < 1e-15);
        assert!((ddx - sig * (1.0 - sig)).abs() < 1e-15);
    }

    // [a | b] for two [1,1] vars, via matmul with constant selectors.
    fn hcat<'t>(tape: &'t Tape, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let ea = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let eb = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        a.matmul(ea) + b.matmul(eb)
    }

    #[test]
    fn fd_cube_and_kink() {
        let r = finite_diff_check(|_t, x| Ok((x * x * x).sum()), &s(2.0), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        assert!(r.non_comparable.is_empty());

        // hinge exactly at margin 1
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let w = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let r = finite_diff_check(
            move |t, v| Ok((-v.dot(t.constant(x.clone()))).add_scalar(1.0).relu().sum()),
            &w,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.non_comparable, vec![0]);
    }

    #[test]
    fn fd_quadratic_form_20d() {
        let mut rng = RngStream::new(11);
        let a = rng.sample_gaussian(0.0, 1.0, &[20, 20]).unwrap();
        let a = a.add(&a.transpose().unwrap()).unwrap().scale(0.5);
        let x = rng.sample_gaussian(0.0, 1.0, &[20, 1]).unwrap();
        let (_, g) = grad(
            |t, v| {
                let av = t.constant(a.clone()).matmul(v[0]);
                Ok(v[0].dot(av))
            },
            std::slice::from_ref(&x),
        )
        .unwrap();
        // independent: 2 A x
        let analytic = a.matmul(&x).unwrap().scale(2.0);
        for (p, q) in g[0].data().iter().zip(analytic.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let r = finite_diff_check(
            |t, v| {
                let av = t.constant(a.clone()).matmul(v);
                Ok(v.dot(av))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-7, "{}", r.max_rel_error);
    }

    #[test]
    fn unrolled_scalar_chain_rule() {
        // train (θ-x)², adv θ², θ=1, x=0, lr=0.1:
        // θ⁺ = θ - 0.2(θ-x) = 0.8, dθ⁺/dx = 0.2, d adv/dx = 2·0.8·0.2 = 0.32
        let u = unrolled_grad(
            |_t, p, x| Ok((p[0] - x).square().sum()),
            |_t, p| Ok(p[0].square().sum()),
            &[s(1.0)],
            &s(0.0),
            0.1,
        )
        .unwrap();
        assert!((u.updated_params[0].data()[0] - 0.8).abs() < 1e-15);
        assert!((u.data_grad.data()[0] - 0.32).abs() < 1e-15);
    }

    #[test]
    fn unrolled_constant_adv_loss_is_zero() {
        let u = unrolled_grad(
            |_t, p, x| Ok((p[0] - x).square().sum()),
            |t, _p| Ok(t.constant(s(4.0))),
            &[s(1.0)],
            &s(0.5),
            0.1,
        )
        .unwrap();
        assert_eq!(u.data_grad.data(), &[0.0]);
    }

    #[test]
    fn unrolled_rejects_nonpositive_lr() {
        let r = unrolled_grad(
            |_t, p, x| Ok((p[0] - x).square().sum()),
            |_t, p| Ok(p[0].square().sum()),
            &[s(1.0)],
            &s(0.0),
            0.0,
        );
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
