//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and [`Graph::backward`] walks it once in reverse.
//! Gradients flowing into a node from several consumers are summed.

use crate::error::{Error, Result};
use crate::spatial::{self, Grid};
use crate::tensor::{Axis, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul,
    MatMulNt,
    MatMulTn,
    Add,
    Sub,
    Mul,
    AddRow,
    ScaleRows,
    Scale(f64),
    Sigmoid,
    Abs,
    LeakyRelu(f64),
    Sum,
    Mean,
    Softmax(Axis),
    Unfold { grid: Grid, stride: usize },
    Upsample { grid: Grid },
    AvgPool { grid: Grid },
}

struct Node<T: Real> {
    op: Op,
    inputs: [Option<Var>; 2],
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, [None, None], value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, [None, None], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: [Option<Var>; 2], value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Cycle {
                node: self.nodes.len(),
                input: v.0,
            });
        }
        Ok(())
    }

    fn unary(&mut self, op: Op, a: Var, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var> {
        self.check(a)?;
        let value = f(self.value(a))?;
        value.ensure_finite("graph op")?;
        let rg = self.requires_grad(a);
        Ok(self.push(op, [Some(a), None], value, rg))
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = f(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(op, [Some(a), Some(b)], value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MatMul, a, b, |x, y| x.matmul(y))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MatMulNt, a, b, |x, y| x.matmul_nt(y))
    }

    /// `a^T . b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MatMulTn, a, b, |x, y| x.matmul_tn(y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x.add(y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x.sub(y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x.mul(y))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.binary(Op::AddRow, a, bias, |x, y| x.add_row(y))
    }

    /// Multiplies row `i` of `a` by `v[i]`.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        self.binary(Op::ScaleRows, a, v, |x, y| x.scale_rows(y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Op::Scale(s), a, |x| x.scale(T::from_f64(s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, |x| Ok(x.sigmoid()))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs, a, |x| Ok(x.abs()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(slope), a, |x| Ok(x.leaky_relu(T::from_f64(slope))))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sum, a, |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Mean, a, |x| Ok(Tensor::scalar(x.mean())))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.unary(Op::Softmax(axis), a, |x| x.softmax(axis))
    }

    pub fn unfold3x3(&mut self, a: Var, grid: Grid, stride: usize) -> Result<Var> {
        self.unary(Op::Unfold { grid, stride }, a, |x| spatial::unfold3x3(x, grid, stride))
    }

    pub fn upsample2(&mut self, a: Var, grid: Grid) -> Result<Var> {
        self.unary(Op::Upsample { grid }, a, |x| spatial::upsample2(x, grid))
    }

    pub fn avg_pool2(&mut self, a: Var, grid: Grid) -> Result<Var> {
        self.unary(Op::AvgPool { grid }, a, |x| spatial::avg_pool2(x, grid))
    }

    /// Sum of several same-shaped nodes, folded left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Config("add_all needs at least one term".into()))?;
        rest.iter().try_fold(*first, |acc, v| self.add(acc, *v))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for input in node.inputs.iter().flatten() {
                if input.0 >= idx {
                    return Err(Error::Cycle { node: idx, input: input.0 });
                }
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let (Some(input), Some(contribution)) = (input, contribution) else {
                    continue;
                };
                if !self.requires_grad(*input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<[Option<Tensor<T>>; 2]> {
        let a = node.inputs[0].map(|v| (v, self.value(v)));
        let b = node.inputs[1].map(|v| (v, self.value(v)));
        let need = |x: Option<(Var, &Tensor<T>)>| x.is_some_and(|(v, _)| self.requires_grad(v));
        let av = a.map(|(_, t)| t);
        let bv = b.map(|(_, t)| t);
        let y = &node.value;

        Ok(match node.op {
            Op::Leaf => [None, None],
            Op::MatMul => {
                let (x, w) = (av.unwrap(), bv.unwrap());
                [
                    need(a).then(|| g.matmul_nt(w)).transpose()?,
                    need(b).then(|| x.matmul_tn(g)).transpose()?,
                ]
            }
            Op::MatMulNt => {
                let (x, w) = (av.unwrap(), bv.unwrap());
                [
                    need(a).then(|| g.matmul(w)).transpose()?,
                    need(b).then(|| g.matmul_tn(x)).transpose()?,
                ]
            }
            Op::MatMulTn => {
                let (x, w) = (av.unwrap(), bv.unwrap());
                [
                    need(a).then(|| w.matmul_nt(g)).transpose()?,
                    need(b).then(|| x.matmul(g)).transpose()?,
                ]
            }
            Op::Add => [Some(g.clone()), Some(g.clone())],
            Op::Sub => [Some(g.clone()), Some(g.scale(-T::one())?)],
            Op::Mul => {
                let (x, w) = (av.unwrap(), bv.unwrap());
                [
                    need(a).then(|| g.mul(w)).transpose()?,
                    need(b).then(|| g.mul(x)).transpose()?,
                ]
            }
            Op::AddRow => [Some(g.clone()), Some(g.col_sums())],
            Op::ScaleRows => {
                let (x, v) = (av.unwrap(), bv.unwrap());
                let dv = need(b).then(|| g.mul(x).map(|r| r.row_sums())).transpose()?;
                [need(a).then(|| g.scale_rows(v)).transpose()?, dv]
            }
            Op::Scale(s) => [Some(g.scale(T::from_f64(s))?), None],
            Op::Sigmoid => {
                let mut d = g.clone();
                for (d, s) in d.data_mut().iter_mut().zip(y.data()) {
                    *d *= *s * (T::one() - *s);
                }
                [Some(d), None]
            }
            Op::Abs => {
                let mut d = g.clone();
                for (d, x) in d.data_mut().iter_mut().zip(av.unwrap().data()) {
                    // subgradient 0 at the kink
                    *d = if *x > T::zero() {
                        *d
                    } else if *x < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    };
                }
                [Some(d), None]
            }
            Op::LeakyRelu(slope) => {
                let slope = T::from_f64(slope);
                let mut d = g.clone();
                for (d, x) in d.data_mut().iter_mut().zip(av.unwrap().data()) {
                    if *x <= T::zero() {
                        *d *= slope;
                    }
                }
                [Some(d), None]
            }
            Op::Sum => [Some(Tensor::full(av.unwrap().shape(), g.item())), None],
            Op::Mean => {
                let x = av.unwrap();
                let n = T::from_f64(x.len() as f64);
                [Some(Tensor::full(x.shape(), g.item() / n)), None]
            }
            Op::Softmax(axis) => [Some(softmax_vjp(y, g, axis)), None],
            Op::Unfold { grid, stride } => {
                let c = av.unwrap().cols();
                [Some(spatial::fold3x3(g, grid, stride, c)?), None]
            }
            Op::Upsample { grid } => [Some(spatial::block_sum2(g, grid.doubled())?), None],
            Op::AvgPool { grid } => {
                let up = spatial::upsample2(g, grid.halved())?;
                [Some(up.scale(T::from_f64(0.25))?), None]
            }
        })
    }
}

/// `y * (g - <g, y>)` within each normalized slice.
fn softmax_vjp<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (m, n) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let od = out.data_mut();
    match axis {
        Axis::Rows => {
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let dot = yd[r.clone()].iter().zip(&gd[r.clone()]).fold(T::zero(), |s, (a, b)| s + *a * *b);
                for j in r {
                    od[j] = yd[j] * (gd[j] - dot);
                }
            }
        }
        Axis::Columns => {
            let mut dot = vec![T::zero(); n];
            for i in 0..m {
                for (j, d) in dot.iter_mut().enumerate() {
                    *d += yd[i * n + j] * gd[i * n + j];
                }
            }
            for i in 0..m {
                for (j, d) in dot.iter().enumerate() {
                    let p = i * n + j;
                    od[p] = yd[p] * (gd[p] - *d);
                }
            }
        }
    }
    out
}

/// Adam with bias correction. Defaults follow the training setup: no first
/// moment (`beta1 = 0`), `beta2 = 0.99`, learning rate `2e-3`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<(Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(2e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            state: Vec::new(),
            step: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from same-shaped `grads`. Moments are kept
    /// in f64 regardless of the parameter precision.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims("adam", &[params.len()], &[grads.len()]));
        }
        if self.state.is_empty() {
            self.state = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.state.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(Error::dims("adam", p.shape(), g.shape()));
            }
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv = T::from_f64(pv.as_f64() - update);
            }
            p.ensure_finite("adam")?;
        }
        Ok(())
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    /// Same, without the rounding discount.
    pub max_raw_error: Vec<f64>,
    pub tolerance: f64,
    pub coordinates_checked: usize,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error.iter().all(|e| *e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().fold(0.0, |a, b| a.max(*b))
    }

    pub fn worst_raw(&self) -> f64 {
        self.max_raw_error.iter().fold(0.0, |a, b| a.max(*b))
    }
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every coordinate of every input. The reported error is the
/// relative discrepancy after discounting the rounding bound of the central
/// difference, so exactly-zero gradients are not failed on noise.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, step, tolerance, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates per input,
/// chosen by an even stride offset by `offset`.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
    max_coords: usize,
    offset: usize,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_error: vec![0.0; inputs.len()],
        max_raw_error: vec![0.0; inputs.len()],
        tolerance,
        coordinates_checked: 0,
        error: None,
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let analytic = (|| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let value = g.value(out).item();
        Ok((value, vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, t)).collect()))
    })();
    let (value, analytic) = match analytic {
        Ok(a) => a,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = if n <= max_coords { 1 } else { n.div_ceil(max_coords) };
        let mut j = if stride > 1 { offset % stride } else { 0 };
        while j < n {
            let x = input.data()[j];
            let h = step * x.abs().max(1.0);
            work[i].data_mut()[j] = x + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = x - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = x;
            match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * h);
                    // rounding in f(x +- h) alone can move the quotient this far
                    let noise = 4.0 * f64::EPSILON * value.abs().max(p.abs()).max(m.abs()).max(1.0) / h;
                    let a = analytic[i].data()[j];
                    let err = ((a - numeric).abs() - noise).max(0.0) / a.abs().max(numeric.abs()).max(1e-8);
                    report.max_rel_error[i] = report.max_rel_error[i].max(err);
                    report.max_raw_error[i] = report.max_raw_error[i].max(relative_error(a, numeric));
                    report.coordinates_checked += 1;
                }
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(e.to_string());
                    return report;
                }
            }
            j += stride;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(random(1, &[3, 4]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn product_rule_for_scalars() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(-2.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), -2.0);
        assert_eq!(grads.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::new();
        let x = g.param(random(2, &[2, 2]));
        let y = g.add(x, x).unwrap();
        let w = g.constant(random(3, &[2, 2]));
        let z = g.mul(y, w).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        let expect = g.value(w).scale(2.0).unwrap();
        assert_eq!(grads.get(x).unwrap(), &expect);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(random(4, &[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let mut other = Graph::<f64>::new();
        other.param(Tensor::scalar(1.0));
        assert!(other.add(x, Var(5)).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let p = g.mul(x, c).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[&[0.0, -2.0, 3.0]]).unwrap());
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn softmax_first_component() {
        let report = grad_check(
            |g, v| {
                let s = g.softmax(v[0], Axis::Rows)?;
                let pick = g.constant(Tensor::from_rows(&[&[1.0, 0.0]])?);
                let m = g.mul(s, pick)?;
                g.sum(m)
            },
            &[Tensor::from_rows(&[&[1.0, 0.0]]).unwrap()],
            1e-6,
            1e-5,
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_passes() {
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[random(5, &[2, 3])],
            1e-6,
            1e-5,
        );
        assert!(report.passed());
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn detached_path_fails() {
        // the constant copy of x hides half the derivative of sum(x * x)
        let report = grad_check(
            |g, x| {
                let c = g.constant(g.value(x[0]).clone());
                let m = g.mul(x[0], c)?;
                g.sum(m)
            },
            &[random(6, &[3, 2])],
            1e-6,
            1e-5,
        );
        assert!(!report.passed());
        assert!(report.worst() > 0.3 && report.worst_raw() >= report.worst());
    }

    fn check_op(seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, shapes: &[&[usize]]) {
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| random(seed * 31 + i as u64, s)).collect();
        let report = grad_check(f, &inputs, 1e-6, 1e-5);
        assert!(report.passed(), "seed {seed}: {report:?}");
    }

    // Every op, ten seeds each, reduced to a scalar through a fixed random
    // weighting so that no output coordinate has a trivially zero gradient.
    #[test]
    fn every_op_passes_grad_check() {
        fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
            let w = g.constant(random(seed ^ 0xabc, g.value(y).shape()));
            let m = g.mul(y, w)?;
            g.sum(m)
        }
        for seed in 0..10 {
            check_op(seed, |g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[4, 2]]);
            check_op(seed, |g, v| { let y = g.matmul_nt(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[5, 4]]);
            check_op(seed, |g, v| { let y = g.matmul_tn(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[3, 2]]);
            check_op(seed, |g, v| { let y = g.sub(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[3, 4]]);
            check_op(seed, |g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[3, 4]]);
            check_op(seed, |g, v| { let y = g.add_row(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[1, 4]]);
            check_op(seed, |g, v| { let y = g.scale_rows(v[0], v[1])?; weighted(g, y, seed) }, &[&[3, 4], &[3, 1]]);
            check_op(seed, |g, v| { let y = g.scale(v[0], -1.7)?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.sigmoid(v[0])?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.abs(v[0])?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.leaky_relu(v[0], 0.2)?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.softmax(v[0], Axis::Rows)?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.softmax(v[0], Axis::Columns)?; weighted(g, y, seed) }, &[&[3, 4]]);
            check_op(seed, |g, v| { let y = g.mean(v[0])?; g.mul(y, y) }, &[&[3, 4]]);
            let grid = Grid::new(4, 6);
            check_op(seed, |g, v| { let y = g.unfold3x3(v[0], grid, 2)?; weighted(g, y, seed) }, &[&[24, 2]]);
            check_op(seed, |g, v| { let y = g.upsample2(v[0], grid)?; weighted(g, y, seed) }, &[&[24, 2]]);
            check_op(seed, |g, v| { let y = g.avg_pool2(v[0], grid)?; weighted(g, y, seed) }, &[&[24, 2]]);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut params = vec![random(6, &[3, 3]), random(7, &[1, 3])];
        let before = params.clone();
        let grads = vec![random(8, &[3, 3]), random(9, &[1, 3])];
        let mut adam = Adam::new(0.0);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_minimizes_a_quadratic() -> Result<()> {
        let mut params = vec![Tensor::from_rows(&[&[3.0, -2.0]]).unwrap()];
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(params[0].clone());
            let sq = g.mul(x, x)?;
            let s = g.sum(sq)?;
            let grads = g.backward(s)?;
            let gx = grads.get(x).unwrap().clone();
            adam.step(&mut params, &[gx])?;
        }
        assert!(params[0].data().iter().all(|v: &f64| v.abs() < 0.05), "{:?}", params[0]);
        Ok(())
    }
}
