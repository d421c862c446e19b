use std::collections::HashMap;
use std::fmt;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the gradient
/// flowing into the output, and returns one gradient per input, in order.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceRow(Var, usize),
    StackRows(Vec<Var>),
    LogSoftmaxRows(Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(_, op) => write!(f, "Custom({})", op.name()),
            Op::Leaf => f.write_str("Leaf"),
            Op::Param(p) => write!(f, "Param({})", p.0),
            _ => f.write_str("Op"),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-use tape: record a forward pass, then call [`Graph::backward`] once.
///
/// Nodes are appended in creation order, so reverse index order is a reverse
/// topological order and backward is linear in the node count.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss with respect to `v`, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter. Repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `x · wᵀ + b` for `x: r x i`, `w: o x i`, `b: o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, i) = xv.dims2();
        let (o, wi) = wv.dims2();
        if i != wi {
            return Err(shape_err("linear", xv, wv));
        }
        let mut out = vec![0.0; r * o];
        let (xd, wd) = (xv.data(), wv.data());
        for row in 0..r {
            let xr = &xd[row * i..(row + 1) * i];
            for (col, slot) in out[row * o..(row + 1) * o].iter_mut().enumerate() {
                let wr = &wd[col * i..(col + 1) * i];
                *slot = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(shape_err("linear bias", wv, bv));
            }
            let bd = bv.data();
            for row in 0..r {
                for col in 0..o {
                    out[row * o + col] += bd[col];
                }
            }
        }
        let t = Tensor::matrix(r, o, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Matrix product `a · b` for `a: r x k`, `b: k x c`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = av.dims2();
        let (bk, c) = bv.dims2();
        if k != bk {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; r * c];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..r {
            for p in 0..k {
                let a_ip = ad[i * k + p];
                for j in 0..c {
                    out[i * c + j] += a_ip * bd[p * c + j];
                }
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| k * x);
        self.push(t, Op::Scale(a, k))
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp binds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let v = self.value(a);
        if r >= v.rows() {
            return Err(Error::Shape(format!("row {r} of {:?}", v.shape())));
        }
        let t = Tensor::matrix(1, v.cols(), v.row(r).to_vec())?;
        Ok(self.push(t, Op::SliceRow(a, r)))
    }

    /// Stacks single-row matrices into an `n x c` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let cols = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let v = self.value(r);
            if v.len() != cols {
                return Err(shape_err("stack_rows", self.value(*first), v));
            }
            out.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows.len(), cols, out)?;
        Ok(self.push(t, Op::StackRows(rows.to_vec())))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims2();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(vec![r, c], out).expect("same size");
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sums a list of scalars left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter().copied();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        for x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse-mode sweep from a scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss does not belong to this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Parameter gradients aligned with `store`; unreached parameters get zeros.
    pub fn gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, inn) = xv.dims2();
                let (o, _) = wv.dims2();
                let gd = g.data();
                let mut gx = vec![0.0; r * inn];
                let mut gw = vec![0.0; o * inn];
                for row in 0..r {
                    let xr = xv.row(row);
                    let gxr = &mut gx[row * inn..(row + 1) * inn];
                    for col in 0..o {
                        let gy = gd[row * o + col];
                        if gy == 0.0 {
                            continue;
                        }
                        let wr = wv.row(col);
                        for k in 0..inn {
                            gxr[k] += gy * wr[k];
                        }
                        let gwr = &mut gw[col * inn..(col + 1) * inn];
                        for k in 0..inn {
                            gwr[k] += gy * xr[k];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                if let Some(b) = b {
                    let mut gb = vec![0.0; o];
                    for row in 0..r {
                        for col in 0..o {
                            gb[col] += gd[row * o + col];
                        }
                    }
                    accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, k) = av.dims2();
                let (_, c) = bv.dims2();
                let gd = g.data();
                let mut ga = vec![0.0; r * k];
                let mut gb = vec![0.0; k * c];
                for i in 0..r {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += gd[i * c + j] * bv.data()[p * c + j];
                            gb[p * c + j] += av.data()[i * k + p] * gd[i * c + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, elementwise(g, bv, |gy, y| gy * y));
                accumulate(grads, *b, elementwise(g, av, |gy, x| gy * x));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| k * x)),
            Op::Shift(a) => accumulate(grads, *a, g.clone()),
            Op::Exp(a) => accumulate(grads, *a, elementwise(g, &node.value, |gy, y| gy * y)),
            Op::Sigmoid(a) => accumulate(
                grads,
                *a,
                elementwise(g, &node.value, |gy, y| gy * y * (1.0 - y)),
            ),
            Op::Tanh(a) => accumulate(
                grads,
                *a,
                elementwise(g, &node.value, |gy, y| gy * (1.0 - y * y)),
            ),
            Op::Square(a) => {
                accumulate(grads, *a, elementwise(g, val(*a), |gy, x| 2.0 * gy * x))
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = elementwise(g, val(*a), |gy, x| {
                    if (lo..=hi).contains(&x) {
                        gy
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, gx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp)?);
                    offset += c;
                }
            }
            Op::SliceRow(a, r) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::StackRows(rows) => {
                let c = node.value.cols();
                for (r, &v) in rows.iter().enumerate() {
                    let gr = g.data()[r * c..(r + 1) * c].to_vec();
                    accumulate(grads, v, Tensor::new(val(v).shape().to_vec(), gr)?);
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = node.value.dims2();
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    let y = node.value.row(row);
                    let gy = &g.data()[row * c..(row + 1) * c];
                    let s: f64 = gy.iter().sum();
                    for k in 0..c {
                        ga[row * c + k] = gy[k] - y[k].exp() * s;
                    }
                }
                accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), ga)?);
            }
            Op::Sum(a) => {
                let gy = g.item();
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gy));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(outs) {
                    accumulate(grads, v, gv);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(other.shape().to_vec(), data).expect("same size")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
