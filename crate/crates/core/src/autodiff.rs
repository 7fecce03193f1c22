//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] computes its value eagerly and appends a node
//! to the [`Tape`]. [`Tape::backward`] walks the nodes in reverse insertion
//! order (a valid reverse topological order, since inputs always precede
//! their outputs) and accumulates raw gradient tensors.
//!
//! [`Tape::grad_graph`] runs the same vector-Jacobian rules but records them
//! as new nodes, so the gradient is itself differentiable. That is how the
//! Jacobian penalty is trained through: the first-order gradient graph is
//! appended to the forward graph and the final `backward` traverses both.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(R),
    Square,
    Sqrt,
    MatMul { ta: bool, tb: bool },
    Sum,
    Expand,
    Reshape,
    SumRows,
    BroadcastRows,
    ConcatCols,
    SliceCols(usize),
    PadCols(usize),
    Silu(usize),
    Relu,
    Step,
}

struct Node<R: Real> {
    op: Op<R>,
    inputs: Vec<usize>,
    value: Rc<Tensor<R>>,
    requires_grad: bool,
}

/// Record of operations for one forward (and optionally gradient) pass.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    backward_done: Cell<bool>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real> {
    tape: &'t Tape<R>,
    id: usize,
}

impl<R: Real> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Raw gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: Var<'_, R>) -> Option<&Tensor<R>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, R>) -> Tensor<R> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Allows another [`backward`](Self::backward) over the recorded graph.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }

    fn push(&self, op: Op<R>, inputs: Vec<usize>, value: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.leaf(value, false)
    }

    /// Leaf copied from a parameter tensor, honoring its `requires_grad`.
    pub fn param(&self, t: &Tensor<R>) -> Var<'_, R> {
        let requires = t.requires_grad;
        let mut value = t.clone();
        value.grad = None;
        self.leaf(value, requires)
    }

    fn value(&self, id: usize) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check_output(&self, out: Var<'_, R>) -> Result<()> {
        if !std::ptr::eq(out.tape, self) {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        if out.value().numel() != 1 {
            return Err(Error::Autodiff(format!(
                "gradient requested of non-scalar with shape {:?}",
                out.shape()
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`, producing raw gradients for every
    /// node that requires them.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        self.check_output(loss)?;
        if self.backward_done.get() {
            return Err(Error::Autodiff(
                "backward called twice without reset".into(),
            ));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Val<R>>> = vec![None; n];
        let shapes: Vec<Vec<usize>> = self.nodes.borrow()[..n]
            .iter()
            .map(|node| node.value.shape().to_vec())
            .collect();
        grads[loss.id] = Some(Val(Rc::new(Tensor::ones(shapes[loss.id].clone()))));
        let mut out: Vec<Option<Tensor<R>>> = vec![None; n];

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, inputs, value) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                (node.op.clone(), node.inputs.clone(), Rc::clone(&node.value))
            };
            if inputs.is_empty() {
                out[id] = Some(Rc::try_unwrap(g.0).unwrap_or_else(|rc| (*rc).clone()));
                continue;
            }
            let ins: Vec<Val<R>> = inputs.iter().map(|&i| Val(self.value(i))).collect();
            let local = vjp(&op, &ins, &Val(value), &g)?;
            for (input, gi) in inputs.iter().zip(local) {
                let Some(gi) = gi else { continue };
                if !self.requires(*input) {
                    continue;
                }
                grads[*input] = Some(match grads[*input].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        self.backward_done.set(true);
        Ok(Gradients { grads: out, shapes })
    }

    /// Differentiable gradient of scalar `output` with respect to `wrt`.
    ///
    /// The vector-Jacobian products are recorded on this tape, so the returned
    /// variables can feed further computation that is itself backpropagated.
    pub fn grad_graph<'t>(&'t self, output: Var<'t, R>, wrt: &[Var<'t, R>]) -> Result<Vec<Var<'t, R>>> {
        self.check_output(output)?;
        let n = output.id + 1;
        let mut grads: Vec<Option<Var<'t, R>>> = vec![None; n];
        let ones = Tensor::ones(output.shape());
        grads[output.id] = Some(self.constant(ones));
        let needed: Vec<bool> = {
            let nodes = self.nodes.borrow();
            (0..n).map(|i| nodes[i].requires_grad).collect()
        };
        let mut leaf_grads: Vec<Option<Var<'t, R>>> = vec![None; n];

        for id in (0..n).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            if inputs.is_empty() {
                leaf_grads[id] = Some(g);
                continue;
            }
            let ins: Vec<Var<'t, R>> = inputs.iter().map(|&i| Var { tape: self, id: i }).collect();
            let local = vjp(&op, &ins, &Var { tape: self, id }, &g)?;
            for (input, gi) in inputs.iter().zip(local) {
                let Some(gi) = gi else { continue };
                if !needed[*input] {
                    continue;
                }
                grads[*input] = Some(match grads[*input].take() {
                    Some(acc) => acc.add(gi)?,
                    None => gi,
                });
            }
            // Intermediate nodes may also be requested directly.
            if wrt.iter().any(|w| w.id == id) {
                leaf_grads[id] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                leaf_grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(w.shape())))
            })
            .collect())
    }
}

/// Operations shared by raw tensors and recorded variables, so each
/// vector-Jacobian rule is written once and works in both modes.
trait Diff<R: Real>: Clone + Sized {
    fn add(&self, o: &Self) -> Result<Self>;
    fn mul(&self, o: &Self) -> Result<Self>;
    fn div(&self, o: &Self) -> Result<Self>;
    fn scale(&self, c: R) -> Result<Self>;
    fn matmul_t(&self, o: &Self, ta: bool, tb: bool) -> Result<Self>;
    fn sum(&self) -> Result<Self>;
    fn expand(&self, shape: &[usize]) -> Result<Self>;
    fn reshape(&self, shape: &[usize]) -> Result<Self>;
    fn sum_rows(&self) -> Result<Self>;
    fn broadcast_rows(&self, rows: usize) -> Result<Self>;
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self>;
    fn pad_cols(&self, start: usize, total: usize) -> Result<Self>;
    fn silu_n(&self, order: usize) -> Result<Self>;
    fn step(&self) -> Result<Self>;
    fn dims(&self) -> Vec<usize>;
}

#[derive(Clone)]
struct Val<R: Real>(Rc<Tensor<R>>);

impl<R: Real> Val<R> {
    fn new(t: Tensor<R>) -> Self {
        Val(Rc::new(t))
    }
}

impl<R: Real> Diff<R> for Val<R> {
    fn add(&self, o: &Self) -> Result<Self> {
        self.0.add(&o.0).map(Val::new)
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        self.0.mul(&o.0).map(Val::new)
    }
    fn div(&self, o: &Self) -> Result<Self> {
        self.0.div(&o.0).map(Val::new)
    }
    fn scale(&self, c: R) -> Result<Self> {
        Ok(Val::new(self.0.scale(c)))
    }
    fn matmul_t(&self, o: &Self, ta: bool, tb: bool) -> Result<Self> {
        self.0.matmul_t(&o.0, ta, tb).map(Val::new)
    }
    fn sum(&self) -> Result<Self> {
        Ok(Val::new(self.0.sum()))
    }
    fn expand(&self, shape: &[usize]) -> Result<Self> {
        self.0.expand(shape).map(Val::new)
    }
    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        (*self.0).clone().reshape(shape).map(Val::new)
    }
    fn sum_rows(&self) -> Result<Self> {
        self.0.sum_rows().map(Val::new)
    }
    fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        self.0.broadcast_rows(rows).map(Val::new)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        self.0.slice_cols(start, end).map(Val::new)
    }
    fn pad_cols(&self, start: usize, total: usize) -> Result<Self> {
        self.0.pad_cols(start, total).map(Val::new)
    }
    fn silu_n(&self, order: usize) -> Result<Self> {
        Ok(Val::new(self.0.silu_n(order)))
    }
    fn step(&self) -> Result<Self> {
        Ok(Val::new(self.0.step()))
    }
    fn dims(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }
}

impl<'t, R: Real> Diff<R> for Var<'t, R> {
    fn add(&self, o: &Self) -> Result<Self> {
        Var::add(*self, *o)
    }
    fn mul(&self, o: &Self) -> Result<Self> {
        Var::mul(*self, *o)
    }
    fn div(&self, o: &Self) -> Result<Self> {
        Var::div(*self, *o)
    }
    fn scale(&self, c: R) -> Result<Self> {
        Ok(Var::scale(*self, c))
    }
    fn matmul_t(&self, o: &Self, ta: bool, tb: bool) -> Result<Self> {
        Var::matmul_t(*self, *o, ta, tb)
    }
    fn sum(&self) -> Result<Self> {
        Ok(Var::sum(*self))
    }
    fn expand(&self, shape: &[usize]) -> Result<Self> {
        Var::expand(*self, shape)
    }
    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Var::reshape(*self, shape)
    }
    fn sum_rows(&self) -> Result<Self> {
        Var::sum_rows(*self)
    }
    fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        Var::broadcast_rows(*self, rows)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        Var::slice_cols(*self, start, end)
    }
    fn pad_cols(&self, start: usize, total: usize) -> Result<Self> {
        Var::pad_cols(*self, start, total)
    }
    fn silu_n(&self, order: usize) -> Result<Self> {
        Ok(Var::silu_n(*self, order))
    }
    fn step(&self) -> Result<Self> {
        let v = self.value().step();
        Ok(self.tape.push(Op::Step, vec![self.id], v, false))
    }
    fn dims(&self) -> Vec<usize> {
        self.shape()
    }
}

/// Vector-Jacobian products of one node: the gradient contribution to each
/// input given the output gradient `g`. `None` means identically zero.
fn vjp<R: Real, T: Diff<R>>(op: &Op<R>, ins: &[T], out: &T, g: &T) -> Result<Vec<Option<T>>> {
    let two = R::from_f64c(2.0);
    let half = R::from_f64c(0.5);
    Ok(match op {
        Op::Leaf | Op::Step => vec![None; ins.len()],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-R::one())?)],
        Op::Mul => vec![Some(g.mul(&ins[1])?), Some(g.mul(&ins[0])?)],
        Op::Div => vec![
            Some(g.div(&ins[1])?),
            Some(g.mul(out)?.div(&ins[1])?.scale(-R::one())?),
        ],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::Square => vec![Some(g.mul(&ins[0])?.scale(two)?)],
        Op::Sqrt => vec![Some(g.scale(half)?.div(out)?)],
        Op::MatMul { ta, tb } => {
            let (a, b) = (&ins[0], &ins[1]);
            let (da, db) = match (ta, tb) {
                (false, false) => (g.matmul_t(b, false, true)?, a.matmul_t(g, true, false)?),
                (false, true) => (g.matmul_t(b, false, false)?, g.matmul_t(a, true, false)?),
                (true, false) => (b.matmul_t(g, false, true)?, a.matmul_t(g, false, false)?),
                (true, true) => (b.matmul_t(g, true, true)?, g.matmul_t(a, true, true)?),
            };
            vec![Some(da), Some(db)]
        }
        Op::Sum => vec![Some(g.expand(&ins[0].dims())?)],
        Op::Expand => vec![Some(g.sum()?.reshape(&ins[0].dims())?)],
        Op::Reshape => vec![Some(g.reshape(&ins[0].dims())?)],
        Op::SumRows => vec![Some(g.broadcast_rows(ins[0].dims()[0])?)],
        Op::BroadcastRows => vec![Some(g.sum_rows()?)],
        Op::ConcatCols => {
            let na = ins[0].dims()[1];
            let nb = ins[1].dims()[1];
            vec![Some(g.slice_cols(0, na)?), Some(g.slice_cols(na, na + nb)?)]
        }
        Op::SliceCols(start) => vec![Some(g.pad_cols(*start, ins[0].dims()[1])?)],
        Op::PadCols(start) => {
            let c = ins[0].dims()[1];
            vec![Some(g.slice_cols(*start, start + c)?)]
        }
        Op::Silu(order) => vec![Some(g.mul(&ins[0].silu_n(order + 1)?)?)],
        Op::Relu => vec![Some(g.mul(&ins[0].step()?)?)],
    })
}

impl<'t, R: Real> Var<'t, R> {
    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, op: Op<R>, value: Tensor<R>) -> Self {
        self.tape.push(op, vec![self.id], value, self.requires_grad())
    }

    fn binary(self, other: Self, op: Op<R>, value: Tensor<R>) -> Result<Self> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Autodiff("operands recorded on different tapes".into()));
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(op, vec![self.id, other.id], value, rg))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let v = self.value().add(&other.value())?;
        self.binary(other, Op::Add, v)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let v = self.value().sub(&other.value())?;
        self.binary(other, Op::Sub, v)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let v = self.value().mul(&other.value())?;
        self.binary(other, Op::Mul, v)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        let v = self.value().div(&other.value())?;
        self.binary(other, Op::Div, v)
    }

    pub fn scale(self, c: R) -> Self {
        let v = self.value().scale(c);
        self.unary(Op::Scale(c), v)
    }

    pub fn square(self) -> Self {
        let v = self.value().square();
        self.unary(Op::Square, v)
    }

    pub fn sqrt(self) -> Result<Self> {
        let v = self.value().sqrt()?;
        Ok(self.unary(Op::Sqrt, v))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    pub fn matmul_t(self, other: Self, ta: bool, tb: bool) -> Result<Self> {
        let v = self.value().matmul_t(&other.value(), ta, tb)?;
        self.binary(other, Op::MatMul { ta, tb }, v)
    }

    pub fn sum(self) -> Self {
        let v = self.value().sum();
        self.unary(Op::Sum, v)
    }

    pub fn mean(self) -> Self {
        let n = R::from_usize(self.value().numel()).unwrap();
        self.sum().scale(R::one() / n)
    }

    pub fn expand(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().expand(shape)?;
        Ok(self.unary(Op::Expand, v))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(Op::Reshape, v))
    }

    pub fn sum_rows(self) -> Result<Self> {
        let v = self.value().sum_rows()?;
        Ok(self.unary(Op::SumRows, v))
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Self> {
        let v = self.value().broadcast_rows(rows)?;
        Ok(self.unary(Op::BroadcastRows, v))
    }

    /// Adds a `1 x cols` row to every row of a matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let rows = self.value().dims2()?.0;
        self.add(row.broadcast_rows(rows)?)
    }

    pub fn concat_cols(self, other: Self) -> Result<Self> {
        let v = self.value().concat_cols(&other.value())?;
        self.binary(other, Op::ConcatCols, v)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Self> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.unary(Op::SliceCols(start), v))
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Result<Self> {
        let v = self.value().pad_cols(start, total)?;
        Ok(self.unary(Op::PadCols(start), v))
    }

    pub fn silu(self) -> Self {
        self.silu_n(0)
    }

    fn silu_n(self, order: usize) -> Self {
        let v = self.value().silu_n(order);
        self.unary(Op::Silu(order), v)
    }

    pub fn relu(self) -> Self {
        let v = self.value().relu();
        self.unary(Op::Relu, v)
    }
}

/// Largest output dimension for which the Jacobian is assembled exactly.
pub const DEFAULT_JACOBIAN_BUDGET: usize = 64;

/// Batch mean of the squared Frobenius norm of the Jacobian of `f` at the
/// rows of `x` (`batch x d_in`), assembled exactly with one differentiable
/// reverse pass per output dimension. Rows must be processed independently
/// by `f`.
pub fn jacobian_frobenius_sq<'t, R: Real>(
    tape: &'t Tape<R>,
    x: &Tensor<R>,
    f: impl FnOnce(Var<'t, R>) -> Result<Var<'t, R>>,
    budget: usize,
) -> Result<Var<'t, R>> {
    let batch = x.dims2()?.0;
    let xv = tape.leaf(x.clone(), true);
    let y = f(xv)?;
    let (_, d_out) = y.value().dims2()?;
    if d_out > budget {
        return Err(Error::JacobianBudget { dim: d_out, budget });
    }
    let mut acc: Option<Var<'t, R>> = None;
    for i in 0..d_out {
        let s = y.slice_cols(i, i + 1)?.sum();
        let row = tape.grad_graph(s, &[xv])?[0];
        let term = row.square().sum();
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let acc = acc.unwrap_or_else(|| tape.constant(Tensor::scalar(R::zero())));
    Ok(acc.scale(R::one() / R::from_usize(batch.max(1)).unwrap()))
}

/// Unbiased probe estimate of the same quantity as [`jacobian_frobenius_sq`]:
/// `E_v ||J^T v||^2 = ||J||_F^2` for `v ~ N(0, I)`, averaged over `probes`
/// draws. Cost is one differentiable reverse pass per probe regardless of the
/// output dimension.
pub fn jacobian_frobenius_sq_probe<'t, R: Real>(
    tape: &'t Tape<R>,
    x: &Tensor<R>,
    f: impl FnOnce(Var<'t, R>) -> Result<Var<'t, R>>,
    probes: usize,
    rng: &mut impl Rng,
) -> Result<Var<'t, R>> {
    if probes == 0 {
        return Err(Error::InvalidArgument("probe count must be positive".into()));
    }
    let batch = x.dims2()?.0;
    let xv = tape.leaf(x.clone(), true);
    let y = f(xv)?;
    let mut acc: Option<Var<'t, R>> = None;
    for _ in 0..probes {
        let v = tape.constant(Tensor::randn(y.shape(), rng));
        let s = y.mul(v)?.sum();
        let row = tape.grad_graph(s, &[xv])?[0];
        let term = row.square().sum();
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let denom = R::from_usize(batch.max(1) * probes).unwrap();
    Ok(acc.unwrap().scale(R::one() / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Central differences of a scalar function of one tensor.
    fn fd_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut hi = x.clone();
                hi.data_mut()[i] += h;
                let mut lo = x.clone();
                lo.data_mut()[i] -= h;
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(got: &[f64], want: &[f64], rel: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            let scale = g.abs().max(w.abs()).max(1e-3);
            assert!((g - w).abs() / scale <= rel, "got {g}, want {w}");
        }
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2, 2], 1), true);
        let c = tape.constant(Tensor::scalar(3.0));
        let _unused = x.square();
        let g = tape.backward(c).unwrap();
        assert!(g.wrt(x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2], 1), true);
        assert!(tape.backward(x).is_err(), "non-scalar");
        let l = x.sum();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err(), "twice");
        tape.reset();
        assert!(tape.backward(l).is_ok());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([2], vec![3.0, 4.0]).unwrap(), true);
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_least_squares_gradient_matches_normal_equations() {
        // loss = ||X w - y||^2 ; grad = 2 X^T (X w - y)
        let x = randn(&[6, 3], 2);
        let w = randn(&[3, 1], 3);
        let y = randn(&[6, 1], 4);
        let tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let r = tape.constant(x.clone()).matmul(wv).unwrap().sub(tape.constant(y.clone())).unwrap();
        let g = tape.backward(r.square().sum()).unwrap().wrt(wv);
        let resid = x.matmul(&w).unwrap().sub(&y).unwrap();
        let want = x.transpose().unwrap().matmul(&resid).unwrap().scale(2.0);
        assert_close(g.data(), want.data(), 1e-12);
    }

    /// Every differentiable op checked against central differences.
    #[test]
    fn op_gradients_match_finite_differences() {
        type Build = for<'t> fn(Var<'t, f64>, &'t Tape<f64>) -> Var<'t, f64>;
        let cases: Vec<(&str, Build)> = vec![
            ("add", |x, _| x.add(x.square()).unwrap().sum()),
            ("sub", |x, _| x.sub(x.silu()).unwrap().square().sum()),
            ("mul", |x, _| x.mul(x.silu()).unwrap().sum()),
            ("div", |x, t| {
                let d = x.square().add(t.constant(Tensor::full([5, 4], 1.0))).unwrap();
                x.div(d).unwrap().sum()
            }),
            ("sqrt", |x, t| {
                x.square().add(t.constant(Tensor::full([5, 4], 0.5))).unwrap().sqrt().unwrap().sum()
            }),
            ("matmul", |x, t| {
                let w = t.constant(randn(&[4, 3], 9));
                x.matmul(w).unwrap().silu().sum()
            }),
            ("matmul_tn", |x, _| x.matmul_t(x, true, false).unwrap().square().sum()),
            ("matmul_nt", |x, _| x.matmul_t(x, false, true).unwrap().silu().sum()),
            ("sum_rows", |x, _| x.sum_rows().unwrap().square().sum()),
            ("broadcast", |x, _| {
                x.sum_rows().unwrap().broadcast_rows(5).unwrap().mul(x).unwrap().sum()
            }),
            ("concat_slice", |x, _| {
                x.concat_cols(x.square()).unwrap().slice_cols(2, 6).unwrap().silu().sum()
            }),
            ("relu", |x, _| x.relu().square().sum()),
            ("mean_expand", |x, _| x.mean().expand(&[2, 2]).unwrap().square().sum()),
        ];
        for (name, build) in cases {
            let x0 = randn(&[5, 4], 11);
            let tape = Tape::new();
            let xv = tape.leaf(x0.clone(), true);
            let loss = build(xv, &tape);
            let got = tape.backward(loss).unwrap().wrt(xv);
            let want = fd_grad(&x0, |xx| {
                let t = Tape::new();
                let v = t.leaf(xx.clone(), false);
                build(v, &t).value().item().unwrap()
            });
            for (g, w) in got.data().iter().zip(&want) {
                let scale = g.abs().max(w.abs()).max(1e-2);
                assert!((g - w).abs() / scale < 1e-6, "{name}: {g} vs {w}");
            }
        }
    }

    fn tiny_mlp<'t>(x: Var<'t, f64>, params: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let h = x.matmul(params[0])?.add_row(params[1])?.silu();
        h.matmul(params[2])?.add_row(params[3])
    }

    fn mlp_params() -> Vec<Tensor<f64>> {
        vec![randn(&[4, 6], 21), randn(&[1, 6], 22), randn(&[6, 3], 23), randn(&[1, 3], 24)]
    }

    #[test]
    fn jacobian_of_linear_map_is_frobenius_of_matrix() {
        let a = randn(&[3, 2], 5); // f(x) = x A, Jacobian A^T
        let x = randn(&[4, 3], 6);
        let tape = Tape::new();
        let av = tape.constant(a.clone());
        let j = jacobian_frobenius_sq(&tape, &x, |xv| xv.matmul(av), 64).unwrap();
        assert!((j.value().item().unwrap() - a.frobenius_sq()).abs() < 1e-12);

        let tape = Tape::new();
        let j = jacobian_frobenius_sq(&tape, &randn(&[1, 5], 7), Ok, 64).unwrap();
        assert_eq!(j.value().item().unwrap(), 5.0);
    }

    #[test]
    fn jacobian_budget_is_enforced() {
        let tape = Tape::<f64>::new();
        let err = jacobian_frobenius_sq(&tape, &randn(&[1, 5], 7), Ok, 4).unwrap_err();
        assert!(matches!(err, Error::JacobianBudget { dim: 5, budget: 4 }));
    }

    /// Finite-difference Jacobian of the tiny MLP at a single point.
    fn fd_jacobian_sq(params: &[Tensor<f64>], x: &Tensor<f64>) -> f64 {
        let eval = |xx: &Tensor<f64>| {
            let t = Tape::new();
            let ps: Vec<_> = params.iter().map(|p| t.constant(p.clone())).collect();
            let v = t.constant(xx.clone());
            tiny_mlp(v, &ps).unwrap().value().data().to_vec()
        };
        let h = 1e-5;
        let mut total = 0.0;
        for i in 0..x.numel() {
            let mut hi = x.clone();
            hi.data_mut()[i] += h;
            let mut lo = x.clone();
            lo.data_mut()[i] -= h;
            for (a, b) in eval(&hi).iter().zip(eval(&lo)) {
                let d = (a - b) / (2.0 * h);
                total += d * d;
            }
        }
        total
    }

    #[test]
    fn mlp_jacobian_matches_finite_differences() {
        let params = mlp_params();
        let x = randn(&[1, 4], 30);
        let tape = Tape::new();
        let ps: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let j = jacobian_frobenius_sq(&tape, &x, |xv| tiny_mlp(xv, &ps), 64).unwrap();
        let want = fd_jacobian_sq(&params, &x);
        let got = j.value().item().unwrap();
        assert!((got - want).abs() / want < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn jacobian_penalty_trains_through_parameters() {
        let params = mlp_params();
        let x = randn(&[3, 4], 31);
        let penalty = |ps_t: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let tape = Tape::new();
            let ps: Vec<_> = ps_t.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let j = jacobian_frobenius_sq(&tape, &x, |xv| tiny_mlp(xv, &ps), 64).unwrap();
            let v = j.value().item().unwrap();
            let g = tape.backward(j).unwrap();
            (v, ps.iter().map(|p| g.wrt(*p)).collect())
        };
        let (_, grads) = penalty(&params);
        let h = 1e-5;
        for (pi, coord) in [(0, 3), (0, 17), (1, 2), (2, 5), (2, 11), (3, 1)] {
            let mut hi = params.clone();
            hi[pi].data_mut()[coord] += h;
            let mut lo = params.clone();
            lo[pi].data_mut()[coord] -= h;
            let fd = (penalty(&hi).0 - penalty(&lo).0) / (2.0 * h);
            let got = grads[pi].data()[coord];
            let scale = got.abs().max(fd.abs()).max(1e-6);
            assert!((got - fd).abs() / scale < 1e-4, "param {pi}[{coord}]: {got} vs {fd}");
        }
        // The output bias does not enter the Jacobian.
        assert!(grads[3].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn probe_estimator_converges_to_exact_value() {
        let params = mlp_params();
        let x = randn(&[1, 4], 40);
        let tape = Tape::new();
        let ps: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let exact = jacobian_frobenius_sq(&tape, &x, |xv| tiny_mlp(xv, &ps), 64)
            .unwrap()
            .value()
            .item()
            .unwrap();
        let tape = Tape::new();
        let ps: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let est = jacobian_frobenius_sq_probe(&tape, &x, |xv| tiny_mlp(xv, &ps), 1000, &mut rng)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!((est - exact).abs() / exact < 0.02, "{est} vs {exact}");
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let params = mlp_params();
            let tape = Tape::new();
            let ps: Vec<_> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let x = tape.constant(randn(&[8, 4], 50));
            let l = tiny_mlp(x, &ps).unwrap().square().mean();
            let g = tape.backward(l).unwrap();
            (l.value().item().unwrap().to_bits(), g.wrt(ps[0]).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
