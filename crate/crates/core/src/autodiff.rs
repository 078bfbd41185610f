//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape from the
//! output back to index 0 visits every node in reverse topological order
//! exactly once. Leaves created with [`Tape::var`] are differentiation
//! roots; leaves created with [`Tape::constant`] never receive gradients,
//! and neither does anything computed only from constants.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    RowSum(usize),
    SliceCols(usize, usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.idx, self.value().shape())
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records a differentiation root.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor> {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Exact reverse-mode gradients of the scalar `output` with respect to
    /// every root on the tape. The tape itself is left untouched.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::usage("backward: output was recorded on another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.idx].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward: output of shape {:?} is not a scalar",
                nodes[output.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Tensor::full(nodes[output.idx].value.shape(), 1.0));

        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            macro_rules! acc {
                ($i:expr, $t:expr $(,)?) => {
                    accumulate(&mut grads, $i, $t)
                };
            }
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(a) {
                        let mut out = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut out, false);
                        acc!(a, Tensor::matrix(m, k, out)?);
                    }
                    if needs(b) {
                        let mut out = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut out, false);
                        acc!(b, Tensor::matrix(k, n, out)?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        acc!(a, g.clone());
                    }
                    if needs(b) {
                        acc!(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        acc!(a, g.clone());
                    }
                    if needs(b) {
                        acc!(b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc!(a, zip(&g, &nodes[b].value, |gv, bv| gv * bv));
                    }
                    if needs(b) {
                        acc!(b, zip(&g, &nodes[a].value, |gv, av| gv * av));
                    }
                }
                Op::Scale(a, c) => acc!(a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc!(a, g),
                Op::AddBias(a, b) => {
                    if needs(b) {
                        let n = g.cols();
                        let mut col = vec![0.0; n];
                        for row in g.data().chunks(n.max(1)) {
                            for (c, v) in col.iter_mut().zip(row) {
                                *c += v;
                            }
                        }
                        acc!(b, Tensor::new(nodes[b].value.shape().to_vec(), col)?);
                    }
                    if needs(a) {
                        acc!(a, g);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    acc!(
                        a,
                        zip(&g, &nodes[a].value, |gv, x| if x >= 0.0 { gv } else { slope * gv }),
                    );
                }
                Op::Tanh(a) => acc!(a, zip(&g, &node.value, |gv, y| gv * (1.0 - y * y))),
                Op::Exp(a) => acc!(a, zip(&g, &node.value, |gv, y| gv * y)),
                Op::Log(a) => acc!(a, zip(&g, &nodes[a].value, |gv, x| gv / x)),
                Op::Square(a) => acc!(a, zip(&g, &nodes[a].value, |gv, x| 2.0 * x * gv)),
                Op::Clamp(a, lo, hi) => acc!(
                    a,
                    zip(&g, &nodes[a].value, |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }),
                ),
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc!(a, Tensor::full(nodes[a].value.shape(), gv));
                }
                Op::RowSum(a) => {
                    let shape = nodes[a].value.shape().to_vec();
                    let n = shape[1];
                    let mut out = Vec::with_capacity(shape[0] * n);
                    for &gv in g.data() {
                        out.extend(std::iter::repeat_n(gv, n));
                    }
                    acc!(a, Tensor::new(shape, out)?);
                }
                Op::SliceCols(a, start, end) => {
                    let shape = nodes[a].value.shape().to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let w = end - start;
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        out[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc!(a, Tensor::new(shape, out)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, t: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign_unchecked(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("gradient shape matches node shape")
}

/// Gradients of one backward pass, indexed by the variables they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.idx)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::usage("operands live on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(&other, v, Op::MatMul(self.idx, other.idx)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.binary(&other, v, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(&other, v, Op::Sub(self.idx, other.idx)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(&other, v, Op::Mul(self.idx, other.idx)))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let v = self.value().scale(c)?;
        Ok(self.unary(v, Op::Scale(self.idx, c)))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let v = self.value().add_scalar(c)?;
        Ok(self.unary(v, Op::AddScalar(self.idx)))
    }

    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let v = self.value().add_bias(&bias.value())?;
        Ok(self.binary(&bias, v, Op::AddBias(self.idx, bias.idx)))
    }

    /// Subgradient at zero is taken from the positive branch.
    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        let v = self.value().leaky_relu(slope)?;
        Ok(self.unary(v, Op::LeakyRelu(self.idx, slope)))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let v = self.value().tanh()?;
        Ok(self.unary(v, Op::Tanh(self.idx)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.value().exp()?;
        Ok(self.unary(v, Op::Exp(self.idx)))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value().log()?;
        Ok(self.unary(v, Op::Log(self.idx)))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        let v = self.value().square()?;
        Ok(self.unary(v, Op::Square(self.idx)))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let v = self.value().clamp(lo, hi)?;
        Ok(self.unary(v, Op::Clamp(self.idx, lo, hi)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = self.value().sum()?;
        Ok(self.unary(v, Op::Sum(self.idx)))
    }

    pub fn row_sum(&self) -> Result<Var<'t>> {
        let v = self.value().row_sum()?;
        Ok(self.unary(v, Op::RowSum(self.idx)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.unary(v, Op::SliceCols(self.idx, start, end)))
    }
}

/// Row-wise log-density of a diagonal Gaussian, as an `[n, 1]` column.
pub fn gaussian_log_density_rows<'t>(x: Var<'t>, mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let d = x.sub(mean)?.square()?;
    let prec = log_var.neg()?.exp()?;
    let quad = d.mul(prec)?;
    log_var
        .add(quad)?
        .scale(-0.5)?
        .add_scalar(-0.5 * crate::tensor::LN_2PI)?
        .row_sum()
}

/// Row-wise standard-normal log-density, as an `[n, 1]` column.
pub fn standard_normal_log_density_rows(x: Var<'_>) -> Result<Var<'_>> {
    x.square()?
        .scale(-0.5)?
        .add_scalar(-0.5 * crate::tensor::LN_2PI)?
        .row_sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = c.scale(2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0]);
    }

    #[test]
    fn backward_rejects_foreign_or_non_scalar_output() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let y = t2.var(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(y), Err(Error::Usage(_))));
        let v = t1.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t1.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_one() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.leaky_relu(0.2).unwrap().sum().unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[1.0]);
    }

    #[test]
    fn recorded_values_match_eager() {
        let a = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.5, -0.3, 0.7]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.3, 0.2, -1.0, 0.5, 0.25, -0.75]).unwrap();
        let eager = a.matmul(&w).unwrap().tanh().unwrap().exp().unwrap();
        let tape = Tape::new();
        let va = tape.var(a.clone());
        let vw = tape.constant(w.clone());
        let rec = va.matmul(vw).unwrap().tanh().unwrap().exp().unwrap();
        assert_eq!(rec.value().data(), eager.data());
        drop(tape);
        assert_eq!(a.matmul(&w).unwrap().tanh().unwrap().exp().unwrap(), eager);
    }
}
