//! Reverse-mode differentiation over a flat operation record.
//!
//! Operations append nodes to a [`Tape`]; a node can only reference nodes
//! recorded before it, so the tape is topologically ordered by construction
//! and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::array::{clamped_ln, matmul, softmax_last, Array, Precision, LOG_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    Transpose(Var),
}

struct Node {
    value: Array,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    #[cfg(feature = "fault-injection")]
    faulty_softmax: bool,
}

/// Gradients of a scalar root with respect to every leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Array>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Array> {
        self.by_leaf.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Array)> {
        self.by_leaf.iter().map(|(v, a)| (*v, a))
    }

    /// Removes and returns the gradient for `leaf`.
    pub fn take(&mut self, leaf: Var) -> Option<Array> {
        self.by_leaf.remove(&leaf)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Makes every softmax on this tape report a wrong derivative.
    #[cfg(feature = "fault-injection")]
    pub fn inject_softmax_fault(&mut self) {
        self.faulty_softmax = true;
    }

    fn softmax_fault(&self) -> bool {
        #[cfg(feature = "fault-injection")]
        {
            self.faulty_softmax
        }
        #[cfg(not(feature = "fault-injection"))]
        {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Array, op: Op) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x (n x m) + bias (m)`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, m) = xv.dims2()?;
        if bv.shape() != [m] {
            return Err(Error::shape("add_row", &[xv.shape(), bv.shape()]));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_last(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Natural log of `max(x, LOG_EPS)`.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(clamped_ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sums a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce_axis(self.value(a), axis)?;
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let count = if axis == 0 { r } else { c } as f64;
        let out = reduce_axis(v, axis)?.map(|x| x / count);
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Propagates d(root)/d(node) back through the tape.
    ///
    /// Every leaf gets an entry; leaves the root does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = matmul(&g, &self.value(b).transpose()?)?;
                    let db = matmul(&self.value(a).transpose()?, &g)?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::AddRow(x, bias) => {
                    let db = reduce_axis(&g, 0)?;
                    self.accumulate(&mut grads, bias, db);
                    self.accumulate(&mut grads, x, g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g.clone());
                    self.accumulate(&mut grads, b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                    let db = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Scale(a, factor) => {
                    self.accumulate(&mut grads, a, g.map(|x| x * factor));
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(a), "relu", |gx, x| if x > 0.0 { gx } else { 0.0 })?;
                    self.accumulate(&mut grads, a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap_or(&1);
                    let mut d = g;
                    let drop_dot = self.softmax_fault();
                    for (drow, yrow) in d.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                        let dot: f64 = if drop_dot {
                            0.0
                        } else {
                            drow.iter().zip(yrow).map(|(g, y)| g * y).sum()
                        };
                        for (gv, yv) in drow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, a, d);
                }
                Op::Ln(a) => {
                    let d = g.zip_map(self.value(a), "ln", |gx, x| if x > LOG_EPS { gx / x } else { 0.0 })?;
                    self.accumulate(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let d = Array::filled(self.shape(a), g.item());
                    self.accumulate(&mut grads, a, d);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len() as f64;
                    let d = Array::filled(self.shape(a), g.item() / n);
                    self.accumulate(&mut grads, a, d);
                }
                Op::SumAxis(a, axis) => {
                    let d = expand_axis(&g, self.shape(a), axis, 1.0);
                    self.accumulate(&mut grads, a, d);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape(a);
                    let d = expand_axis(&g, shape, axis, 1.0 / shape[axis] as f64);
                    self.accumulate(&mut grads, a, d);
                }
                Op::Reshape(a) => {
                    let d = g.reshape(self.shape(a))?;
                    self.accumulate(&mut grads, a, d);
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, a, g.transpose()?);
                }
            }
        }

        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], target: Var, mut delta: Array) {
        if matches!(self.nodes[target.0].op, Op::Constant) {
            return;
        }
        self.precision.round_slice(delta.data_mut());
        match &mut grads[target.0] {
            Some(existing) => {
                existing.add_assign(&delta);
                self.precision.round_slice(existing.data_mut());
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

fn reduce_axis(x: &Array, axis: usize) -> Result<Array> {
    let (r, c) = x.dims2()?;
    match axis {
        0 => {
            let mut out = vec![0.0; c];
            for row in x.data().chunks(c.max(1)) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Ok(Array::vector(out))
        }
        1 => Ok(Array::vector(
            (0..r).map(|i| x.row(i).iter().sum()).collect(),
        )),
        _ => Err(Error::Usage(format!("axis {axis} out of range for a matrix"))),
    }
}

fn expand_axis(g: &Array, shape: &[usize], axis: usize, factor: f64) -> Array {
    let (r, c) = (shape[0], shape[1]);
    let mut out = Array::zeros(shape);
    let data = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            let src = if axis == 0 { j } else { i };
            data[i * c + j] = g.data()[src] * factor;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let x = t.constant(Array::vector(vec![0.0, 3f64.ln()]));
        let y = t.softmax(x);
        assert!(close(t.value(y).data(), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn reshape_keeps_order() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector((0..6).map(f64::from).collect()));
        let y = t.reshape(x, &[2, 3]).unwrap();
        assert_eq!(t.shape(y), &[2, 3]);
        assert_eq!(t.value(y).data(), t.value(x).data());
        assert!(t.reshape(x, &[4, 2]).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_has_no_gradients() {
        let mut t = Tape::new();
        let c = t.constant(Array::vector(vec![3.0, 4.0]));
        let root = t.sum(c);
        let g = t.backward(root).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        let unused = t.leaf(Array::zeros(&[2, 2]));
        let root = t.sum(x);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(unused).unwrap(), &Array::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_leaf_accumulates_branches() {
        // f = sum(3x) + sum(x*x)  =>  df/dx = 3 + 2x
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![0.5, -1.0, 2.0]));
        let a = t.scale(x, 3.0);
        let a = t.sum(a);
        let b = t.mul(x, x).unwrap();
        let b = t.sum(b);
        let root = t.add(a, b).unwrap();
        let g = t.backward(root).unwrap();
        assert!(close(g.get(x).unwrap().data(), &[4.0, 1.0, 7.0], 1e-15));
    }

    #[test]
    fn add_row_shape_error_names_operands() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[2, 3]));
        let b = t.leaf(Array::zeros(&[2]));
        match t.add_row(x, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "add_row");
                assert_eq!(shapes, vec![vec![2, 3], vec![2]]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ln_is_clamped() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![0.0, 1.0]));
        let y = t.ln(x);
        assert!((t.value(y).data()[0] - LOG_EPS.ln()).abs() < 1e-12);
        let root = t.sum(y);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }
}
