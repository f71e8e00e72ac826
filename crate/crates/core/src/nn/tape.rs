//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation in execution order. Calling
//! [`Tape::backward`] on a scalar (1x1) node walks the record in reverse and
//! accumulates adjoints for every node that depends on a leaf created with
//! [`Tape::param`].

use crate::error::{Error, Result};
use crate::nn::ops::{bce_term, bce_term_grad, row_softmax, sigmoid};
use crate::nn::Tensor2;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a 1xC row to every row of an RxC matrix.
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    /// Row softmax of `x + mask`, where the constant mask holds 0 or -inf.
    MaskedSoftmax(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    ColSum(Var),
    /// Column-wise max; stores the winning row of each column.
    ColMax(Var, Vec<usize>),
    Bce {
        pred: Var,
        target: Tensor2,
        mask: Option<Tensor2>,
        count: usize,
    },
    SumScalars(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like its value when no path reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor2 {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor2::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::invalid(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Row softmax of `x + mask`; `mask` entries must be 0 or `-inf`.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor2>) -> Result<Var> {
        let logits = match mask {
            Some(m) => {
                if m.shape() != self.value(x).shape() {
                    return Err(Error::invalid(format!(
                        "mask shape {:?} does not match logits {:?}",
                        m.shape(),
                        self.value(x).shape()
                    )));
                }
                self.value(x).add(m)?
            }
            None => self.value(x).clone(),
        };
        let v = row_softmax(&logits)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MaskedSoftmax(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::invalid("concat_cols: row count mismatch"));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let v = Tensor2::new(av.rows(), cols, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatCols(a, b), ng))
    }

    /// Tiles a 1xC row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::invalid("repeat_rows expects a single row"));
        }
        let idx = vec![0; n];
        let v = xv.select_rows(&idx);
        let ng = self.ng(x);
        Ok(self.push(v, Op::RepeatRows(x), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of {} rows",
                xv.rows()
            )));
        }
        let v = xv.select_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(v, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::invalid("stack_rows of nothing")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::invalid("stack_rows: column count mismatch"));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let v = Tensor2::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::StackRows(parts.to_vec()), ng))
    }

    pub fn col_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = Tensor2::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, a) in v.data_mut().iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::ColSum(x), ng)
    }

    /// Column-wise max over rows (ties resolve to the first row).
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::invalid("col_max of an empty matrix"));
        }
        let mut v = Tensor2::row_vector(xv.row(0));
        let mut arg = vec![0usize; xv.cols()];
        for i in 1..xv.rows() {
            for (j, &a) in xv.row(i).iter().enumerate() {
                if a > v.data()[j] {
                    v.data_mut()[j] = a;
                    arg[j] = i;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::ColMax(x, arg), ng))
    }

    /// Mean binary cross-entropy (see [`crate::nn::bce_loss`]) as a 1x1 node.
    pub fn bce(&mut self, pred: Var, target: &Tensor2, mask: Option<&Tensor2>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.is_some_and(|m| m.shape() != target.shape()) {
            return Err(Error::invalid("bce: shape mismatch"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (k, (&p, &y)) in pv.data().iter().zip(target.data()).enumerate() {
            if mask.is_some_and(|m| m.data()[k] == 0.0) {
                continue;
            }
            total += bce_term(p, y);
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor2::full(1, 1, loss),
            Op::Bce {
                pred,
                target: target.clone(),
                mask: mask.cloned(),
                count,
            },
            ng,
        ))
    }

    /// Weighted sum of 1x1 nodes.
    pub fn sum_scalars(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(t, w) in terms {
            let tv = self.value(t);
            if tv.shape() != (1, 1) {
                return Err(Error::invalid("sum_scalars expects 1x1 operands"));
            }
            total += w * tv.data()[0];
        }
        let ng = terms.iter().any(|&(t, _)| self.ng(t));
        Ok(self.push(
            Tensor2::full(1, 1, total),
            Op::SumScalars(terms.to_vec()),
            ng,
        ))
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::invalid("backward requires a scalar root"));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::full(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor2| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(bv)?);
                }
                if self.ng(*b) {
                    acc(*b, av.matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul(bv)?);
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(av)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.hadamard(bv)?);
                }
                if self.ng(*b) {
                    acc(*b, g.hadamard(av)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.ng(*row) {
                    let mut r = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*row, r);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, g.zip_map(xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?);
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))?);
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut ga = Tensor2::zeros(g.rows(), ac);
                let mut gb = Tensor2::zeros(g.rows(), bc);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::RepeatRows(x) => {
                let mut r = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, v) in r.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, r);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Tensor2::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    acc(p, Tensor2::new(r, c, slice)?);
                    offset += r;
                }
            }
            Op::ColSum(x) => {
                let rows = self.value(*x).rows();
                let idx = vec![0; rows];
                acc(*x, g.select_rows(&idx));
            }
            Op::ColMax(x, arg) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Tensor2::zeros(r, c);
                for (j, &i) in arg.iter().enumerate() {
                    gx[(i, j)] = g.data()[j];
                }
                acc(*x, gx);
            }
            Op::Bce {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred);
                let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                if *count > 0 {
                    let scale = g.data()[0] / *count as f64;
                    for (k, o) in gp.data_mut().iter_mut().enumerate() {
                        if mask.as_ref().is_some_and(|m| m.data()[k] == 0.0) {
                            continue;
                        }
                        *o = scale * bce_term_grad(pv.data()[k], target.data()[k]);
                    }
                }
                acc(*pred, gp);
            }
            Op::SumScalars(terms) => {
                for &(t, w) in terms {
                    acc(t, Tensor2::full(1, 1, w * g.data()[0]));
                }
            }
        }
        Ok(())
    }
}
