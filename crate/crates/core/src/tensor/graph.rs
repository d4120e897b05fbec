use std::rc::Rc;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Gather index meaning "emit zero" (used for padding).
pub const PAD: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[.., m] + [m]`, broadcast over all leading rows.
    AddRow(Var, Var),
    /// `[n, m] * [n, 1]`, each row scaled by its own factor.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    RowNorms(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    Reshape(Var),
    Dropout(Var, Rc<[f64]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations recorded during one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar root with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros when the node did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, n]`, `b: [k, m]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [n, m]`, `b: [k, m]`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Binds a stored parameter as a gradient-receiving leaf. Binding the same
    /// parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self
            .input(store.get(id).clone())
            .expect("stored parameters are finite");
        self.bound.push((id, v));
        v
    }

    /// Per-parameter gradients in store order (zeros for unused parameters).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.bound.iter().find(|(p, _)| *p == id) {
                Some(&(_, v)) => grads.wrt(v),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }

    fn binary<F>(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: F) -> Result<Var>
    where
        F: Fn(f64, f64) -> f64,
    {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    fn unary<F>(&mut self, a: Var, name: &'static str, op: Op, f: F) -> Result<Var>
    where
        F: Fn(f64) -> f64,
    {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let m = ta.cols();
        if tr.numel() != m {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg, "add_row")
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let n = ta.rows();
        if tc.numel() != n {
            return Err(mismatch("mul_col", ta, tc));
        }
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for (chunk, &s) in data.chunks_mut(m).zip(tc.data()) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg, "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.cols(), tb.cols());
        let value = Tensor::new([n, m], matmul_raw(ta.data(), tb.data(), n, k, m))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", Op::Relu(a), |x| x.max(0.0))
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", Op::Sqrt(a), f64::sqrt)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sin", Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "cos", Op::Cos(a), f64::cos)
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Sum of squares of all elements (squared Frobenius norm).
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sq_norm();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg, "sum_squares")
    }

    /// Euclidean norm of every row: `[n, m] -> [n]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta
            .data()
            .chunks(ta.cols())
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new([data.len()], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorms(a), rg, "row_norms")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::NonFinite("l2_normalize_rows"));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::L2NormalizeRows(a), rg, "l2_normalize_rows")
    }

    /// Stacks tensors along the first dimension; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new([n, total], data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Output element `i` is `a.flat[index[i]]`, or zero for [`PAD`].
    /// Covers slicing, permutation, transposition and im2col.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::Invalid(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        let src = ta.data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == PAD {
                data.push(0.0);
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(TensorError::Invalid(format!(
                    "gather index {i} out of range {}",
                    src.len()
                )));
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Gather(a, index), rg, "gather")
    }

    /// Rows `start..end` of a tensor viewed as `[rows, cols]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, m) = (t.rows(), t.cols());
        if start >= end || end > rows {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{end} of {rows}"
            )));
        }
        let index: Rc<[usize]> = (start * m..end * m).collect();
        self.gather(a, index, vec![end - start, m])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if start >= end || end > m {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{end} of {m}"
            )));
        }
        let index: Rc<[usize]> = (0..n)
            .flat_map(|r| (start..end).map(move |c| r * m + c))
            .collect();
        self.gather(a, index, vec![n, end - start])
    }

    /// Reorders rows so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if order.len() != n {
            return Err(TensorError::Invalid("permute_rows: order length".into()));
        }
        let index: Rc<[usize]> = order
            .iter()
            .flat_map(|&r| (0..m).map(move |c| r * m + c))
            .collect();
        self.gather(a, index, vec![n, m])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid("transpose needs a 2-D tensor".into()));
        }
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let index: Rc<[usize]> = (0..m)
            .flat_map(|c| (0..n).map(move |r| r * m + c))
            .collect();
        self.gather(a, index, vec![m, n])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Multiplies by a fixed (pre-scaled) dropout mask.
    pub fn dropout(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != mask.numel() {
            return Err(mismatch("dropout", ta, mask));
        }
        let data = ta.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        let mask: Rc<[f64]> = mask.data().into();
        self.push(value, Op::Dropout(a, mask), rg, "dropout")
    }

    /// `x W + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let m = self.value(*r).numel();
                self.accumulate(grads, *r, |s| {
                    for chunk in g.chunks(m) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulCol(a, c) => {
                let va = self.value(*a);
                let m = va.cols();
                let vc = self.value(*c).data();
                self.accumulate(grads, *a, |s| {
                    for (r, (srow, grow)) in s.chunks_mut(m).zip(g.chunks(m)).enumerate() {
                        for (x, y) in srow.iter_mut().zip(grow) {
                            *x += y * vc[r];
                        }
                    }
                });
                self.accumulate(grads, *c, |s| {
                    for (r, (arow, grow)) in va.data().chunks(m).zip(g.chunks(m)).enumerate() {
                        s[r] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.cols(), tb.cols());
                self.accumulate(grads, *a, |s| add_into(s, &matmul_nt(g, tb.data(), n, m, k)));
                self.accumulate(grads, *b, |s| add_into(s, &matmul_tn(ta.data(), g, n, k, m)));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if va[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if out[i] > 0.0 {
                            s[i] += g[i] * 0.5 / out[i];
                        }
                    }
                });
            }
            Op::Sin(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i].cos();
                    }
                });
            }
            Op::Cos(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i].sin();
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let m = node.value.cols();
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumSquares(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * g[0] * va[i];
                    }
                });
            }
            Op::RowNorms(a) => {
                let ta = self.value(*a);
                let m = ta.cols();
                self.accumulate(grads, *a, |s| {
                    for (r, (srow, xrow)) in s.chunks_mut(m).zip(ta.data().chunks(m)).enumerate() {
                        if out[r] > 0.0 {
                            for (x, v) in srow.iter_mut().zip(xrow) {
                                *x += g[r] * v / out[r];
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let ta = self.value(*a);
                let m = ta.cols();
                self.accumulate(grads, *a, |s| {
                    for (((srow, xrow), yrow), grow) in s
                        .chunks_mut(m)
                        .zip(ta.data().chunks(m))
                        .zip(out.chunks(m))
                        .zip(g.chunks(m))
                    {
                        let n = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            srow[j] += (grow[j] - yrow[j] * dot) / n;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |s| {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(srow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |s| {
                    for (&i, &gv) in index.iter().zip(g) {
                        if i != PAD {
                            s[i] += gv;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
