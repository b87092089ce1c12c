//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every primitive application in execution order, so the
//! node list is already topologically sorted. [`Tape::backward`] walks it in
//! reverse and accumulates adjoints. Every primitive checks its output for
//! NaN/Inf and fails with [`Error::NonFinite`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::sparse::Csr;
use crate::tensor::Tensor;
use crate::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Identity of a trainable parameter inside a [`crate::model::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SparseMatMul(Arc<Csr>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Square(Var),
    RowSoftmax(Var),
    LogSumExpRows(Var),
    L2NormalizeRows(Var),
    InvSqNormRows(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Diag(Var),
    MeanPool(Vec<Var>),
    Dropout(Var, Tensor),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Tensor,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics and hyperparameters of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::filled(1, width, 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Adjoints of every node after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

/// Parameter gradients; absent entries mean zero gradient.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

impl Gradients {
    /// Gradient with respect to any node, `None` when it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param_map(&self) -> GradientMap {
        let mut map = GradientMap::new();
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                match map.get_mut(&id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        map.insert(id, g.clone());
                    }
                }
            }
        }
        map
    }
}

fn colsum(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn rowsum(t: &Tensor) -> Tensor {
    let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
    Tensor::from_vec(t.rows(), 1, data).expect("rowsum shape")
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// A differentiable leaf registered under `id` in the gradient map.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, true, "param")?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg, "matmul_t")
    }

    /// Constant sparse matrix times a dense node.
    pub fn sparse_matmul(&mut self, s: &Arc<Csr>, x: Var) -> Result<Var> {
        let value = s.matmul(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(value, Op::SparseMatMul(Arc::clone(s), x), rg, "sparse_matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    fn check_row(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err(
                op,
                format!("row {:?} against {:?}", rv.shape(), xv.shape()),
            ));
        }
        Ok(())
    }

    /// `x + r` with `r` a `1 x d` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row("add_row", x, r)?;
        let mut value = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_mut(i).iter_mut().zip(&row) {
                *a += b;
            }
        }
        let rg = self.rg(&[x, r]);
        self.push(value, Op::AddRow(x, r), rg, "add_row")
    }

    /// `x * r` elementwise with `r` a `1 x d` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row("mul_row", x, r)?;
        let mut value = self.value(x).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_mut(i).iter_mut().zip(&row) {
                *a *= b;
            }
        }
        let rg = self.rg(&[x, r]);
        self.push(value, Op::MulRow(x, r), rg, "mul_row")
    }

    /// `x * c` with `c` an `n x 1` column broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(shape_err(
                "mul_col",
                format!("column {:?} against {:?}", cv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let s = cv.get(i, 0);
            for a in value.row_mut(i) {
                *a *= s;
            }
        }
        let rg = self.rg(&[x, c]);
        self.push(value, Op::MulCol(x, c), rg, "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::log);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg, "log")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSigmoid(a), rg, "log_sigmoid")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg, "leaky_relu")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::sqrt);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sqrt(a), rg, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg, "square")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSoftmax(a), rg, "row_softmax")
    }

    /// `n x k -> n x 1` stable log-sum-exp per row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
            })
            .collect();
        let value = Tensor::from_vec(x.rows(), 1, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSumExpRows(a), rg, "logsumexp_rows")
    }

    /// Scale each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = crate::tensor::norm(row);
            if n > 0.0 {
                for v in row {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::L2NormalizeRows(a), rg, "l2_normalize_rows")
    }

    /// Divide each row by its squared L2 norm; zero rows stay zero.
    pub fn inv_sq_norm_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n2 = crate::tensor::dot(row, row);
            if n2 > 0.0 {
                for v in row {
                    *v /= n2;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::InvSqNormRows(a), rg, "inv_sq_norm_rows")
    }

    /// `n x d -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = rowsum(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg, "row_sum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::EmptyBatch("mean"));
        }
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg, "mean")
    }

    /// Row-wise inner products, `n x d, n x d -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..av.rows())
            .map(|r| crate::tensor::dot(av.row(r), bv.row(r)))
            .collect();
        let value = Tensor::from_vec(av.rows(), 1, data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::RowDot(a, b), rg, "row_dot")
    }

    /// Inner product of two equally shaped tensors as a `1 x 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| shape_err("concat_cols", "no parts".into()))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("[{start},{end}) of {} columns", x.cols()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Tensor::from_vec(x.rows(), end - start, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} of {}", x.rows()),
            ));
        }
        let value = x.gather_rows(idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg, "gather_rows")
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(shape_err("diag", format!("{:?} not square", x.shape())));
        }
        let data = (0..x.rows()).map(|i| x.get(i, i)).collect();
        let value = Tensor::from_vec(x.rows(), 1, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Diag(a), rg, "diag")
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_pool(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("mean_pool", "no parts".into()))?;
        let mut value = self.value(first).clone();
        for p in &parts[1..] {
            same_shape("mean_pool", &value, self.value(*p))?;
            value.add_assign(self.value(*p));
        }
        value.scale_assign(1.0 / parts.len() as f64);
        let rg = self.rg(parts);
        self.push(value, Op::MeanPool(parts.to_vec()), rg, "mean_pool")
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        let keep = 1.0 - rate;
        let x = self.value(a);
        let mask_data = (0..x.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(x.rows(), x.cols(), mask_data)?;
        self.dropout_with_mask(a, mask)
    }

    /// Multiply by a fixed (already scaled) dropout mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        same_shape("dropout", self.value(a), &mask)?;
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        let rg = self.rg(&[a]);
        self.push(value, Op::Dropout(a, mask), rg, "dropout")
    }

    /// Mask of the most recent dropout applied to produce `v`, if any.
    pub fn dropout_mask(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Dropout(_, m) => Some(m),
            _ => None,
        }
    }

    /// Batch normalization over rows. In train mode batch statistics are used
    /// (biased variance) and the running statistics are updated with the
    /// unbiased variance; in eval mode the running statistics are used.
    /// Returns the output and the per-feature `1/sqrt(var + eps)` that was applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<(Var, Tensor)> {
        self.check_row("batch_norm", x, gamma)?;
        self.check_row("batch_norm", x, beta)?;
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if n == 0 {
            return Err(Error::EmptyBatch("batch_norm"));
        }
        let (mean, var) = if train {
            let mut mean = colsum(xv);
            mean.scale_assign(1.0 / n as f64);
            let mut var = Tensor::zeros(1, d);
            for r in 0..n {
                for (c, v) in xv.row(r).iter().enumerate() {
                    let dv = v - mean.get(0, c);
                    var.data_mut()[c] += dv * dv;
                }
            }
            var.scale_assign(1.0 / n as f64);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std = var.map(|v| 1.0 / libm::sqrt(v + state.eps));
        let mut xhat = xv.clone();
        for r in 0..n {
            for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean.get(0, c)) * inv_std.get(0, c);
            }
        }
        if train {
            let m = state.momentum;
            let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            for c in 0..d {
                let rm = state.running_mean.get(0, c);
                state.running_mean.set(0, c, (1.0 - m) * rm + m * mean.get(0, c));
                let rv = state.running_var.get(0, c);
                state
                    .running_var
                    .set(0, c, (1.0 - m) * rv + m * var.get(0, c) * unbias);
            }
        }
        let mut value = xhat.clone();
        let (g, b) = (self.value(gamma).clone(), self.value(beta).clone());
        for r in 0..n {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g.get(0, c) + b.get(0, c);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.clone(),
                batch_stats: train,
            },
            rg,
            "batch_norm",
        )?;
        Ok((out, inv_std))
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t_matmul(av)?);
                }
            }
            Op::SparseMatMul(s, x) => {
                self.accumulate(grads, *x, s.t_matmul(g)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *r, colsum(g));
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    for (a, b) in gx.row_mut(i).iter_mut().zip(rv.data()) {
                        *a *= b;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *r, colsum(&g.zip_map(xv, |a, b| a * b)));
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    let s = cv.get(i, 0);
                    for a in gx.row_mut(i) {
                        *a *= s;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *c, rowsum(&g.zip_map(xv, |a, b| a * b)));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |u, e| u * e)),
            Op::Log(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(xv, |u, x| u / x));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |u, s| u * s * (1.0 - s)))
            }
            Op::LogSigmoid(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(xv, |u, x| u * sigmoid(-x)));
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a);
                let s = *slope;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(xv, |u, x| if x > 0.0 { u } else { s * u }),
                );
            }
            Op::Sqrt(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(y, |u, r| if r > 0.0 { u / (2.0 * r) } else { 0.0 }),
            ),
            Op::Square(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(xv, |u, x| 2.0 * x * u));
            }
            Op::RowSoftmax(a) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::tensor::dot(yr, gr);
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LogSumExpRows(a) => {
                let xv = self.value(*a);
                let mut gx = xv.clone();
                for r in 0..xv.rows() {
                    let lse = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for v in gx.row_mut(r) {
                        *v = gr * libm::exp(*v - lse);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::L2NormalizeRows(a) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = crate::tensor::norm(xv.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::tensor::dot(yr, gr);
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * inner) / n;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::InvSqNormRows(a) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let n2 = crate::tensor::dot(xr, xr);
                    if n2 == 0.0 {
                        continue;
                    }
                    let s = 1.0 / n2;
                    let gr = g.row(r);
                    let xg = crate::tensor::dot(xr, gr);
                    for ((o, xv), gv) in gx.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = s * gv - 2.0 * s * s * xg * xv;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::RowSum(a) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Mean(a) => {
                let xv = self.value(*a);
                let s = g.item() / xv.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(xv.rows(), xv.cols(), s));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = bv.clone();
                let mut gb = av.clone();
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    gb.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::GatherRows(a, idx) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Diag(a) => {
                let xv = self.value(*a);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    gx.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::MeanPool(parts) => {
                let s = 1.0 / parts.len() as f64;
                for p in parts {
                    self.accumulate(grads, *p, g.map(|v| v * s));
                }
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, g.zip_map(mask, |u, m| u * m)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.value(*gamma);
                let n = xhat.rows();
                self.accumulate(grads, *beta, colsum(g));
                self.accumulate(grads, *gamma, colsum(&g.zip_map(xhat, |a, b| a * b)));
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(n, xhat.cols());
                    if *batch_stats {
                        let sum_g = colsum(g);
                        let sum_gx = colsum(&g.zip_map(xhat, |a, b| a * b));
                        let nf = n as f64;
                        for r in 0..n {
                            for c in 0..xhat.cols() {
                                let k = gv.get(0, c) * inv_std.get(0, c) / nf;
                                let v = k
                                    * (nf * g.get(r, c)
                                        - sum_g.get(0, c)
                                        - xhat.get(r, c) * sum_gx.get(0, c));
                                gx.set(r, c, v);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..xhat.cols() {
                                gx.set(r, c, g.get(r, c) * gv.get(0, c) * inv_std.get(0, c));
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}
