//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] only has to walk it once in reverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Transpose(Var),
    Sum(Var),
    RowSum(Var),
    RowNorms(Var),
    Abs(Var),
    Square(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    AddRowBroadcast(Var, Var),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Build one per forward pass.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the graph it was
/// computed from.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the node does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn shape_of(v: &Tensor) -> Vec<usize> {
    v.shape().to_vec()
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

    /// Leaf node. Whether it is a trainable parameter or fixed input only
    /// matters to the caller, which picks the gradients it needs.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `max(a, floor)` elementwise; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums of an `M x N` matrix, as an `M x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let data = (0..m)
            .map(|i| self.value(a).data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let out = Tensor::matrix(m, 1, data)?;
        Ok(self.push(out, Op::RowSum(a)))
    }

    /// Per-row L2 norms of an `M x N` matrix, as an `M x 1` column.
    /// Zero rows give 0 with a zero subgradient.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let norms = row_l2_norms(self.value(a))?;
        let out = norms.reshape(&[norms.len(), 1])?;
        Ok(self.push(out, Op::RowNorms(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise softmax. `mask[i * cols + j] == true` keeps entry `(i, j)`;
    /// hidden entries get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = softmax_rows(self.value(a), mask)?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(first).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::dim("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Tiles a `1 x N` row into `rows x N`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.value(a).dims2()?;
        if r != 1 {
            return Err(Error::dim("repeat_rows", self.value(a).shape(), &[1, n]));
        }
        let row = self.value(a).data().to_vec();
        let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(out, Op::RepeatRows(a)))
    }

    /// `M x N` matrix plus a `1 x N` row added to every row (bias).
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (r, rn) = self.value(row).dims2()?;
        if r != 1 || rn != n {
            return Err(Error::dim("add_row_broadcast", self.value(a).shape(), self.value(row).shape()));
        }
        let bias = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bias) {
                *d += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::AddRowBroadcast(a, row)))
    }

    /// Gathers rows by index (rows may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Contract(format!("row index {i} out of range for {m} rows")));
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let out = Tensor::matrix(indices.len(), n, data)?;
        Ok(self.push(out, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose()?)?.reshape(av.shape())?;
                    let gb = av.transpose()?.matmul(&g)?.reshape(bv.shape())?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(self.value(*b), |g, y| g * y)?;
                    let gb = g.zip_with(self.value(*a), |g, x| g * x)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip_with(bv, |g, y| g / y)?;
                    // d(x/y)/dy = -out / y
                    let gb = g
                        .zip_with(&node.value, |g, o| g * o)?
                        .zip_with(bv, |go, y| -go / y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::AddScalar(a) => accumulate(&mut grads, *a, g)?,
                Op::ClampMin(a, floor) => {
                    let ga = g.zip_with(self.value(*a), |g, x| if x > *floor { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?.reshape(self.value(*a).shape())?)?,
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let (m, n) = av.dims2()?;
                    let data = (0..m).flat_map(|i| std::iter::repeat_n(g.data()[i], n)).collect();
                    accumulate(&mut grads, *a, Tensor::new(shape_of(av), data)?)?;
                }
                Op::RowNorms(a) => {
                    let av = self.value(*a);
                    let (m, n) = av.dims2()?;
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        let norm = node.value.data()[i];
                        if norm > 0.0 {
                            let s = g.data()[i] / norm;
                            for j in 0..n {
                                data[i * n + j] = s * av.data()[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(shape_of(av), data)?)?;
                }
                Op::Abs(a) => {
                    let ga = g.zip_with(self.value(*a), |g, x| g * sign(x))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Square(a) => {
                    let ga = g.zip_with(self.value(*a), |g, x| 2.0 * g * x)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_with(&node.value, |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = y.dims2()?;
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            data[i * n + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(shape_of(self.value(*a)), data)?)?;
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.dims2()?.1;
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(shape_of(pv), data)?)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.len();
                        let data = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        accumulate(&mut grads, p, Tensor::new(shape_of(pv), data)?)?;
                    }
                }
                Op::RepeatRows(a) => {
                    let summed = g.mean_rows()?.scale(g.rows() as f64);
                    accumulate(&mut grads, *a, summed.reshape(self.value(*a).shape())?)?;
                }
                Op::AddRowBroadcast(a, row) => {
                    let summed = g.mean_rows()?.scale(g.rows() as f64);
                    accumulate(&mut grads, *row, summed.reshape(self.value(*row).shape())?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::SelectRows(a, indices) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut data = vec![0.0; av.len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            data[i * n + j] += g.data()[k * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(shape_of(av), data)?)?;
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g.reshape(self.value(*a).shape())?)?,
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| shape_of(&n.value)).collect(),
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Row-wise, max-shifted softmax. `mask` keeps entries marked `true`.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(Error::dim("softmax_rows mask", x.shape(), &[mask.len()]));
        }
    }
    let keep = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * n + j]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        if !(0..n).any(|j| keep(i, j)) {
            return Err(Error::InvalidMask { row: i });
        }
        let max = (0..n)
            .filter(|&j| keep(i, j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..n {
            if keep(i, j) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                total += e;
            }
        }
        out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row Euclidean norms of an `M x N` matrix, as a length-`M` vector.
pub fn row_l2_norms(x: &Tensor) -> Result<Tensor> {
    let (m, _) = x.dims2()?;
    let data = (0..m)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(Tensor::vector(data))
}
