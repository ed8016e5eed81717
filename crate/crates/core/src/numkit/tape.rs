//! Reverse-mode gradient tape over [`Tensor`] operations.
//!
//! Operations are recorded into a flat arena in execution order; the
//! backward sweep walks the arena in reverse, accumulating adjoints with
//! the same fixed ordering every time. Forward values are computed by the
//! exact same [`Tensor`] kernels the rest of the crate uses, so a tape
//! evaluation and a plain evaluation of the same expression agree bitwise.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddRow(VarId, VarId),
    Square(VarId),
    Abs(VarId),
    Sigmoid(VarId),
    SoftmaxRows(VarId),
    Sum(VarId),
    Mean(VarId),
    Reshape(VarId),
    GatherRows { src: VarId, rows: Vec<usize> },
    ScatterRows { src: VarId, rows: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records primitive operations sufficient to compute the gradient of one
/// scalar output with respect to any recorded tensors.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enters a tensor (parameter or constant) onto the tape.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product; also serves as masking against a constant mask.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    /// Broadcast-adds a 1-D row vector to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let v = self.value(a).square();
        self.push(Op::Square(a), v)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.value(a).abs();
        self.push(Op::Abs(a), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Selects the listed rows of a 2-D tensor; repeated rows are allowed
    /// (their adjoints accumulate).
    pub fn gather_rows(&mut self, src: VarId, rows: &[usize]) -> Result<VarId> {
        let v = self.value(src).gather_rows(rows)?;
        Ok(self.push(Op::GatherRows { src, rows: rows.to_vec() }, v))
    }

    /// Places row `j` of a `[k, d]` source at position `rows[j]` of an
    /// otherwise-zero `[out_rows, d]` matrix. Row indices must be distinct.
    pub fn scatter_rows(&mut self, src: VarId, rows: &[usize], out_rows: usize) -> Result<VarId> {
        let s = self.value(src);
        if s.shape().len() != 2 || s.rows() != rows.len() {
            return Err(Error::Shape(format!(
                "scatter_rows source {:?} does not provide {} rows",
                s.shape(),
                rows.len()
            )));
        }
        let d = s.cols();
        let mut seen = vec![false; out_rows];
        let mut out = Tensor::zeros(&[out_rows, d]);
        for (j, &r) in rows.iter().enumerate() {
            if r >= out_rows {
                return Err(Error::Index(format!(
                    "scatter_rows target row {r} out of range for {out_rows} rows"
                )));
            }
            if seen[r] {
                return Err(Error::Index(format!("scatter_rows target row {r} repeated")));
            }
            seen[r] = true;
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(s.row(j));
        }
        Ok(self.push(Op::ScatterRows { src, rows: rows.to_vec() }, out))
    }

    /// Gradient of the scalar at `loss` with respect to each of `params`,
    /// in the same shapes. Unreached parameters get zero gradients.
    pub fn grad(&self, loss: VarId, params: &[VarId]) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Capability(format!(
                "gradient target must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }

        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            self.backward_step(idx, &g, &mut adjoints)?;
            adjoints[idx] = Some(g);
        }

        params
            .iter()
            .map(|p| {
                Ok(match &adjoints[p.0] {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(self.value(*p).shape()),
                })
            })
            .collect()
    }

    fn backward_step(
        &self,
        idx: usize,
        g: &Tensor,
        adjoints: &mut [Option<Tensor>],
    ) -> Result<()> {
        fn accumulate(adjoints: &mut [Option<Tensor>], id: VarId, contrib: Tensor) -> Result<()> {
            match &mut adjoints[id.0] {
                Some(existing) => *existing = existing.add(&contrib)?,
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(g)?;
                accumulate(adjoints, *a, da)?;
                accumulate(adjoints, *b, db)?;
            }
            Op::Transpose(a) => {
                accumulate(adjoints, *a, g.transpose()?)?;
            }
            Op::Add(a, b) => {
                accumulate(adjoints, *a, g.clone())?;
                accumulate(adjoints, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(adjoints, *a, g.clone())?;
                accumulate(adjoints, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(adjoints, *a, g.mul(self.value(*b))?)?;
                accumulate(adjoints, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, c) => {
                accumulate(adjoints, *a, g.scale(*c))?;
            }
            Op::AddRow(a, row) => {
                accumulate(adjoints, *a, g.clone())?;
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    for j in 0..n {
                        dr[j] += grow[j];
                    }
                }
                accumulate(adjoints, *row, Tensor::new_unchecked(vec![n], dr))?;
            }
            Op::Square(a) => {
                let da = g.mul(&self.value(*a).scale(2.0))?;
                accumulate(adjoints, *a, da)?;
            }
            Op::Abs(a) => {
                let sign = self.value(*a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(adjoints, *a, g.mul(&sign)?)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dy = y.map(|v| v * (1.0 - v));
                accumulate(adjoints, *a, g.mul(&dy)?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = y.row(i);
                    let grow = g.row(i);
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..n {
                        da[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(adjoints, *a, Tensor::new_unchecked(vec![m, n], da))?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                accumulate(adjoints, *a, Tensor::filled(shape, g.data()[0]))?;
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let c = g.data()[0] / src.len() as f64;
                accumulate(adjoints, *a, Tensor::filled(src.shape(), c))?;
            }
            Op::Reshape(a) => {
                accumulate(adjoints, *a, g.reshaped(self.value(*a).shape())?)?;
            }
            Op::GatherRows { src, rows } => {
                let s = self.value(*src);
                let (m, d) = (s.rows(), s.cols());
                let mut ds = vec![0.0; m * d];
                for (j, &r) in rows.iter().enumerate() {
                    let grow = g.row(j);
                    for c in 0..d {
                        ds[r * d + c] += grow[c];
                    }
                }
                accumulate(adjoints, *src, Tensor::new_unchecked(vec![m, d], ds))?;
            }
            Op::ScatterRows { src, rows } => {
                let d = g.cols();
                let mut ds = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    ds.extend_from_slice(g.row(r));
                }
                accumulate(adjoints, *src, Tensor::new_unchecked(vec![rows.len(), d], ds))?;
            }
        }
        Ok(())
    }
}
