//! A small reverse-mode tape over `f64` matrices, enough to differentiate
//! the flow-matching loss through a block stack.
//!
//! Each op mirrors a plain kernel in [`crate::linalg`] or
//! [`crate::tokens`] so that a taped forward pass reproduces the plain one.

use std::sync::Arc;

use crate::linalg::{gelu, gelu_grad, layer_norm_rows, silu, silu_grad, softmax_rows, Matrix, LAYER_NORM_EPS};
use crate::tokens::RopeTable;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Rope(Var, Arc<RopeTable<f64>>),
    MeanSquare(Var),
}

struct Node {
    value: Matrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations and replays them backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix<f64>>>,
}

impl Grads {
    /// Gradient of `v`; zeros if nothing flowed into it.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Matrix<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
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

    fn push(&mut self, value: Matrix<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, m: Matrix<f64>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input.
    pub fn constant(&mut self, m: Matrix<f64>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a).add_row(self.value(r).as_slice());
        self.push(v, Op::AddRow(a, r), &[a, r])
    }

    /// Multiplies every row of `a` elementwise by the `1 × c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a).mul_row(self.value(r).as_slice());
        self.push(v, Op::MulRow(a, r), &[a, r])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| s + x);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let v = layer_norm_rows(self.value(a));
        self.push(v, Op::LayerNorm(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ms: Vec<&Matrix<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&ms);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ms: Vec<&Matrix<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&ms);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    /// Rotary encoding with a prebuilt table.
    pub fn rope(&mut self, a: Var, table: Arc<RopeTable<f64>>) -> Var {
        let v = table
            .rotate(self.value(a), false)
            .expect("rope table and matrix disagree");
        self.push(v, Op::Rope(a, table), &[a])
    }

    /// Mean of squared entries, as a `1 × 1` matrix.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.as_slice().len().max(1) as f64;
        let s = m.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        self.push(Matrix::filled(1, 1, s), Op::MeanSquare(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Matrix<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Matrix<f64>, grads: &mut Vec<Option<Matrix<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(e) => e.add_assign(&d),
                    None => grads[v.0] = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul_t(self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, self.value(*a).t_matmul(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.t_matmul(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.scale(-1.0), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.hadamard(self.value(*b)), &mut grads);
                    acc(*b, g.hadamard(self.value(*a)), &mut grads);
                }
                Op::AddRow(a, r) => {
                    acc(*r, column_sums(&g), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r).as_slice();
                    acc(*r, column_sums(&g.hadamard(self.value(*a))), &mut grads);
                    acc(*a, g.mul_row(rv), &mut grads);
                }
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::Gelu(a) => {
                    let d = self.value(*a).map(gelu_grad).hadamard(&g);
                    acc(*a, d, &mut grads);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).map(silu_grad).hadamard(&g);
                    acc(*a, d, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = g.hadamard(y);
                    for r in 0..d.rows() {
                        let s: f64 = d.row(r).iter().sum();
                        let yr = y.row(r);
                        for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                            *v -= yr[c] * s;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                            *v = inv * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if rows > 0 {
                            acc(*p, g.slice_rows(start, rows), &mut grads);
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        acc(*p, g.slice_cols(start, cols), &mut grads);
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Rope(a, table) => {
                    let d = table.rotate(&g, true).expect("rope table and gradient disagree");
                    acc(*a, d, &mut grads);
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let n = x.as_slice().len().max(1) as f64;
                    let s = g[(0, 0)] * 2.0 / n;
                    acc(*a, x.scale(s), &mut grads);
                }
            }
        }
        Grads { grads }
    }
}

fn column_sums(g: &Matrix<f64>) -> Matrix<f64> {
    let mut out = vec![0.0; g.cols()];
    for r in g.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}
