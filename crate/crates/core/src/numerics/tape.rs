//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! Operations are appended to a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. Leaves are either trainable parameters
//! (gradients reported by name), differentiable inputs (gradients
//! retrievable by [`Var`]), or constants (never differentiated).
//!
//! | op                 | forward                     | backward                                  |
//! |--------------------|-----------------------------|-------------------------------------------|
//! | `matmul`           | `A·B`                       | `dA = G·Bᵀ`, `dB = Aᵀ·G`                  |
//! | `add` / `sub`      | `A ± B`                     | `dA = G`, `dB = ±G`                       |
//! | `add_row`          | `A + 1·b`                   | `dA = G`, `db = Σ_rows G`                 |
//! | `scale`            | `k·A`                       | `dA = k·G`                                |
//! | `transpose`        | `Aᵀ`                        | `dA = Gᵀ`                                 |
//! | `softmax`          | `s = softmax(A)` along axis | `dA = s ⊙ (G − ⟨G, s⟩)` along axis        |
//! | `gelu`             | `x·Φ(x)`                    | `G ⊙ (Φ(x) + x·φ(x))`                     |
//! | `l2_normalize`     | `y = x/‖x‖` per row         | `(G − y⟨G, y⟩)/‖x‖` per row               |
//! | `column_mass`      | `a_ij / Σ_i a_ij`           | `(G_ij − Σ_k G_kj b_kj) / Σ_i a_ij`       |
//! | `mean_rows`        | column means                | `G / n` broadcast                         |
//! | `concat_rows/cols` | stacking                    | slicing                                   |
//! | `im2col3x3`        | neighborhood gather         | scatter-add                               |
//! | `gather`           | selected entries, `k × 1`   | scatter-add                               |
//! | `cross_entropy`    | `−mean Σ y ln max(p, ε)`    | `−y / (n·p)` where `p > ε`                |

use std::collections::BTreeMap;

use super::array::{Array2, Axis};
use super::kernels;
use crate::error::{dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Array2>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var, Axis),
    Gelu(Var),
    L2Normalize(Var),
    ColumnMass(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Im2Col3x3 { x: Var, height: usize, width: usize },
    Gather { a: Var, indices: Vec<(usize, usize)> },
    CrossEntropy { p: Var, target: Array2 },
}

#[derive(Debug)]
enum LeafKind {
    Constant,
    Input,
    Param(String),
}

#[derive(Debug)]
struct Node {
    value: Array2,
    op: Op,
    leaf: Option<LeafKind>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Array2>>,
}

impl Backward {
    /// Gradient with respect to `var`, if anything flowed into it.
    pub fn wrt(&self, var: Var) -> Option<&Array2> {
        self.grads[var.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push_leaf(&mut self, value: Array2, kind: LeafKind) -> Var {
        let needs_grad = !matches!(kind, LeafKind::Constant);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            leaf: Some(kind),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Array2) -> Var {
        self.push_leaf(value, LeafKind::Constant)
    }

    /// A differentiable leaf whose gradient is read back via [`Backward::wrt`].
    pub fn input(&mut self, value: Array2) -> Var {
        self.push_leaf(value, LeafKind::Input)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Array2) -> Var {
        self.push_leaf(value, LeafKind::Param(name.into()))
    }

    fn push(&mut self, value: Array2, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            leaf: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(dim_err(
                "add_row",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let value = kernels::softmax(self.value(a), axis);
        self.push(value, Op::Softmax(a, axis), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let value = kernels::l2_normalize_rows(self.value(a))?;
        Ok(self.push(value, Op::L2Normalize(a), &[a]))
    }

    pub fn column_mass(&mut self, a: Var) -> Var {
        let value = kernels::normalize_column_mass(self.value(a));
        self.push(value, Op::ColumnMass(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let arrays: Vec<&Array2> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Array2::vstack(&arrays)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(dim_err(
                "concat_cols",
                format!("{:?} beside {:?}", x.shape(), y.shape()),
            ));
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let value = Array2::from_vec(x.rows(), cols, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let value = kernels::im2col3x3(self.value(x), height, width)?;
        Ok(self.push(value, Op::Im2Col3x3 { x, height, width }, &[x]))
    }

    /// Picks `(row, col)` entries of `a` into a `k × 1` column.
    pub fn gather(&mut self, a: Var, indices: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(indices.len());
        for &(r, c) in indices {
            if r >= x.rows() || c >= x.cols() {
                return Err(dim_err(
                    "gather",
                    format!("index ({r}, {c}) outside {:?}", x.shape()),
                ));
            }
            data.push(x.get(r, c));
        }
        let value = Array2::from_vec(indices.len(), 1, data)?;
        let op = Op::Gather {
            a,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[a]))
    }

    /// Scalar (`1 × 1`) mean cross-entropy of row-stochastic `p` against
    /// constant targets.
    pub fn cross_entropy(&mut self, p: Var, target: Array2) -> Result<Var> {
        let loss = kernels::cross_entropy(self.value(p), &target)?;
        let value = Array2::filled(1, 1, loss);
        Ok(self.push(value, Op::CrossEntropy { p, target }, &[p]))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Backward {
        self.backward_seeded(&[(output, Array2::filled(1, 1, 1.0))])
    }

    /// Backpropagates from arbitrary seed gradients on one or more nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2)]) -> Backward {
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.leaf.is_some() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Backward { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2, grads: &mut [Option<Array2>]) {
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    accumulate(grads, *a, g.matmul_t(bv).expect("matmul grad shape"));
                }
                if wants(b) {
                    accumulate(grads, *b, av.t_matmul(g).expect("matmul grad shape"));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::AddRow(a, bias) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(bias) {
                    let summed = g.mean_rows().scale(g.rows() as f64);
                    accumulate(grads, *bias, summed);
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Softmax(a, axis) => {
                accumulate(grads, *a, kernels::softmax_backward(&node.value, g, *axis))
            }
            Op::Gelu(a) => accumulate(grads, *a, kernels::gelu_backward(self.value(*a), g)),
            Op::L2Normalize(a) => accumulate(
                grads,
                *a,
                kernels::l2_normalize_rows_backward(self.value(*a), &node.value, g),
            ),
            Op::ColumnMass(a) => accumulate(
                grads,
                *a,
                kernels::normalize_column_mass_backward(self.value(*a), &node.value, g),
            ),
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut dx = Array2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *d = gv * inv;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if wants(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, *p, Array2::from_vec(rows, cols, slice).unwrap());
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                if wants(a) {
                    let mut da = Array2::zeros(rows, ca);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    let mut db = Array2::zeros(rows, cb);
                    for r in 0..rows {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Im2Col3x3 { x, height, width } => {
                let channels = self.value(*x).cols();
                accumulate(
                    grads,
                    *x,
                    kernels::im2col3x3_backward(g, *height, *width, channels),
                );
            }
            Op::Gather { a, indices } => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Array2::zeros(rows, cols);
                for (k, &(r, c)) in indices.iter().enumerate() {
                    da.set(r, c, da.get(r, c) + g.data()[k]);
                }
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy { p, target } => {
                let dp = kernels::cross_entropy_backward(self.value(*p), target, g.data()[0]);
                accumulate(grads, *p, dp);
            }
        }
    }

    /// Collects parameter gradients by name. Parameters that received no
    /// gradient get an explicit zero array so every trainable parameter has
    /// exactly one entry.
    pub fn param_grads(&self, backward: &Backward) -> Gradients {
        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(LeafKind::Param(name)) = &node.leaf {
                let g = backward.grads[idx]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(node.value.rows(), node.value.cols()));
                match out.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2>], v: Var, g: Array2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
