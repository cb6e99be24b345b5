//! The recording tape: primitive ops, forward evaluation, backward pass.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

enum Op {
    /// Constant or no-grad leaf; gradients stop here.
    Source,
    /// Differentiable leaf bound to a parameter slot.
    Param(usize),
    MatMul(Id, Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    /// (n x d) op (1 x d), broadcast down rows.
    AddRow(Id, Id),
    SubRow(Id, Id),
    MulRow(Id, Id),
    DivRow(Id, Id),
    /// (n x d) op (n x 1), broadcast across columns.
    AddCol(Id, Id),
    SubCol(Id, Id),
    MulCol(Id, Id),
    DivCol(Id, Id),
    Scale(Id, f64),
    AddScalar(Id),
    Relu(Id),
    Sigmoid(Id),
    Tanh(Id),
    Exp(Id),
    Ln(Id),
    Sqrt(Id),
    /// (n x d) -> (n x 1).
    RowSum(Id),
    /// (n x d) -> (1 x d), mean over rows.
    ColMean(Id),
    /// (n x d) -> (1 x 1).
    SumAll(Id),
    Transpose(Id),
    /// Select rows by index; repeated indices scatter-add on backward.
    GatherRows(Id, Vec<usize>),
    SliceCols(Id, usize, usize),
    ConcatCols(Vec<Id>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A computation tape.  With gradients disabled the same code path only
/// evaluates values, so training and inference share one implementation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    /// Tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Evaluation-only tape: every leaf is a constant, backward is refused.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Value of a node.
    pub fn value(&self, id: Id) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: Id) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not scalar");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Id {
        // In evaluation mode no backward pass will run, so op metadata is
        // irrelevant; store Source to keep the tape lean.
        let op = if self.grad_enabled { op } else { Op::Source };
        self.nodes.push(Node { value, op });
        Id(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Array2<f64>) -> Id {
        self.push(value, Op::Source)
    }

    /// Leaf for the named parameter.  Trainable parameters record their slot
    /// so backward can report a gradient; frozen ones enter as constants.
    pub fn bind(&mut self, params: &ParamSet, name: &str, trainable: bool) -> Id {
        let idx = params.idx(name);
        let value = params.value(idx).clone();
        if trainable && self.grad_enabled {
            self.push(value, Op::Param(idx))
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    fn check_row(&self, a: Id, r: Id) {
        assert_eq!(self.value(r).nrows(), 1, "row operand must be 1 x d");
        assert_eq!(self.value(a).ncols(), self.value(r).ncols(), "column mismatch");
    }

    fn check_col(&self, a: Id, c: Id) {
        assert_eq!(self.value(c).ncols(), 1, "column operand must be n x 1");
        assert_eq!(self.value(a).nrows(), self.value(c).nrows(), "row mismatch");
    }

    pub fn add_row(&mut self, a: Id, r: Id) -> Id {
        self.check_row(a, r);
        let v = self.value(a) + &self.value(r).row(0);
        self.push(v, Op::AddRow(a, r))
    }

    pub fn sub_row(&mut self, a: Id, r: Id) -> Id {
        self.check_row(a, r);
        let v = self.value(a) - &self.value(r).row(0);
        self.push(v, Op::SubRow(a, r))
    }

    pub fn mul_row(&mut self, a: Id, r: Id) -> Id {
        self.check_row(a, r);
        let v = self.value(a) * &self.value(r).row(0);
        self.push(v, Op::MulRow(a, r))
    }

    pub fn div_row(&mut self, a: Id, r: Id) -> Id {
        self.check_row(a, r);
        let v = self.value(a) / &self.value(r).row(0);
        self.push(v, Op::DivRow(a, r))
    }

    pub fn add_col(&mut self, a: Id, c: Id) -> Id {
        self.check_col(a, c);
        let v = self.value(a) + &self.value(c).column(0).insert_axis(Axis(1));
        self.push(v, Op::AddCol(a, c))
    }

    pub fn sub_col(&mut self, a: Id, c: Id) -> Id {
        self.check_col(a, c);
        let v = self.value(a) - &self.value(c).column(0).insert_axis(Axis(1));
        self.push(v, Op::SubCol(a, c))
    }

    pub fn mul_col(&mut self, a: Id, c: Id) -> Id {
        self.check_col(a, c);
        let v = self.value(a) * &self.value(c).column(0).insert_axis(Axis(1));
        self.push(v, Op::MulCol(a, c))
    }

    pub fn div_col(&mut self, a: Id, c: Id) -> Id {
        self.check_col(a, c);
        let v = self.value(a) / &self.value(c).column(0).insert_axis(Axis(1));
        self.push(v, Op::DivCol(a, c))
    }

    pub fn scale(&mut self, a: Id, s: f64) -> Id {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Id, s: f64) -> Id {
        let v = self.value(a) + s;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        // Branch on sign for overflow-safe evaluation.
        let v = self.value(a).mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Id) -> Id {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Id) -> Id {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn row_sum(&mut self, a: Id) -> Id {
        let v = self
            .value(a)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        self.push(v, Op::RowSum(a))
    }

    pub fn col_mean(&mut self, a: Id) -> Id {
        let n = self.value(a).nrows() as f64;
        let v = (self.value(a).sum_axis(Axis(0)) / n)
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::ColMean(a))
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Id, indices: &[usize]) -> Id {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (out_row, &i) in indices.iter().enumerate() {
            v.row_mut(out_row).assign(&src.row(i));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, end: usize) -> Id {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        let views: Vec<_> = parts.iter().map(|&id| self.value(id).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&mut self, a: Id) -> Id {
        let count = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count)
    }

    /// Backpropagate from scalar node `loss`; returns per-slot parameter
    /// gradients (None where a parameter was never bound or never used).
    pub fn backward(&self, loss: Id, param_count: usize) -> Result<Vec<Option<Array2<f64>>>> {
        if !self.grad_enabled {
            return Err(Error::Numerical(
                "backward called on an evaluation-only tape".into(),
            ));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::DimensionMismatch(
                "backward needs a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], target: Id, delta: Array2<f64>) {
            match &mut grads[target.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        let mut param_grads: Vec<Option<Array2<f64>>> = vec![None; param_count];
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let out = &self.nodes[id].value;
            match &self.nodes[id].op {
                Op::Source => {}
                Op::Param(slot) => match &mut param_grads[*slot] {
                    Some(pg) => *pg += &g,
                    slot_ref => *slot_ref = Some(g),
                },
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = g * &self.nodes[a.0].value;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, dr);
                }
                Op::SubRow(a, r) => {
                    let dr = -g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, dr);
                }
                Op::MulRow(a, r) => {
                    let row = self.nodes[r.0].value.row(0).to_owned();
                    let da = &g * &row;
                    let dr = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0))
                        .to_owned();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *r, dr);
                }
                Op::DivRow(a, r) => {
                    let row = self.nodes[r.0].value.row(0).to_owned();
                    let da = &g / &row;
                    // d/dr (a / r) = -a / r^2 = -out / r
                    let dr = -(&g * out / &row)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0))
                        .to_owned();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *r, dr);
                }
                Op::AddCol(a, c) => {
                    let dc = g.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *c, dc);
                }
                Op::SubCol(a, c) => {
                    let dc = -g.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *c, dc);
                }
                Op::MulCol(a, c) => {
                    let col = self.nodes[c.0].value.column(0).insert_axis(Axis(1)).to_owned();
                    let da = &g * &col;
                    let dc = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1))
                        .to_owned();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *c, dc);
                }
                Op::DivCol(a, c) => {
                    let col = self.nodes[c.0].value.column(0).insert_axis(Axis(1)).to_owned();
                    let da = &g / &col;
                    let dc = -(&g * out / &col)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1))
                        .to_owned();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *c, dc);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let da = &g * &out.mapv(|y| (y > 0.0) as u8 as f64);
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = &g * &out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = &g * &out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, da);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * out),
                Op::Ln(a) => {
                    let da = &g / &self.nodes[a.0].value;
                    acc(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = &g / &(out * 2.0);
                    acc(&mut grads, *a, da);
                }
                Op::RowSum(a) => {
                    let (n, d) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    for i in 0..n {
                        da.row_mut(i).fill(g[[i, 0]]);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::ColMean(a) => {
                    let (n, d) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    let scaled = g.row(0).mapv(|v| v / n as f64);
                    for i in 0..n {
                        da.row_mut(i).assign(&scaled);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    acc(&mut grads, *a, da);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::GatherRows(a, indices) => {
                    let (n, d) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    for (out_row, &i) in indices.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g.row(out_row);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, _end) => {
                    let (n, d) = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    da.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        acc(&mut grads, p, dp);
                        offset += w;
                    }
                }
            }
        }
        Ok(param_grads)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
