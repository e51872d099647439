//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records each primitive as it is evaluated. Parameters enter the
//! tape through a [`Source`] bound to a [`ParamVector`]; `backward` returns one
//! flat gradient per source, laid out like the parameter vector itself.
//!
//! Only the primitives needed by the flow, the objectives and the
//! classification head are registered: affine maps, elementwise
//! nonlinearities, the coupling combine (built from slicing, centering and
//! elementwise ops), the standard-normal log-density, softmax cross-entropy,
//! row normalisation and sum/mean reductions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, IconError, Result};
use crate::numerics::{gemm_into, Matrix, RngStream, HALF_LOG_2PI};

/// One named block of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter array with a named layout table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Vec<Segment>,
    index: BTreeMap<String, usize>,
    values: Vec<f64>,
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamVector {
    pub fn new() -> Self {
        Self {
            layout: Vec::new(),
            index: BTreeMap::new(),
            values: Vec::new(),
        }
    }

    /// Appends a zero-initialised `rows × cols` segment.
    pub fn push(&mut self, name: &str, rows: usize, cols: usize) -> Result<&mut [f64]> {
        if self.index.contains_key(name) {
            return contract(format!("duplicate parameter segment `{name}`"));
        }
        let offset = self.values.len();
        self.index.insert(name.to_string(), self.layout.len());
        self.layout.push(Segment {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.values.resize(offset + rows * cols, 0.0);
        Ok(&mut self.values[offset..])
    }

    /// Rebuilds a vector from a stored layout and values.
    pub fn from_parts(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        let mut index = BTreeMap::new();
        for (i, s) in layout.iter().enumerate() {
            if s.offset != expected {
                return contract(format!("segment `{}` has offset {}, expected {expected}", s.name, s.offset));
            }
            expected += s.len();
            if index.insert(s.name.clone(), i).is_some() {
                return contract(format!("duplicate parameter segment `{}`", s.name));
            }
        }
        if expected != values.len() {
            return contract(format!(
                "layout covers {expected} values but {} were supplied",
                values.len()
            ));
        }
        Ok(Self {
            layout,
            index,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.index
            .get(name)
            .map(|&i| &self.layout[i])
            .ok_or_else(|| IconError::Contract(format!("unknown parameter segment `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let s = self.segment(name)?;
        Ok(&self.values[s.offset..s.offset + s.len()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Ok(&mut self.values[s.offset..s.offset + s.len()])
    }

    /// The segment as a matrix (copy).
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let s = self.segment(name)?;
        Matrix::from_vec(s.rows, s.cols, self.values[s.offset..s.offset + s.len()].to_vec())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => {
                let seg = self
                    .layout
                    .iter()
                    .find(|s| p >= s.offset && p < s.offset + s.len())
                    .map_or("?", |s| s.name.as_str());
                Err(IconError::NumericDomain(format!(
                    "non-finite parameter in segment `{seg}` (flat index {p})"
                )))
            }
        }
    }
}

/// Loss value and its gradient with respect to one parameter vector.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter vector bound to a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Source(usize);

/// Registered elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Log,
    Square,
    Neg,
}

impl Unary {
    pub fn from_name(name: &str) -> Result<Unary> {
        Ok(match name {
            "tanh" => Unary::Tanh,
            "exp" => Unary::Exp,
            "log" => Unary::Log,
            "square" => Unary::Square,
            "neg" => Unary::Neg,
            other => return Err(IconError::UnsupportedOp(other.to_string())),
        })
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param { source: usize, offset: usize },
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    PermuteCols(Var, Vec<usize>),
    CenterRows(Var),
    BroadcastRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    NormalizeRows(Var),
    SoftmaxXent(Var, Vec<usize>),
    StdNormalLogDensity(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    source_lens: Vec<usize>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    pub fn bind(&mut self, params: &ParamVector) -> Source {
        self.source_lens.push(params.len());
        Source(self.source_lens.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Leaf for the named segment of a bound parameter vector.
    pub fn param(&mut self, src: Source, params: &ParamVector, name: &str) -> Result<Var> {
        if self.source_lens.get(src.0) != Some(&params.len()) {
            return contract("parameter vector does not match the bound source");
        }
        let seg = params.segment(name)?;
        let offset = seg.offset;
        let m = params.matrix(name)?;
        Ok(self.push(
            m,
            Op::Param {
                source: src.0,
                offset,
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `x + 1·bᵀ` for a `1 × c` bias.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let bv = self.value(b);
        if bv.rows() != 1 || bv.cols() != self.value(x).cols() {
            return contract("bias must be 1 × cols(x)");
        }
        let mut v = self.value(x).clone();
        v.add_row_vector(self.value(b).as_slice());
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddRowBias(x, b), ng))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// Elementwise nonlinearity looked up by name.
    pub fn unary(&mut self, name: &str, a: Var) -> Result<Var> {
        let u = Unary::from_name(name)?;
        Ok(self.apply_unary(u, a))
    }

    pub fn apply_unary(&mut self, u: Unary, a: Var) -> Var {
        let v = self.value(a).map(|x| u.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, u), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.apply_unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.apply_unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.apply_unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.apply_unary(Unary::Square, a)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.value(a).cols() {
            return contract(format!(
                "column slice {start}..{end} out of range for {} columns",
                self.value(a).cols()
            ));
        }
        let v = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Matrix::hcat(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatCols(a, b), ng))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let cols = self.value(a).cols();
        if perm.len() != cols || perm.iter().any(|&p| p >= cols) {
            return contract("permutation does not match column count");
        }
        let v = self.value(a).permute_cols(perm);
        let ng = self.ng(a);
        Ok(self.push(v, Op::PermuteCols(a, perm.to_vec()), ng))
    }

    /// Subtracts each row's mean from the row.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        center_rows_in_place(&mut v);
        let ng = self.ng(a);
        self.push(v, Op::CenterRows(a), ng)
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return contract("broadcast_rows needs a single-row input");
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(av.as_slice());
        }
        let v = Matrix::from_vec(n, c, data)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::BroadcastRows(a), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        let ng = self.ng(a);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return contract("mean of an empty node");
        }
        let s: f64 = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Matrix::filled(1, 1, s), Op::MeanAll(a), ng))
    }

    /// `n × c → n × 1` row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::RowSums(a), ng)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are a contract error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let r = v.row_mut(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return contract(format!("cannot normalise zero-norm row {i}"));
            }
            r.iter_mut().for_each(|x| *x /= n);
        }
        let ng = self.ng(a);
        Ok(self.push(v, Op::NormalizeRows(a), ng))
    }

    /// `Σ_i −log softmax(logits_i)[labels_i]` as a `1 × 1` node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return contract("one label per logit row required");
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = l.row(i);
            if y >= row.len() {
                return contract(format!("label {y} out of range for {} classes", row.len()));
            }
            total += log_sum_exp(row) - row[y];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::SoftmaxXent(logits, labels.to_vec()),
            ng,
        ))
    }

    /// `n × c → n × 1`: `Σ_j log φ(x_ij)` with `φ` the standard normal density.
    pub fn std_normal_log_density(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let c = m.cols() as f64;
        let v = Matrix::from_fn(m.rows(), 1, |i, _| {
            -0.5 * m.row(i).iter().map(|x| x * x).sum::<f64>() - c * HALF_LOG_2PI
        });
        let ng = self.ng(a);
        self.push(v, Op::StdNormalLogDensity(a), ng)
    }

    /// Gradients of the `1 × 1` node `out`, one flat vector per bound source.
    pub fn backward(&self, out: Var) -> Result<Vec<Vec<f64>>> {
        if self.value(out).shape() != (1, 1) {
            return contract("backward needs a scalar output");
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut result: Vec<Vec<f64>> = self.source_lens.iter().map(|&n| vec![0.0; n]).collect();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { source, offset } => {
                    let dst = &mut result[*source][*offset..*offset + g.len()];
                    for (d, v) in dst.iter_mut().zip(g.as_slice()) {
                        *d += v;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut da = Matrix::zeros(g.rows(), bv.rows());
                        gemm_into(1.0, &g, false, bv, true, 0.0, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut db = Matrix::zeros(av.cols(), g.cols());
                        gemm_into(1.0, av, true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRowBias(x, b) => {
                    if self.ng(*b) {
                        let db = Matrix::row_vector(&column_sums(&g));
                        accumulate(&mut grads, *b, db);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Unary(a, u) => {
                    let x = self.value(*a).as_slice();
                    let y = node.value.as_slice();
                    let mut d = g;
                    for ((gi, &xi), &yi) in d.as_mut_slice().iter_mut().zip(x).zip(y) {
                        *gi *= u.derivative(xi, yi);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.slice_cols(0, ca));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.slice_cols(ca, g.cols()));
                    }
                }
                Op::PermuteCols(a, perm) => {
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let src = g.row(i);
                        let dst = d.row_mut(i);
                        for (j, &p) in perm.iter().enumerate() {
                            dst[p] += src[j];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::CenterRows(a) => {
                    let mut d = g;
                    center_rows_in_place(&mut d);
                    accumulate(&mut grads, *a, d);
                }
                Op::BroadcastRows(a) => {
                    accumulate(&mut grads, *a, Matrix::row_vector(&column_sums(&g)));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.as_slice()[0] / (r * c) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, s));
                }
                Op::RowSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    let d = Matrix::from_fn(r, c, |i, _| g.get(i, 0));
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (dj, (yj, gj)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *dj = (gj - yj * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxXent(l, labels) => {
                    let lv = self.value(*l);
                    let s = g.as_slice()[0];
                    let mut d = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for (dj, &lj) in d.row_mut(i).iter_mut().zip(row) {
                            *dj = s * (lj - lse).exp();
                        }
                        d.row_mut(i)[y] -= s;
                    }
                    accumulate(&mut grads, *l, d);
                }
                Op::StdNormalLogDensity(a) => {
                    let x = self.value(*a);
                    let d = Matrix::from_fn(x.rows(), x.cols(), |i, j| -x.get(i, j) * g.get(i, 0));
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        for (s, v) in result.iter().enumerate() {
            if let Some(p) = v.iter().position(|x| !x.is_finite()) {
                return Err(IconError::NumericDomain(format!(
                    "non-finite gradient for source {s} at flat index {p}"
                )));
            }
        }
        Ok(result)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, x) in s.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    s
}

fn center_rows_in_place(m: &mut Matrix) {
    let c = m.cols();
    if c == 0 {
        return;
    }
    for i in 0..m.rows() {
        let r = m.row_mut(i);
        let mean = r.iter().sum::<f64>() / c as f64;
        r.iter_mut().for_each(|x| *x -= mean);
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Evaluates a tape-built scalar loss and its gradient with respect to `params`.
pub fn value_and_grad<F>(params: &ParamVector, f: F) -> Result<LossGrad>
where
    F: FnOnce(&mut Tape, Source) -> Result<Var>,
{
    let mut tape = Tape::new();
    let src = tape.bind(params);
    let out = f(&mut tape, src)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(IconError::NumericDomain(format!("loss evaluated to {value}")));
    }
    let mut grads = tape.backward(out)?;
    Ok(LossGrad {
        value,
        grad: grads.swap_remove(src.0),
    })
}

/// Like [`value_and_grad`] for several parameter vectors at once.
pub fn value_and_grads<F>(params: &[&ParamVector], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &[Source]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let srcs: Vec<Source> = params.iter().map(|p| tape.bind(p)).collect();
    let out = f(&mut tape, &srcs)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(IconError::NumericDomain(format!("loss evaluated to {value}")));
    }
    Ok((value, tape.backward(out)?))
}

/// Evaluates a tape-built scalar loss without differentiating it.
pub fn value_of<F>(params: &ParamVector, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Source) -> Result<Var>,
{
    let mut tape = Tape::new();
    let src = tape.bind(params);
    let out = f(&mut tape, src)?;
    Ok(tape.scalar(out))
}

/// Worst relative error between `grad` and a numerical derivative of
/// `value_fn` over `n_coords` random coordinates (all of them when
/// `n_coords ≥ len`).
///
/// Derivatives use the five-point central stencil with step
/// `1e-3 · max(1, |p_i|)`. Where both derivatives are below `1e-6` in
/// magnitude the absolute error is used instead of the relative one.
pub fn compare_gradient<F>(
    value_fn: F,
    grad: &[f64],
    params: &ParamVector,
    n_coords: usize,
    rng: &mut RngStream,
) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if grad.len() != params.len() {
        return contract("gradient length does not match parameter length");
    }
    let coords: Vec<usize> = if n_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        rng.sample_without_replacement(params.len(), n_coords)
    };
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for i in coords {
        let p0 = params.values()[i];
        let h = 1e-3 * p0.abs().max(1.0);
        let mut at = |delta: f64| -> Result<f64> {
            probe.values_mut()[i] = p0 + delta;
            let v = value_fn(&probe);
            probe.values_mut()[i] = p0;
            v
        };
        let f2 = at(2.0 * h)?;
        let f1 = at(h)?;
        let m1 = at(-h)?;
        let m2 = at(-2.0 * h)?;
        let numeric = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
        if !numeric.is_finite() {
            return Err(IconError::NumericDomain(format!(
                "non-finite numerical derivative at coordinate {i}"
            )));
        }
        let analytic = grad[i];
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-6 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the reverse-mode gradient of a tape-built loss against numerical
/// differentiation; returns the worst relative error.
/// The loss closure receives the (possibly perturbed) parameter vector it
/// must read from.
pub fn grad_check<F>(loss: F, params: &ParamVector, n_coords: usize, rng: &mut RngStream) -> Result<f64>
where
    F: Fn(&mut Tape, Source, &ParamVector) -> Result<Var>,
{
    let lg = value_and_grad(params, |t, s| loss(t, s, params))?;
    compare_gradient(|p| value_of(p, |t, s| loss(t, s, p)), &lg.grad, params, n_coords, rng)
}
