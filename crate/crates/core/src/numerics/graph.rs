//! Reverse-mode tape.
//!
//! A [`Graph`] records every op applied to its nodes together with the value
//! it produced. [`Graph::backward`] walks the tape in reverse and applies each
//! op's analytic adjoint. Stop-gradient constants are captured on first
//! evaluation and can be replayed, so a finite-difference oracle evaluates
//! exactly the surrogate function whose gradient the tape computes.

use std::collections::BTreeMap;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<S> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PairSum { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    MeanRows(Var),
    RepeatRows(Var),
    Mse(Var, Var),
    Sum(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::PairSum { .. } => "pair_sum",
            Op::MeanRows(..) => "mean_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

enum Detached<S> {
    Record(Vec<Tensor<S>>),
    Replay { values: Vec<Tensor<S>>, cursor: usize },
}

/// Captured stop-gradient values of one evaluation.
#[derive(Clone, Debug)]
pub struct DetachedValues<S>(Vec<Tensor<S>>);

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    detached: Detached<S>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// `(name, grad)` for every bound parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }
}

fn mat_dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            detached: Detached::Record(Vec::new()),
        }
    }

    /// Graph whose stop-gradient nodes return previously captured values.
    pub fn replaying(values: DetachedValues<S>) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            detached: Detached::Replay {
                values: values.0,
                cursor: 0,
            },
        }
    }

    /// Stop-gradient values captured so far (record mode only).
    pub fn detached_values(&self) -> DetachedValues<S> {
        match &self.detached {
            Detached::Record(v) => DetachedValues(v.clone()),
            Detached::Replay { values, .. } => DetachedValues(values.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf holding an input or a constant.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter from `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter '{name}'")))?
            .clone();
        let v = self.push(value, Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Constant copy of `x` that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &mut self.detached {
            Detached::Record(vals) => {
                let t = self.nodes[x.0].value.clone();
                vals.push(t.clone());
                t
            }
            Detached::Replay { values, cursor } => {
                let t = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::State("detached replay exhausted".into()))?;
                *cursor += 1;
                if t.dims() != self.nodes[x.0].value.dims() {
                    return Err(shape_err!("detached replay shape changed"));
                }
                t
            }
        };
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(self.value(a));
        let (k2, n) = mat_dims(self.value(b));
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(self.value(a));
        let (n, k2) = mat_dims(self.value(b));
        if k != k2 {
            return Err(shape_err!("matmul_nt inner dims {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if mat_dims(ta) != mat_dims(tb) {
            return Err(shape_err!(
                "{} operands {:?} vs {:?}",
                op.name(),
                ta.dims(),
                tb.dims()
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.dims().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(r));
        let c = ta.cols();
        if tr.len() != c {
            return Err(shape_err!(
                "row broadcast of {:?} onto {:?}",
                tr.dims(),
                ta.dims()
            ));
        }
        let row = tr.data();
        let data = ta
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(row)
                    .map(|(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let t = Tensor::matrix(ta.rows(), c, data)?;
        let op = if mul { Op::MulRow(a, r) } else { Op::AddRow(a, r) };
        self.push(t, op)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// Scales every row element-wise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(S::zero()));
        self.push(t, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (S::of(GELU_C), S::of(GELU_A));
        let half = S::of(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c == 0 {
            return Err(shape_err!("softmax over zero columns"));
        }
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(t, Op::Softmax(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Result<Var> {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c == 0 {
            return Err(shape_err!("layer_norm over zero columns"));
        }
        let n = S::of(c as f64);
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let r = S::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            inv_std.push(r);
        }
        self.push(t, Op::LayerNorm { x: a, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(shape_err!("concat_rows widths {} vs {}", c, t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(shape_err!("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(shape_err!("slice_rows {start}..{end} of {} rows", t.rows()));
        }
        let s = t.slice_rows(start, end);
        self.push(s, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if start > end || end > c {
            return Err(shape_err!("slice_cols {start}..{end} of {c} cols"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let s = Tensor::matrix(t.rows(), w, data)?;
        self.push(s, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(shape_err!("gather index {bad} out of {} rows", t.rows()));
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let g = Tensor::matrix(idx.len(), t.cols(), data)?;
        self.push(g, Op::GatherRows(a, idx.to_vec()))
    }

    /// `out[p] = a[i_p] + b[j_p]` for each `(i_p, j_p)` in `pairs`.
    pub fn pair_sum(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.cols() != c {
            return Err(shape_err!("pair_sum widths {} vs {}", c, tb.cols()));
        }
        if pairs.iter().any(|&(i, j)| i >= ta.rows() || j >= tb.rows()) {
            return Err(shape_err!("pair_sum index out of range"));
        }
        let mut data = Vec::with_capacity(pairs.len() * c);
        for &(i, j) in &pairs {
            data.extend(ta.row(i).iter().zip(tb.row(j)).map(|(&x, &y)| x + y));
        }
        let t = Tensor::matrix(pairs.len(), c, data)?;
        self.push(t, Op::PairSum { a, b, pairs })
    }

    /// Mean over rows, giving a `1 × cols` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = mat_dims(t);
        if r == 0 {
            return Err(shape_err!("mean_rows of zero rows"));
        }
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(t.row(i)) {
                *o = *o + x;
            }
        }
        let n = S::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a))
    }

    /// Stacks a single row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(shape_err!("repeat_rows expects one row, got {}", t.rows()));
        }
        let c = t.cols();
        let data = t.data().iter().copied().cycle().take(n * c).collect();
        self.push(Tensor::matrix(n, c, data)?, Op::RepeatRows(a))
    }

    /// Mean squared difference over all elements; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || mat_dims(ta) != mat_dims(tb) {
            return Err(shape_err!("mse operands {:?} vs {:?}", ta.dims(), tb.dims()));
        }
        if ta.is_empty() {
            return Err(shape_err!("mse of empty tensors"));
        }
        let n = S::of(ta.len() as f64);
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse(a, b))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.value(loss).dims()
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).dims(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = mat_dims(ta);
                let n = tb.cols();
                let mut ga = vec![S::zero(); m * k];
                gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![S::zero(); k * n];
                gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *b, tb, gb);
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = mat_dims(ta);
                let n = tb.rows();
                let mut ga = vec![S::zero(); m * k];
                gemm_nn(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![S::zero(); n * k];
                gemm_tn(g.data(), ta.data(), &mut gb, m, n, k);
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *b, tb, gb);
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta, g.transpose().into_data());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a), g.data().to_vec());
                accumulate(grads, *b, self.value(*b), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.value(*a), g.data().to_vec());
                let neg = g.data().iter().map(|&x| -x).collect();
                accumulate(grads, *b, self.value(*b), neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(&d, &x)| d * x).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(&d, &x)| d * x).collect();
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *b, tb, gb);
            }
            Op::AddRow(a, r) => {
                let tr = self.value(*r);
                let c = tr.len();
                let mut gr = vec![S::zero(); c];
                for chunk in g.data().chunks(c) {
                    for (o, &d) in gr.iter_mut().zip(chunk) {
                        *o = *o + d;
                    }
                }
                accumulate(grads, *a, self.value(*a), g.data().to_vec());
                accumulate(grads, *r, tr, gr);
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let c = tr.len();
                let row = tr.data();
                let mut gr = vec![S::zero(); c];
                let mut ga = Vec::with_capacity(ta.len());
                for (gchunk, achunk) in g.data().chunks(c).zip(ta.data().chunks(c)) {
                    for j in 0..c {
                        ga.push(gchunk[j] * row[j]);
                        gr[j] = gr[j] + gchunk[j] * achunk[j];
                    }
                }
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *r, tr, gr);
            }
            Op::Scale(a, k) => {
                let ga = g.data().iter().map(|&d| d * *k).collect();
                accumulate(grads, *a, self.value(*a), ga);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&d, &x)| if x > S::zero() { d } else { S::zero() })
                    .collect();
                accumulate(grads, *a, ta, ga);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let (c, k) = (S::of(GELU_C), S::of(GELU_A));
                let half = S::of(0.5);
                let three = S::of(3.0);
                let ga = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&d, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        d * (half * (S::one() + t) + half * x * dt)
                    })
                    .collect();
                accumulate(grads, *a, ta, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &s)| d * s * (S::one() - s))
                    .collect();
                accumulate(grads, *a, self.value(*a), ga);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: S = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&d, &p)| p * (d - dot)));
                }
                accumulate(grads, *a, self.value(*a), ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let n = S::of(c as f64);
                let mut ga = Vec::with_capacity(y.len());
                for ((gr, xr), &r) in g.data().chunks(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let sum_g: S = gr.iter().copied().sum();
                    let sum_gx: S = gr.iter().zip(xr).map(|(&d, &h)| d * h).sum();
                    ga.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(&d, &h)| r / n * (n * d - sum_g - h * sum_gx)),
                    );
                }
                accumulate(grads, *x, self.value(*x), ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    accumulate(grads, *p, tp, g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut start = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    let mut gp = Vec::with_capacity(tp.len());
                    for row in g.data().chunks(total) {
                        gp.extend_from_slice(&row[start..start + w]);
                    }
                    accumulate(grads, *p, tp, gp);
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = vec![S::zero(); ta.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ta, ga);
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (c, w) = (ta.cols(), y.cols());
                let mut ga = vec![S::zero(); ta.len()];
                for (i, row) in g.data().chunks(w.max(1)).enumerate().take(ta.rows()) {
                    ga[i * c + start..i * c + start + w].copy_from_slice(row);
                }
                accumulate(grads, *a, ta, ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = vec![S::zero(); ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g.data()[k * c + j];
                    }
                }
                accumulate(grads, *a, ta, ga);
            }
            Op::PairSum { a, b, pairs } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut ga = vec![S::zero(); ta.len()];
                let mut gb = vec![S::zero(); tb.len()];
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let gr = &g.data()[p * c..(p + 1) * c];
                    for k in 0..c {
                        ga[i * c + k] = ga[i * c + k] + gr[k];
                        gb[j * c + k] = gb[j * c + k] + gr[k];
                    }
                }
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *b, tb, gb);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = S::of(ta.rows() as f64);
                let ga = (0..ta.rows())
                    .flat_map(|_| g.data().iter().map(move |&d| d / n))
                    .collect();
                accumulate(grads, *a, ta, ga);
            }
            Op::RepeatRows(a) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = vec![S::zero(); c];
                for row in g.data().chunks(c.max(1)) {
                    for (o, &d) in ga.iter_mut().zip(row) {
                        *o = *o + d;
                    }
                }
                accumulate(grads, *a, ta, ga);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = S::of(2.0) * g.item() / S::of(ta.len() as f64);
                let ga: Vec<S> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &z)| k * (x - z))
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                accumulate(grads, *a, ta, ga);
                accumulate(grads, *b, tb, gb);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta, vec![g.item(); ta.len()]);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, like: &Tensor<S>, g: Vec<S>) {
    debug_assert_eq!(g.len(), like.len());
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.dims().to_vec(), g).expect("gradient shape"));
        }
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}
