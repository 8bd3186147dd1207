//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks the record once in reverse, applying each
//! primitive's local derivative, and consumes the tape.
//!
//! Parameters live in a [`ParamStore`] borrowed by the tape, so large
//! tables such as word embeddings are never copied onto it.

use std::collections::HashMap;
use std::fmt;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc};
use crate::{NumError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of a user-registered primitive: given the input values,
/// the output value and the output gradient, return one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    RepeatRows(Var),
    Embedding(Var, Vec<usize>),
    MaxOver(Var, Vec<usize>),
    MaskFill(Var, Vec<bool>),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    ScatterMax(Var, Vec<Option<usize>>),
    PadCols(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::Shape { op, detail }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only constants and leaves.
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param tape").get(*id),
            _ => unreachable!("value-less node"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.matrix_dims()
            .ok_or_else(|| shape_err(op, format!("rank {} input {:?}", t.rank(), t.shape())))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input whose gradient is reported in [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The tape variable for a stored parameter (one node per parameter).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        let r = self.value(row);
        if r.len() != n {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", self.shape(a), r.shape())));
        }
        let mut out = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..m {
            for (o, x) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| shape_err("mul_scalar", format!("scalar operand {:?}", self.shape(s))))?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * sv).collect())?;
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    /// Divides every element by a one-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| shape_err("div_scalar", format!("scalar operand {:?}", self.shape(s))))?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x / sv).collect())?;
        Ok(self.push(out, Op::DivScalar(a, s), &[a, s]))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| scale * x + shift).collect())
            .expect("same shape");
        self.push(out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if t.len() != factors.len() {
            return Err(shape_err("mul_const", format!("{:?} vs {} factors", t.shape(), factors.len())));
        }
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().zip(&factors).map(|(x, f)| x * f).collect())?;
        Ok(self.push(out, Op::MulConst(a, factors), &[a]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Softmax along `axis` of the matrix view (1 = within each row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "softmax")?;
        let t = self.value(a);
        let axis = if t.rank() < 2 { 1 } else { axis };
        let mut out = t.clone();
        match axis {
            1 => {
                for i in 0..m {
                    softmax_in_place(&mut out.data_mut()[i * n..(i + 1) * n]);
                }
            }
            0 => {
                let mut col = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = t.data()[i * n + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..m {
                        out.data_mut()[i * n + j] = col[i];
                    }
                }
            }
            _ => return Err(shape_err("softmax", format!("axis {axis} on {:?}", t.shape()))),
        }
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".to_string()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|v| self.dims(*v, "concat")).collect::<Result<_>>()?;
        let shapes = || parts.iter().map(|v| self.shape(*v).to_vec()).collect::<Vec<_>>();
        let out = match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(shape_err("concat", format!("axis 0 of {:?}", shapes())));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(m * n);
                for v in parts {
                    data.extend_from_slice(self.value(*v).data());
                }
                Tensor::new(vec![m, n], data)?
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(shape_err("concat", format!("axis 1 of {:?}", shapes())));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for (v, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.value(*v).data()[i * d.1..(i + 1) * d.1]);
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            _ => return Err(shape_err("concat", format!("axis {axis}"))),
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Columns `start..start + len` of the matrix view.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {:?}", self.shape(a))));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..start + len` of the matrix view.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice_rows")?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}+{len} of {:?}", self.shape(a))));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims(a, "transpose")?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Stacks `count` copies of a single row.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "repeat_rows")?;
        if m != 1 {
            return Err(shape_err("repeat_rows", format!("expected one row, got {:?}", self.shape(a))));
        }
        let row = self.value(a).data().to_vec();
        let data = row.iter().copied().cycle().take(count * n).collect();
        let out = Tensor::new(vec![count, n], data)?;
        Ok(self.push(out, Op::RepeatRows(a), &[a]))
    }

    /// Gathers rows of a `V x D` table, giving `ids.len() x D`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "embedding")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table {:?}", self.shape(table))));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Maximum along `axis`, keeping the reduced dimension as size 1.
    /// Ties resolve to the lowest index, which alone receives the gradient.
    pub fn max_over(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "max_over")?;
        let t = self.value(a);
        let (outer, inner, out_shape) = match (t.rank(), axis) {
            (0 | 1, 0) => (1, n, vec![1]),
            (2, 0) => (n, m, vec![1, n]),
            (2, 1) => (m, n, vec![m, 1]),
            _ => return Err(shape_err("max_over", format!("axis {axis} of {:?}", t.shape()))),
        };
        let at = |o: usize, i: usize| if t.rank() == 2 && axis == 0 { i * n + o } else { o * n + i };
        let mut values = Vec::with_capacity(outer);
        let mut winners = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = at(o, 0);
            for i in 1..inner {
                if t.data()[at(o, i)] > t.data()[best] {
                    best = at(o, i);
                }
            }
            winners.push(best);
            values.push(t.data()[best]);
        }
        let out = Tensor::new(out_shape, values)?;
        Ok(self.push(out, Op::MaxOver(a, winners), &[a]))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if t.len() != mask.len() {
            return Err(shape_err("mask_fill", format!("{:?} vs mask of {}", t.shape(), mask.len())));
        }
        let data = t.data().iter().zip(mask).map(|(x, &m)| if m { value } else { *x }).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskFill(a, mask.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Picks elements at flat indices, giving a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(shape_err("gather", format!("index {bad} out of range for {:?}", t.shape())));
        }
        let out = Tensor::new(vec![indices.len()], indices.iter().map(|&i| t.data()[i]).collect())?;
        Ok(self.push(out, Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Scatters a length-`n` vector into `out_len` slots, keeping the maximum
    /// of the entries mapped to each slot and zero for unmapped slots.
    /// Ties resolve to the lowest source position.
    pub fn scatter_max(&mut self, a: Var, slots: &[usize], out_len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != slots.len() || slots.iter().any(|&s| s >= out_len) {
            return Err(shape_err(
                "scatter_max",
                format!("{:?} into {out_len} slots via {} indices", t.shape(), slots.len()),
            ));
        }
        let mut winners: Vec<Option<usize>> = vec![None; out_len];
        for (k, &s) in slots.iter().enumerate() {
            match winners[s] {
                Some(w) if t.data()[w] >= t.data()[k] => {}
                _ => winners[s] = Some(k),
            }
        }
        let data = winners.iter().map(|w| w.map_or(0.0, |k| t.data()[k])).collect();
        let out = Tensor::new(vec![1, out_len], data)?;
        Ok(self.push(out, Op::ScatterMax(a, winners), &[a]))
    }

    /// Right-pads every row with zeros up to `total` columns.
    pub fn pad_cols(&mut self, a: Var, total: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "pad_cols")?;
        if total < n {
            return Err(shape_err("pad_cols", format!("{:?} to {total}", self.shape(a))));
        }
        let t = self.value(a);
        let mut data = vec![0.0; m * total];
        for i in 0..m {
            data[i * total..i * total + n].copy_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::PadCols(a), &[a]))
    }

    /// Records a primitive with a caller-supplied local derivative.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse pass from a one-element `loss`, returning fresh gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let mut grads = match self.params {
            Some(p) => Gradients::new(p),
            None => Gradients::new(&ParamStore::new()),
        };
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass adding `scale * d loss / d param` into `grads`.
    pub fn backward_into(self, loss: Var, scale: f64, grads: &mut Gradients) -> Result<()> {
        let loss_t = self.value(loss);
        if loss_t.len() != 1 {
            return Err(NumError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        if let Some(p) = self.params {
            grads.ensure_len(p.len());
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let shape = self.value(Var(idx)).shape().to_vec();
                    grads.set_leaf(Var(idx), Tensor::new(shape, gout)?);
                }
                Op::Param(id) => {
                    let shape = self.value(Var(idx)).shape().to_vec();
                    grads.accumulate_param(*id, &shape, &gout, scale);
                }
                op => self.local_backward(op, Var(idx), &gout, &mut g)?,
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, g: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(g[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn local_backward(&self, op: &Op, out: Var, gout: &[f64], g: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = self.value(out);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims().expect("checked");
                let n = y.cols();
                if let Some(ga) = self.acc(g, *a) {
                    matmul_a_bt_acc(gout, self.value(*b).data(), m, n, k, ga);
                }
                if let Some(gb) = self.acc(g, *b) {
                    matmul_at_b_acc(self.value(*a).data(), gout, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(g, *v) {
                        add_into(gv, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gb.iter_mut().zip(gout).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).zip(bv).for_each(|((x, d), w)| *x += d * w);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gb.iter_mut().zip(gout).zip(av).for_each(|((x, d), w)| *x += d * w);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(g, *a) {
                    add_into(ga, gout);
                }
                let n = y.cols();
                if let Some(gr) = self.acc(g, *row) {
                    for chunk in gout.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, d)| *x += d * sv);
                }
                let dot: f64 = gout.iter().zip(self.value(*a).data()).map(|(d, x)| d * x).sum();
                if let Some(gs) = self.acc(g, *s) {
                    gs[0] += dot;
                }
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, d)| *x += d / sv);
                }
                let dot: f64 = gout.iter().zip(self.value(*a).data()).map(|(d, x)| d * x).sum();
                if let Some(gs) = self.acc(g, *s) {
                    gs[0] -= dot / (sv * sv);
                }
            }
            Op::Affine(a, scale) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, d)| *x += scale * d);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).zip(f).for_each(|((x, d), c)| *x += d * c);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).zip(y.data()).for_each(|((x, d), t)| *x += d * (1.0 - t * t));
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).zip(y.data()).for_each(|((x, d), s)| *x += d * s * (1.0 - s));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut()
                        .zip(gout)
                        .zip(av)
                        .for_each(|((x, d), v)| if *v > 0.0 { *x += d });
                }
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gout).zip(av).for_each(|((x, d), v)| *x += d / v);
                }
            }
            Op::Softmax(a, axis) => {
                let (m, n) = y.matrix_dims().expect("checked");
                if let Some(ga) = self.acc(g, *a) {
                    let yv = y.data();
                    if *axis == 1 {
                        for i in 0..m {
                            let r = i * n..(i + 1) * n;
                            let dot: f64 = gout[r.clone()].iter().zip(&yv[r.clone()]).map(|(d, s)| d * s).sum();
                            for j in r {
                                ga[j] += yv[j] * (gout[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..n {
                            let dot: f64 = (0..m).map(|i| gout[i * n + j] * yv[i * n + j]).sum();
                            for i in 0..m {
                                let k = i * n + j;
                                ga[k] += yv[k] * (gout[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (m, n) = y.matrix_dims().expect("checked");
                let mut offset = 0;
                for v in parts {
                    let (pm, pn) = self.value(*v).matrix_dims().expect("checked");
                    if let Some(gv) = self.acc(g, *v) {
                        if *axis == 0 {
                            add_into(gv, &gout[offset * n..(offset + pm) * n]);
                        } else {
                            for i in 0..m {
                                add_into(&mut gv[i * pn..(i + 1) * pn], &gout[i * n + offset..i * n + offset + pn]);
                            }
                        }
                    }
                    offset += if *axis == 0 { pm } else { pn };
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = y.matrix_dims().expect("checked");
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(g, *a) {
                    for i in 0..m {
                        add_into(&mut ga[i * n + start..i * n + start + len], &gout[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(g, *a) {
                    add_into(&mut ga[start * n..start * n + gout.len()], gout);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = y.matrix_dims().expect("checked");
                if let Some(ga) = self.acc(g, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += gout[i * n + j];
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                let n = y.cols();
                if let Some(ga) = self.acc(g, *a) {
                    for chunk in gout.chunks(n) {
                        add_into(ga, chunk);
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = y.cols();
                if let Some(gt) = self.acc(g, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MaxOver(a, winners) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (w, d) in winners.iter().zip(gout) {
                        ga[*w] += d;
                    }
                }
            }
            Op::MaskFill(a, mask) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut()
                        .zip(gout)
                        .zip(mask)
                        .for_each(|((x, d), m)| if !m { *x += d });
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (i, d) in idx.iter().zip(gout) {
                        ga[*i] += d;
                    }
                }
            }
            Op::ScatterMax(a, winners) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (w, d) in winners.iter().zip(gout) {
                        if let Some(k) = w {
                            ga[*k] += d;
                        }
                    }
                }
            }
            Op::PadCols(a) => {
                let total = y.cols();
                let (m, n) = self.value(*a).matrix_dims().expect("checked");
                if let Some(ga) = self.acc(g, *a) {
                    for i in 0..m {
                        add_into(&mut ga[i * n..(i + 1) * n], &gout[i * total..i * total + n]);
                    }
                }
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gout_t = Tensor::new(y.shape().to_vec(), gout.to_vec())?;
                let local = backward(&values, y, &gout_t);
                if local.len() != inputs.len() {
                    return Err(NumError::InvalidArgument(format!(
                        "custom backward returned {} gradients for {} inputs",
                        local.len(),
                        inputs.len()
                    )));
                }
                for (v, lg) in inputs.iter().zip(local) {
                    if lg.len() != self.value(*v).len() {
                        return Err(shape_err("custom", format!("gradient {:?} for input {:?}", lg.shape(), self.shape(*v))));
                    }
                    if let Some(gv) = self.acc(g, *v) {
                        add_into(gv, lg.data());
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
