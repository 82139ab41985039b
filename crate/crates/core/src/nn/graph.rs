//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when it
//! depends on a trainable leaf, the operation that produced it. Nodes that do
//! not require gradients keep no parents, so inference-only computations free
//! intermediate values as soon as they go out of scope.
//!
//! Batched tensors put one graph node per row: an `[K x d]` matrix holds `K`
//! node vectors of width `d`.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
enum Op {
    #[default]
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Rc<[usize]>),
    ShiftRows(Var, isize),
    ZeroRows(Var, Rc<[usize]>),
    RowwiseMatvec(Var, Rc<[Tensor]>),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Scale(a, _)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::SelectCols(a, _)
            | Op::ShiftRows(a, _)
            | Op::ZeroRows(a, _)
            | Op::RowwiseMatvec(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::ConcatCols(parts) => parts.iter().collect(),
        }
    }

    fn into_parents(self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Scale(a, _)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::SelectCols(a, _)
            | Op::ShiftRows(a, _)
            | Op::ZeroRows(a, _)
            | Op::RowwiseMatvec(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::ConcatCols(parts) => parts,
        }
    }
}

// Unrolled graphs are thousands of nodes deep; dropping them recursively
// would overflow small thread stacks.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.op).into_parents();
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.extend(std::mem::take(&mut node.op).into_parents());
            }
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("[{}x{}]", t.nrows(), t.ncols())
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.dim()
    }

    fn make(value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            value,
            requires_grad,
            op,
        }))
    }

    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "left {} vs right {}",
                    shape_str(self.value()),
                    shape_str(other.value())
                ),
            ));
        }
        Ok(())
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        if self.shape().1 != rhs.shape().0 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "left {} vs right {}",
                    shape_str(self.value()),
                    shape_str(rhs.value())
                ),
            ));
        }
        let value = self.value().dot(rhs.value());
        Ok(Var::make(value, Op::Matmul(self.clone(), rhs.clone())))
    }

    /// Row-wise affine map `self · wᵀ + b`, with `w` of shape `[out x in]` and
    /// `b` of shape `[1 x out]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Result<Var> {
        let (_, din) = self.shape();
        let (dout, win) = w.shape();
        if din != win || b.shape() != (1, dout) {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {} weight {} bias {}",
                    shape_str(self.value()),
                    shape_str(w.value()),
                    shape_str(b.value())
                ),
            ));
        }
        let mut value = self.value().dot(&w.value().t());
        value += b.value();
        Ok(Var::make(
            value,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.same_shape(rhs, "add")?;
        let value = self.value() + rhs.value();
        Ok(Var::make(value, Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.same_shape(rhs, "sub")?;
        let value = self.value() - rhs.value();
        Ok(Var::make(value, Op::Sub(self.clone(), rhs.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.same_shape(rhs, "mul")?;
        let value = self.value() * rhs.value();
        Ok(Var::make(value, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn scale(&self, factor: f64) -> Var {
        let value = self.value() * factor;
        Var::make(value, Op::Scale(self.clone(), factor))
    }

    /// `offset - self`, elementwise.
    pub fn rsub_scalar(&self, offset: f64) -> Var {
        let value = self.value().mapv(|v| offset - v);
        Var::make(value, Op::Affine(self.clone(), -1.0))
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Var::make(value, Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().mapv(f64::tanh);
        Var::make(value, Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Var {
        let value = self.value().mapv(|v| if v > 0.0 { v } else { 0.0 });
        Var::make(value, Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        Var::make(value, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn square(&self) -> Var {
        let value = self.value().mapv(|v| v * v);
        Var::make(value, Op::Square(self.clone()))
    }

    /// Horizontal concatenation of row-aligned blocks.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let rows = first.shape().0;
        if let Some(bad) = parts.iter().find(|p| p.shape().0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {}", rows, bad.shape().0),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let w = p.shape().1;
            value.slice_mut(s![.., at..at + w]).assign(p.value());
            at += w;
        }
        Ok(Var::make(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_cols(&self, cols: &[usize]) -> Result<Var> {
        let width = self.shape().1;
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::shape(
                "select_cols",
                format!("column {bad} out of range for width {width}"),
            ));
        }
        let value = self.value().select(Axis(1), cols);
        Ok(Var::make(value, Op::SelectCols(self.clone(), cols.into())))
    }

    /// Row `k` of the result is row `k - offset` of the input, zero where that
    /// row does not exist. `offset = 1` pulls each node's predecessor.
    pub fn shift_rows(&self, offset: isize) -> Var {
        let value = shift_rows_value(self.value(), offset);
        Var::make(value, Op::ShiftRows(self.clone(), offset))
    }

    pub fn zero_rows(&self, rows: &[usize]) -> Var {
        let mut value = self.value().clone();
        let n = value.nrows();
        for &r in rows.iter().filter(|&&r| r < n) {
            value.row_mut(r).fill(0.0);
        }
        Var::make(value, Op::ZeroRows(self.clone(), rows.into()))
    }

    /// Row `k` of the result is `mats[k] · row_k`; a single matrix applies to
    /// every row.
    pub fn rowwise_matvec(&self, mats: Rc<[Tensor]>) -> Result<Var> {
        let (rows, din) = self.shape();
        if mats.is_empty() || (mats.len() != 1 && mats.len() != rows) {
            return Err(Error::shape(
                "rowwise_matvec",
                format!("{} matrices for {} rows", mats.len(), rows),
            ));
        }
        let dout = mats[0].nrows();
        if mats.iter().any(|m| m.ncols() != din || m.nrows() != dout) {
            return Err(Error::shape(
                "rowwise_matvec",
                format!("matrix width must be {din} and height uniform"),
            ));
        }
        let mut value = Array2::zeros((rows, dout));
        for (k, (row, mut out)) in self
            .value()
            .outer_iter()
            .zip(value.outer_iter_mut())
            .enumerate()
        {
            let m = &mats[if mats.len() == 1 { 0 } else { k }];
            out.assign(&m.dot(&row));
        }
        Ok(Var::make(value, Op::RowwiseMatvec(self.clone(), mats)))
    }

    /// Sum of all entries as a `[1 x 1]` value.
    pub fn sum(&self) -> Var {
        let value = Array2::from_elem((1, 1), self.value().sum());
        Var::make(value, Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value().sum() / n);
        Var::make(value, Op::Mean(self.clone()))
    }

    /// The single entry of a `[1 x 1]` value.
    pub fn scalar(&self) -> Result<f64> {
        match self.shape() {
            (1, 1) => Ok(self.value()[[0, 0]]),
            (r, c) => Err(Error::shape("scalar", format!("expected [1x1], got [{r}x{c}]"))),
        }
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

pub(crate) fn shift_rows_value(t: &Tensor, offset: isize) -> Tensor {
    let n = t.nrows() as isize;
    let mut out = Array2::zeros(t.dim());
    if offset.unsigned_abs() as isize >= n {
        return out;
    }
    if offset >= 0 {
        let o = offset as usize;
        out.slice_mut(s![o.., ..])
            .assign(&t.slice(s![..(n as usize - o), ..]));
    } else {
        let o = (-offset) as usize;
        out.slice_mut(s![..(n as usize - o), ..])
            .assign(&t.slice(s![o.., ..]));
    }
    out
}

/// Binds trainable parameters to graph leaves for one forward/backward pass.
///
/// With `record == false` parameters enter as constants and nothing is kept
/// for a backward pass.
pub struct Graph<'a> {
    store: &'a ParamStore,
    record: bool,
    leaves: RefCell<HashMap<usize, Var>>,
    used: Cell<bool>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            record: true,
            leaves: RefCell::new(HashMap::new()),
            used: Cell::new(false),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Graph {
            record: false,
            ..Graph::new(store)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// gradients from every use accumulate.
    pub fn param(&self, id: ParamId) -> Var {
        self.used.set(true);
        self.leaves
            .borrow_mut()
            .entry(id.index())
            .or_insert_with(|| {
                let value = self.store.value(id).clone();
                if self.record {
                    Var(Rc::new(Node {
                        value,
                        requires_grad: true,
                        op: Op::Param(id),
                    }))
                } else {
                    Var::constant(value)
                }
            })
            .clone()
    }

    /// `d loss / d param` for every parameter leaf that participated.
    /// Feed the result to [`ParamStore::accumulate`].
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.record || !self.used.get() || !loss.requires_grad() {
            return Err(Error::State(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be [1x1], got {}", shape_str(loss.value())),
            ));
        }
        Ok(backward_from(loss))
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((var, expanded)) = stack.pop() {
        if expanded {
            order.push(var);
            continue;
        }
        if seen.insert(var.id(), ()).is_some() {
            continue;
        }
        stack.push((var.clone(), true));
        for p in var.0.op.parents() {
            if p.requires_grad() && !seen.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn accumulate(grads: &mut HashMap<usize, Tensor>, var: &Var, g: Tensor) {
    if !var.requires_grad() {
        return;
    }
    match grads.get_mut(&var.id()) {
        Some(acc) => *acc += &g,
        None => {
            grads.insert(var.id(), g);
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(p, g)| (*p, g))
    }
}

fn backward_from(loss: &Var) -> Gradients {
    let order = topo_order(loss);
    let mut result = Gradients::default();
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(loss.id(), Array2::ones((1, 1)));

    for var in order.iter().rev() {
        let Some(g) = grads.remove(&var.id()) else {
            continue;
        };
        let out = var.value();
        match &var.0.op {
            Op::Leaf => {}
            Op::Param(id) => result.entries.push((*id, g)),
            Op::Matmul(a, b) => {
                if a.requires_grad() {
                    accumulate(&mut grads, a, g.dot(&b.value().t()));
                }
                if b.requires_grad() {
                    accumulate(&mut grads, b, a.value().t().dot(&g));
                }
            }
            Op::Linear { x, w, b } => {
                if x.requires_grad() {
                    accumulate(&mut grads, x, g.dot(w.value()));
                }
                if w.requires_grad() {
                    accumulate(&mut grads, w, g.t().dot(x.value()));
                }
                if b.requires_grad() {
                    accumulate(&mut grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads, a, g.clone());
                accumulate(&mut grads, b, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, b, -&g);
                accumulate(&mut grads, a, g);
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    accumulate(&mut grads, a, &g * b.value());
                }
                if b.requires_grad() {
                    accumulate(&mut grads, b, &g * a.value());
                }
            }
            Op::Scale(a, c) | Op::Affine(a, c) => accumulate(&mut grads, a, g * *c),
            Op::Sigmoid(a) => {
                let d = out.mapv(|y| y * (1.0 - y));
                accumulate(&mut grads, a, g * d);
            }
            Op::Tanh(a) => {
                let d = out.mapv(|y| 1.0 - y * y);
                accumulate(&mut grads, a, g * d);
            }
            Op::Relu(a) => {
                let mut g = g;
                g.zip_mut_with(a.value(), |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0
                    }
                });
                accumulate(&mut grads, a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let mut g = g;
                g.zip_mut_with(a.value(), |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope
                    }
                });
                accumulate(&mut grads, a, g);
            }
            Op::Square(a) => {
                let d = a.value() * 2.0;
                accumulate(&mut grads, a, g * d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = p.shape().1;
                    if p.requires_grad() {
                        accumulate(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::SelectCols(a, cols) => {
                let mut ga = Array2::zeros(a.shape());
                for (j, &c) in cols.iter().enumerate() {
                    let mut dst = ga.column_mut(c);
                    dst += &g.column(j);
                }
                accumulate(&mut grads, a, ga);
            }
            Op::ShiftRows(a, offset) => {
                accumulate(&mut grads, a, shift_rows_value(&g, -offset));
            }
            Op::ZeroRows(a, rows) => {
                let mut g = g;
                let n = g.nrows();
                for &r in rows.iter().filter(|&&r| r < n) {
                    g.row_mut(r).fill(0.0);
                }
                accumulate(&mut grads, a, g);
            }
            Op::RowwiseMatvec(a, mats) => {
                let mut ga = Array2::zeros(a.shape());
                for (k, (grow, mut dst)) in g.outer_iter().zip(ga.outer_iter_mut()).enumerate() {
                    let m = &mats[if mats.len() == 1 { 0 } else { k }];
                    dst.assign(&m.t().dot(&grow));
                }
                accumulate(&mut grads, a, ga);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(a.shape(), g[[0, 0]]);
                accumulate(&mut grads, a, ga);
            }
            Op::Mean(a) => {
                let n = a.value().len().max(1) as f64;
                let ga = Array2::from_elem(a.shape(), g[[0, 0]] / n);
                accumulate(&mut grads, a, ga);
            }
        }
    }
    result
}
