//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Because every
//! node is appended after its parents, the tape order is already a
//! topological order, and [`Tape::backward`] simply walks it in reverse.
//!
//! Broadcasting is explicit: the only shape-changing helpers are
//! [`Var::expand_scalar`], [`Var::expand_rows`] and [`Var::expand_cols`].
//! Every elementwise binary op requires equal shapes.
//!
//! ```
//! use lira::tensor::{Array, Param, Tape};
//!
//! let p = Param::new("p", Array::vector(vec![1.0, 2.0, 3.0]));
//! let tape = Tape::new();
//! let x = tape.param(&p);
//! let loss = (x * x).sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p.id()).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{LiraError, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}{:?}", self.shape, self.data)
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LiraError::Contract(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} array", self.shape.len()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Array) -> Array {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Array::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Array {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Array::matrix(n, m, out)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hstack(parts: &[&Array]) -> Array {
        assert!(!parts.is_empty(), "hstack of nothing");
        let r = parts[0].dims2().0;
        let total: usize = parts.iter().map(|p| p.dims2().1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let (pr, c) = p.dims2();
                assert_eq!(pr, r, "hstack row mismatch");
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Array::matrix(r, total, data)
    }

    /// Columns `start..end`.
    pub fn cols(&self, start: usize, end: usize) -> Array {
        let (r, c) = self.dims2();
        assert!(start <= end && end <= c, "columns {start}..{end} of {c}");
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Array::matrix(r, end - start, data)
    }
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable array. Unique per process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

/// A named trainable array.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Array,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        let id = ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed));
        Self { id, name: name.into(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Gradients keyed by parameter identity.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Array>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array)> {
        self.map.iter()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Sqrt(usize),
    Abs(usize),
    Squish(usize),
    Squaresign(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumCols(usize),
    Min(usize, usize),
    Max(usize, usize),
    SoftmaxRows(usize),
    Grl(usize),
    StopGradient,
    ExpandScalar(usize),
    ExpandRows(usize),
    ExpandCols(usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Array,
    op: Op,
    param: Option<ParamId>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, None)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::scalar(v))
    }

    /// Differentiable leaf bound to `p`. Binding the same parameter twice
    /// accumulates both contributions into one gradient entry.
    pub fn param(&self, p: &Param) -> Var<'_> {
        self.push(p.value.clone(), Op::Leaf, Some(p.id))
    }

    fn value_of(&self, idx: usize) -> std::cell::Ref<'_, Array> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    /// Gradients of a scalar `root` with respect to every reachable parameter.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        if nodes[root.idx].value.len() != 1 {
            return Err(LiraError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.idx].value.shape
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; root.idx + 1];
        adj[root.idx] = Some(Array::full(&nodes[root.idx].value.shape, 1.0));
        let mut grads = Gradients::default();

        for i in (0..=root.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        match grads.map.get_mut(&pid) {
                            Some(acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.map.insert(pid, g);
                            }
                        }
                    }
                }
                Op::StopGradient => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&nodes[*b].value, |x, y| x * y);
                    let gb = g.zip_map(&nodes[*a].value, |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    let ga = g.zip_map(bv, |x, y| x / y);
                    let mut gb = g.zip_map(&node.value, |x, out| -x * out);
                    for (v, d) in gb.data.iter_mut().zip(&bv.data) {
                        *v /= d;
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Neg(a) | Op::Grl(a) => accumulate(&mut adj, *a, g.map(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, *a, g.map(|x| x * c))
                }
                Op::Offset(a) => accumulate(&mut adj, *a, g),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ga = g.matmul(&bv.transpose()).reshape(&av.shape);
                    let gb = av.transpose().matmul(&g).reshape(&bv.shape);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Exp(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => accumulate(&mut adj, *a, g.zip_map(&nodes[*a].value, |x, y| x / y)),
                Op::Powf(a, p) => {
                    let p = *p;
                    accumulate(&mut adj, *a, g.zip_map(&nodes[*a].value, |x, y| x * p * y.powf(p - 1.0)))
                }
                Op::Sqrt(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| 0.5 * x / y)),
                Op::Abs(a) => accumulate(&mut adj, *a, g.zip_map(&nodes[*a].value, |x, y| x * sign0(y))),
                Op::Squish(a) => accumulate(
                    &mut adj,
                    *a,
                    Array {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&nodes[*a].value.data)
                            .zip(&node.value.data)
                            .map(|((gx, x), y)| gx * y / (x * x + 4.0).sqrt())
                            .collect(),
                    },
                ),
                Op::Squaresign(a) => accumulate(
                    &mut adj,
                    *a,
                    g.zip_map(&nodes[*a].value, |gx, x| gx / (1.0 + x * x).powf(1.5)),
                ),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut adj,
                        *a,
                        g.zip_map(&nodes[*a].value, |x, y| if y >= lo && y <= hi { x } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let av = &nodes[*a].value;
                    accumulate(&mut adj, *a, Array::full(&av.shape, g.data[0]))
                }
                Op::SumCols(a) => {
                    let av = &nodes[*a].value;
                    let (r, c) = av.dims2();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c..(i + 1) * c].fill(g.data[i]);
                    }
                    accumulate(&mut adj, *a, Array { shape: av.shape.clone(), data: out })
                }
                Op::Min(a, k) | Op::Max(a, k) => {
                    let mut ga = Array::zeros(&nodes[*a].value.shape);
                    ga.data[*k] = g.data[0];
                    accumulate(&mut adj, *a, ga)
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y.data[i * c..(i + 1) * c];
                        let gr = &g.data[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, Array { shape: y.shape.clone(), data: out })
                }
                Op::ExpandScalar(a) => {
                    let s: f64 = g.data.iter().sum();
                    accumulate(&mut adj, *a, Array::full(&nodes[*a].value.shape, s))
                }
                Op::ExpandRows(a) => {
                    // [1, c] -> [r, c]
                    let (r, c) = g.dims2();
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += g.data[i * c + j];
                        }
                    }
                    accumulate(&mut adj, *a, Array { shape: nodes[*a].value.shape.clone(), data: out })
                }
                Op::ExpandCols(a) => {
                    // [r, 1] -> [r, c]
                    let (r, c) = g.dims2();
                    let out = (0..r).map(|i| g.data[i * c..(i + 1) * c].iter().sum()).collect();
                    accumulate(&mut adj, *a, Array { shape: nodes[*a].value.shape.clone(), data: out })
                }
                Op::Reshape(a) => {
                    accumulate(&mut adj, *a, g.reshape(&nodes[*a].value.shape.clone()))
                }
                Op::Gather(a, idx) => {
                    let av = &nodes[*a].value;
                    let (_, c) = av.dims2();
                    let mut ga = Array::zeros(&av.shape);
                    for (r, &k) in idx.iter().enumerate() {
                        ga.data[r * c + k] += g.data[r];
                    }
                    accumulate(&mut adj, *a, ga)
                }
                Op::SliceCols(a, start) => {
                    let av = &nodes[*a].value;
                    let (r, c) = av.dims2();
                    let (_, w) = g.dims2();
                    let mut ga = Array::zeros(&av.shape);
                    for i in 0..r {
                        ga.data[i * c + start..i * c + start + w].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj, *a, ga)
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = g.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let (_, w) = pv.dims2();
                        let mut gp = vec![0.0; r * w];
                        for i in 0..r {
                            gp[i * w..(i + 1) * w].copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                        }
                        off += w;
                        accumulate(&mut adj, p, Array { shape: pv.shape.clone(), data: gp });
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(adj: &mut [Option<Array>], idx: usize, g: Array) {
    match &mut adj[idx] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array {
        self.tape.value_of(self.idx).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.idx).item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.idx).shape.clone()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.tape.value_of(self.idx).dims2()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.tape.value_of(self.idx).map(f);
        self.tape.push(v, op, None)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let b = self.tape.value_of(other.idx);
            assert_eq!(a.shape, b.shape, "elementwise op on {:?} and {:?}", a.shape, b.shape);
            a.zip_map(&b, f)
        };
        self.tape.push(v, op, None)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| x * c)
    }

    /// `self + c` for a constant `c`.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.idx), |x| x + c)
    }

    /// `c - self` for a constant `c`.
    pub fn rsub(self, c: f64) -> Var<'t> {
        self.scale(-1.0).offset(c)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.value_of(self.idx).matmul(&self.tape.value_of(other.idx));
        self.tape.push(v, Op::MatMul(self.idx, other.idx), None)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.idx, p), |x| x.powf(p))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), f64::abs)
    }

    /// Soft rectifier `(x + sqrt(x^2 + 4)) / 2`.
    pub fn squish(self) -> Var<'t> {
        self.unary(Op::Squish(self.idx), crate::neural::squish)
    }

    /// Odd bounded map `x / sqrt(1 + x^2)` into `(-1, 1)`.
    pub fn squaresign(self) -> Var<'t> {
        self.unary(Op::Squaresign(self.idx), crate::neural::squaresign)
    }

    /// `(squaresign(x) + 1) / 2`, into `(0, 1)`.
    pub fn squmoid(self) -> Var<'t> {
        self.squaresign().scale(0.5).offset(0.5)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.idx, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.tape.value_of(self.idx).data.iter().sum();
        self.tape.push(Array::scalar(s), Op::Sum(self.idx), None)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.value_of(self.idx).len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            let data = (0..r).map(|i| a.data[i * c..(i + 1) * c].iter().sum()).collect();
            Array::matrix(r, 1, data)
        };
        self.tape.push(v, Op::SumCols(self.idx), None)
    }

    /// Row means: `[r, c] -> [r, 1]`.
    pub fn mean_cols(self) -> Var<'t> {
        let (_, c) = self.dims2();
        self.sum_cols().scale(1.0 / c as f64)
    }

    /// Minimum element. The adjoint goes to the lowest index among ties.
    pub fn min(self) -> Var<'t> {
        let (k, v) = {
            let a = self.tape.value_of(self.idx);
            arg_extreme(&a.data, |x, best| x < best)
        };
        self.tape.push(Array::scalar(v), Op::Min(self.idx, k), None)
    }

    /// Maximum element. The adjoint goes to the lowest index among ties.
    pub fn max(self) -> Var<'t> {
        let (k, v) = {
            let a = self.tape.value_of(self.idx);
            arg_extreme(&a.data, |x, best| x > best)
        };
        self.tape.push(Array::scalar(v), Op::Max(self.idx, k), None)
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            let mut out = a.data.clone();
            for row in out.chunks_mut(c).take(r) {
                softmax_in_place(row);
            }
            Array { shape: a.shape.clone(), data: out }
        };
        self.tape.push(v, Op::SoftmaxRows(self.idx), None)
    }

    /// Gradient reversal: identity forward, negated adjoint backward.
    pub fn grl(self) -> Var<'t> {
        self.unary(Op::Grl(self.idx), |x| x)
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::StopGradient, None)
    }

    /// Broadcast a single-element array to `shape`.
    pub fn expand_scalar(self, shape: &[usize]) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            assert_eq!(a.len(), 1, "expand_scalar on {:?}", a.shape);
            Array::full(shape, a.data[0])
        };
        self.tape.push(v, Op::ExpandScalar(self.idx), None)
    }

    /// Repeat a `[1, c]` row `rows` times.
    pub fn expand_rows(self, rows: usize) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            assert_eq!(r, 1, "expand_rows needs a single row, got {:?}", a.shape);
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                data.extend_from_slice(&a.data);
            }
            Array::matrix(rows, c, data)
        };
        self.tape.push(v, Op::ExpandRows(self.idx), None)
    }

    /// Repeat a `[r, 1]` column `cols` times.
    pub fn expand_cols(self, cols: usize) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            assert_eq!(c, 1, "expand_cols needs a single column, got {:?}", a.shape);
            let mut data = Vec::with_capacity(r * cols);
            for &x in &a.data {
                data.extend(std::iter::repeat_n(x, cols));
            }
            Array::matrix(r, cols, data)
        };
        self.tape.push(v, Op::ExpandCols(self.idx), None)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value().reshape(shape);
        self.tape.push(v, Op::Reshape(self.idx), None)
    }

    /// Picks column `idx[r]` from row `r`: `[r, c] -> [r, 1]`.
    pub fn gather_cols(self, idx: Vec<usize>) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            assert_eq!(r, idx.len(), "gather index count");
            let data = idx
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    assert!(k < c, "gather index {k} out of {c}");
                    a.data[i * c + k]
                })
                .collect();
            Array::matrix(r, 1, data)
        };
        self.tape.push(v, Op::Gather(self.idx, idx), None)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.idx);
            let (r, c) = a.dims2();
            assert!(start <= end && end <= c, "slice {start}..{end} of {c} columns");
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&a.data[i * c + start..i * c + end]);
            }
            Array::matrix(r, w, data)
        };
        self.tape.push(v, Op::SliceCols(self.idx, start), None)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.idx)).collect();
            let r = vals[0].dims2().0;
            let total: usize = vals.iter().map(|v| v.dims2().1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in &vals {
                    let (vr, c) = v.dims2();
                    assert_eq!(vr, r, "concat row mismatch");
                    data.extend_from_slice(&v.data[i * c..(i + 1) * c]);
                }
            }
            Array::matrix(r, total, data)
        };
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), None)
    }
}

fn arg_extreme(data: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    assert!(!data.is_empty(), "min/max of empty array");
    let mut k = 0;
    for (i, &x) in data.iter().enumerate().skip(1) {
        if better(x, data[k]) {
            k = i;
        }
    }
    (k, data[k])
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.idx, rhs.idx), |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Div(self.idx, rhs.idx), |a, b| a / b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grad_of(p: &Param, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) -> Option<Array> {
        let tape = Tape::new();
        let x = tape.param(p);
        let root = f(&tape, x);
        tape.backward(root).unwrap().get(p.id()).cloned()
    }

    fn eval(p: &Array, f: &dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) -> f64 {
        let tape = Tape::new();
        let x = tape.constant(p.clone());
        f(&tape, x).item()
    }

    fn check_fd(p: Array, f: &dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
        let param = Param::new("p", p.clone());
        let tape = Tape::new();
        let x = tape.param(&param);
        let g = tape.backward(f(&tape, x)).unwrap().get(param.id()).cloned().unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.data[i] += h;
            let mut minus = p.clone();
            minus.data[i] -= h;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let ad = g.data[i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-2);
            assert!(rel < 1e-4, "coord {i}: ad {ad} fd {fd}");
        }
    }

    #[test]
    fn sum_of_squares() {
        let p = Param::new("p", Array::vector(vec![1.0, 2.0, 3.0]));
        let g = grad_of(&p, |_, x| (x * x).sum()).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_has_no_gradients() {
        let tape = Tape::new();
        let c = tape.scalar(5.0);
        assert!(tape.backward(c).unwrap().is_empty());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let c = tape.constant(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(c), Err(LiraError::Contract(_))));
    }

    #[test]
    fn grl_is_identity_forward() {
        let tape = Tape::new();
        let x = tape.constant(Array::vector(vec![0.3, -0.7]));
        assert_eq!(x.grl().value().data(), &[0.3, -0.7]);
    }

    #[test]
    fn grl_negates_adjoint() {
        let p = Param::new("p", Array::scalar(2.0));
        assert_eq!(grl_grad(&p), -1.0);
        let p = Param::new("p", Array::scalar(3.0));
        let g = grad_of(&p, |_, x| (x * x.grl()).sum()).unwrap();
        assert_eq!(g.item(), 0.0);
    }

    fn grl_grad(p: &Param) -> f64 {
        grad_of(p, |_, x| x.grl().sum()).unwrap().item()
    }

    #[test]
    fn double_reversal_matches_plain_path() {
        let p = Param::new("p", Array::vector(vec![0.5, -1.5, 2.0]));
        let plain = grad_of(&p, |_, x| (x * x * x).sum()).unwrap();
        let double = grad_of(&p, |_, x| {
            let y = x.grl().grl();
            (y * y * y).sum()
        })
        .unwrap();
        assert_eq!(plain, double);
    }

    #[test]
    fn stop_gradient_cuts_the_graph() {
        let p = Param::new("p", Array::vector(vec![1.0, 1.0]));
        assert!(grad_of(&p, |_, x| x.stop_gradient().sum()).is_none());
        let p = Param::new("p", Array::scalar(4.0));
        let g = grad_of(&p, |_, x| (x + x.stop_gradient()).sum()).unwrap();
        assert_eq!(g.item(), 1.0);
    }

    #[test]
    fn stop_gradient_in_multiplier_loss() {
        // lambda * ell with ell depending on theta: the multiplier loss
        // -lambda * stop(ell) must give grad(lambda) = -ell and nothing to theta.
        let lam = Param::new("lambda", Array::scalar(0.3));
        let theta = Param::new("theta", Array::scalar(1.7));
        let tape = Tape::new();
        let l = tape.param(&lam);
        let t = tape.param(&theta);
        let ell = (t * t).offset(0.5);
        let root = -(l * ell.stop_gradient());
        let g = tape.backward(root).unwrap();
        let ell_v = 1.7 * 1.7 + 0.5;
        assert!((g.get(lam.id()).unwrap().item() + ell_v).abs() < 1e-12);
        assert!(!g.contains(theta.id()));

        // finite difference in lambda agrees
        let f = |lv: f64| -(lv * ell_v);
        let fd = (f(0.3 + 1e-6) - f(0.3 - 1e-6)) / 2e-6;
        assert!((fd - g.get(lam.id()).unwrap().item()).abs() < 1e-6);
    }

    #[test]
    fn min_max_tie_goes_to_lowest_index() {
        let p = Param::new("p", Array::vector(vec![3.0, 1.0, 3.0, 1.0]));
        let g = grad_of(&p, |_, x| x.max()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
        let g = grad_of(&p, |_, x| x.min()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_zero_gradient_outside() {
        let p = Param::new("p", Array::vector(vec![-2.0, 0.5, 2.0]));
        let g = grad_of(&p, |_, x| x.clamp(0.0, 1.0).sum()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // values kept at least 1e-3 away from kinks of abs/clamp/min/max
        let mut draw = |n: usize, lo: f64, hi: f64| {
            let mut v: Vec<f64> = Vec::with_capacity(n);
            while v.len() < n {
                let x: f64 = rng.random_range(lo..hi);
                let near_kink = [-1.0, 0.0, 1.0].iter().any(|k| (x - k).abs() < 1e-3);
                let near_other = v.iter().any(|y| (x - y).abs() < 1e-3);
                if !near_kink && !near_other {
                    v.push(x);
                }
            }
            v
        };
        let m = Array::matrix(2, 3, draw(6, -2.0, 2.0));
        let pos = Array::matrix(2, 3, draw(6, 0.2, 3.0));
        let w = Array::matrix(3, 2, draw(6, -2.0, 2.0));

        check_fd(m.clone(), &|_, x| (x + x * x).sum());
        check_fd(m.clone(), &|_, x| (x * x * x).mean());
        check_fd(m.clone(), &|t, x| x.matmul(t.constant(w.clone())).square().sum());
        check_fd(w.clone(), &|t, x| t.constant(m.clone()).matmul(x).exp().sum());
        check_fd(m.clone(), &|_, x| x.exp().sum());
        check_fd(pos.clone(), &|_, x| x.ln().sum());
        check_fd(pos.clone(), &|_, x| x.powf(1.7).sum());
        check_fd(pos.clone(), &|_, x| x.sqrt().sum());
        check_fd(pos.clone(), &|t, x| (t.constant(m.clone()) / x).sum());
        check_fd(m.clone(), &|_, x| (x.abs() * x).sum());
        check_fd(m.clone(), &|_, x| (x.clamp(-1.0, 1.0) * x).sum());
        check_fd(m.clone(), &|_, x| x.min() * x.max());
        check_fd(m.clone(), &|_, x| (x.squish() * x).sum());
        check_fd(m.clone(), &|_, x| (x.squaresign() * x.squmoid()).sum());
        check_fd(m.clone(), &|t, x| (x.softmax_rows() * t.constant(pos.clone())).sum());
        check_fd(m.clone(), &|_, x| x.sum_cols().square().sum());
        check_fd(m.clone(), &|_, x| (x.slice_cols(1, 3).exp()).sum());
        check_fd(m.clone(), &|_, x| x.gather_cols(vec![2, 0]).square().sum());
        check_fd(m.clone(), &|_, x| Var::concat_cols(&[x, x.exp()]).reshape(&[12]).square().sum());
        check_fd(Array::matrix(1, 3, vec![0.3, -0.4, 1.2]), &|_, x| x.expand_rows(4).exp().sum());
        check_fd(Array::matrix(2, 1, vec![0.3, -0.4]), &|_, x| x.expand_cols(3).exp().sum());
        check_fd(Array::scalar(0.7), &|_, x| x.expand_scalar(&[2, 2]).exp().sum());
        check_fd(m, &|_, x| (x.grl().grl() * x).sum());
    }

    #[test]
    fn backward_is_deterministic() {
        let p = Param::new("p", Array::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]));
        let f = |t: &Tape| {
            let x = t.param(&p);
            let y = x.matmul(x).exp().softmax_rows();
            t.backward((y * x).sum()).unwrap().get(p.id()).cloned().unwrap()
        };
        let a = f(&Tape::new());
        let b = f(&Tape::new());
        let bits = |a: &Array| a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
