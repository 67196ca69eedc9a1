//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient
//! of a scalar with respect to every leaf that requires one. A tape is
//! built per forward pass and dropped afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::{gemm, gemm_strided, Tensor};

/// Four (source index, weight) taps describing one bilinear sample.
pub type Taps = [(u32, f64); 4];

/// Which axis of a rank-2 tensor an interpolation mixes along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mix rows of `[n_in, c]` into `[n_out, c]`.
    Rows,
    /// Mix columns of `[c, n_in]` into `[c, n_out]`.
    Cols,
}

/// Geometry of a 2D convolution on a `[c_in, h, w]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    /// Output of an operation that does not require gradients.
    Detached,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Softplus(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    RowSum(usize),
    RowNorm(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    GatherRows(usize, Rc<Vec<usize>>),
    Interp {
        x: usize,
        taps: Rc<Vec<Taps>>,
        axis: Axis,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Head count and softmax weights `[heads, len_q, len_k]` of an attention node.
    attention: Option<(usize, Rc<Vec<f64>>)>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    named: HashMap<String, usize>,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: Vec<(String, usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients of every named leaf that received one, sorted by name.
    pub fn named(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = self
            .named
            .iter()
            .filter_map(|(name, id)| self.grads[*id].as_ref().map(|g| (name.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Detached, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A named leaf; repeated requests for the same name return the same node.
    pub fn named_leaf(&self, name: &str, value: &Rc<Tensor>) -> Var<'_> {
        self.named(name, value, true)
    }

    /// Like [`Tape::named_leaf`] but without gradient tracking.
    pub fn named_constant(&self, name: &str, value: &Rc<Tensor>) -> Var<'_> {
        self.named(name, value, false)
    }

    fn named(&self, name: &str, value: &Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().named.get(name) {
            return Var { tape: self, id };
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::clone(value),
            op: if requires_grad { Op::Leaf } else { Op::Detached },
            requires_grad,
            attention: None,
        });
        inner.named.insert(name.to_string(), id);
        Var { tape: self, id }
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[var.id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Detached },
            requires_grad,
            attention: None,
        });
        Var { tape: self, id }
    }

    /// Head-averaged attention weights `[len_q, len_k]` of an attention output.
    pub fn attention_weights(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[var.id];
        let (heads, probs) = node.attention.as_ref()?;
        let lq = node.value.rows();
        let lk = probs.len() / (heads * lq).max(1);
        let mut avg = vec![0.0; lq * lk];
        for h in 0..*heads {
            for (a, p) in avg.iter_mut().zip(&probs[h * lq * lk..(h + 1) * lq * lk]) {
                *a += p / *heads as f64;
            }
        }
        Some(Tensor::new([lq, lk], avg))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(nodes[output.id].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape().to_vec(), 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let named = inner.named.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Gradients { grads, named }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn map_grad(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &*nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Detached => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*b) {
                let neg = map_grad(g, val(*b), |g, _| -g);
                accumulate(nodes, grads, *b, neg);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, map_grad(g, val(*b), |g, y| g * y));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, map_grad(g, val(*a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if needs(*a) {
                accumulate(nodes, grads, *a, map_grad(g, y, |g, y| g / y));
            }
            if needs(*b) {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(nodes, grads, *b, Tensor::new(y.shape().to_vec(), data));
            }
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*b) {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(val(*b).shape().to_vec(), db));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, _| g * c));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape().to_vec())),
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape().to_vec())),
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            if needs(*a) {
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, y.data(), true, 0.0, &mut dx);
                accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
            }
            if needs(*b) {
                let mut dy = vec![0.0; k * n];
                gemm(k, m, n, x.data(), true, g.data(), false, 0.0, &mut dy);
                accumulate(nodes, grads, *b, Tensor::new(y.shape().to_vec(), dy));
            }
        }
        Op::Transpose(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, transpose(g).reshape(x.shape().to_vec()));
        }
        Op::Relu(a) => {
            accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
        }
        Op::Softplus(a) => {
            accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, x| g * sigmoid(x)));
        }
        Op::Log(a) => accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, x| g / x)),
        Op::Abs(a) => accumulate(
            nodes,
            grads,
            *a,
            map_grad(g, val(*a), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
        ),
        Op::Square(a) => accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, x| 2.0 * g * x)),
        Op::ClampMin(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, map_grad(g, val(*a), |g, x| if x > c { g } else { 0.0 }));
        }
        Op::SumAll(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), g.item()));
        }
        Op::RowSum(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut dx = vec![0.0; x.len()];
            for (r, row) in dx.chunks_mut(c.max(1)).enumerate() {
                row.iter_mut().for_each(|v| *v = g.data()[r]);
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::RowNorm(a) => {
            let x = val(*a);
            let y = &node.value;
            let c = x.cols();
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let norm = y.data()[r];
                if norm > 0.0 {
                    let s = g.data()[r] / norm;
                    for j in 0..c {
                        dx[r * c + j] = s * x.data()[r * c + j];
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = &y.data()[r * c..(r + 1) * c];
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(y.shape().to_vec(), dx));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let xv = val(*x);
            let gm = val(*gamma);
            let c = xv.cols();
            let rows = xv.rows();
            if needs(*gamma) || needs(*beta) {
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let gv = g.data()[r * c + j];
                        dg[j] += gv * xhat[r * c + j];
                        db[j] += gv;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::new([c], dg));
                accumulate(nodes, grads, *beta, Tensor::new([c], db));
            }
            if needs(*x) {
                let mut dx = vec![0.0; xv.len()];
                let nf = c as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = g.data()[r * c + j] * gm.data()[j];
                        sum_d += d;
                        sum_dx += d * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let d = g.data()[r * c + j] * gm.data()[j];
                        dx[r * c + j] =
                            inv_std[r] / nf * (nf * d - sum_d - xhat[r * c + j] * sum_dx);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
        }
        Op::ConcatCols(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (ca, cb) = (x.cols(), y.cols());
            let rows = x.rows();
            let mut dx = Vec::with_capacity(x.len());
            let mut dy = Vec::with_capacity(y.len());
            for r in 0..rows {
                let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                dx.extend_from_slice(&row[..ca]);
                dy.extend_from_slice(&row[ca..]);
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
            accumulate(nodes, grads, *b, Tensor::new(y.shape().to_vec(), dy));
        }
        Op::SliceCols(a, start) => {
            let x = val(*a);
            let c = x.cols();
            let w = g.cols();
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                dx[r * c + start..r * c + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::Gather(a, idx) => {
            let x = val(*a);
            let mut dx = vec![0.0; x.len()];
            for (j, &i) in idx.iter().enumerate() {
                dx[i] += g.data()[j];
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::GatherRows(a, idx) => {
            let x = val(*a);
            let c = x.cols();
            let mut dx = vec![0.0; x.len()];
            for (j, &i) in idx.iter().enumerate() {
                for k in 0..c {
                    dx[i * c + k] += g.data()[j * c + k];
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::Interp { x, taps, axis } => {
            let xv = val(*x);
            let mut dx = vec![0.0; xv.len()];
            match axis {
                Axis::Rows => {
                    let c = xv.cols();
                    for (o, t) in taps.iter().enumerate() {
                        for &(i, w) in t {
                            if w != 0.0 {
                                let i = i as usize;
                                for k in 0..c {
                                    dx[i * c + k] += w * g.data()[o * c + k];
                                }
                            }
                        }
                    }
                }
                Axis::Cols => {
                    let n_in = xv.cols();
                    let n_out = taps.len();
                    for ch in 0..xv.rows() {
                        let gr = &g.data()[ch * n_out..(ch + 1) * n_out];
                        let dr = &mut dx[ch * n_in..(ch + 1) * n_in];
                        for (o, t) in taps.iter().enumerate() {
                            for &(i, w) in t {
                                dr[i as usize] += w * gr[o];
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx));
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let wv = val(*w);
            let c_out = wv.rows();
            let patch = geom.patch();
            let n_out = geom.out_h() * geom.out_w();
            if needs(*w) {
                let mut dw = vec![0.0; c_out * patch];
                gemm(c_out, n_out, patch, g.data(), false, cols, true, 0.0, &mut dw);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), dw));
            }
            if needs(*b) {
                let db = g.data().chunks(n_out).map(|r| r.iter().sum()).collect();
                accumulate(nodes, grads, *b, Tensor::new([c_out], db));
            }
            if needs(*x) {
                let mut dcols = vec![0.0; patch * n_out];
                gemm(patch, c_out, n_out, wv.data(), true, g.data(), false, 0.0, &mut dcols);
                let dx = col2im(&dcols, geom);
                accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), dx));
            }
        }
        Op::Attention { q, k, v, heads } => {
            let (_, probs) = node.attention.as_ref().expect("attention weights retained");
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (dq, dk, dv) = attention_backward(qv, kv, vv, *heads, probs, g);
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out)
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let n_out = oh * ow;
    let k = geom.kernel;
    let mut cols = vec![0.0; geom.patch() * n_out];
    for c in 0..geom.c_in {
        let plane = &x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * geom.w..(iy as usize + 1) * geom.w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let n_out = oh * ow;
    let k = geom.kernel;
    let mut x = vec![0.0; geom.c_in * geom.h * geom.w];
    for c in 0..geom.c_in {
        let plane = &mut x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            plane[iy as usize * geom.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Scaled dot-product attention split over `heads` column blocks.
/// Returns the output `[lq, d]` and the softmax weights `[heads, lq, lk]`.
fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * lq * lk];
    let mut out = vec![0.0; lq * d];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        // scores = Q_h K_h^T
        gemm_strided(
            lq,
            dh,
            lk,
            &q.data()[h * dh..],
            (d, 1),
            &k.data()[h * dh..],
            (1, d),
            0.0,
            p,
            (lk, 1),
        );
        for row in p.chunks_mut(lk.max(1)) {
            let mut max = f64::NEG_INFINITY;
            for s in row.iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        gemm_strided(
            lq,
            lk,
            dh,
            p,
            (lk, 1),
            &v.data()[h * dh..],
            (d, 1),
            0.0,
            &mut out[h * dh..],
            (d, 1),
        );
    }
    (Tensor::new([lq, d], out), probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dv = vec![0.0; lk * d];
    let mut dp = vec![0.0; lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        // dP = dO_h V_h^T
        gemm_strided(
            lq,
            dh,
            lk,
            &g.data()[h * dh..],
            (d, 1),
            &v.data()[h * dh..],
            (1, d),
            0.0,
            &mut dp,
            (lk, 1),
        );
        // dV_h = P^T dO_h
        gemm_strided(
            lk,
            lq,
            dh,
            p,
            (1, lk),
            &g.data()[h * dh..],
            (d, 1),
            0.0,
            &mut dv[h * dh..],
            (d, 1),
        );
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
        for r in 0..lq {
            let pr = &p[r * lk..(r + 1) * lk];
            let dr = &mut dp[r * lk..(r + 1) * lk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (dv, pv) in dr.iter_mut().zip(pr) {
                *dv = pv * (*dv - dot) * scale;
            }
        }
        gemm_strided(
            lq,
            lk,
            dh,
            &dp,
            (lk, 1),
            &k.data()[h * dh..],
            (d, 1),
            0.0,
            &mut dq[h * dh..],
            (d, 1),
        );
        gemm_strided(
            lk,
            lq,
            dh,
            &dp,
            (1, lk),
            &q.data()[h * dh..],
            (d, 1),
            0.0,
            &mut dk[h * dh..],
            (d, 1),
        );
    }
    (
        Tensor::new(q.shape().to_vec(), dq),
        Tensor::new(k.shape().to_vec(), dk),
        Tensor::new(v.shape().to_vec(), dv),
    )
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn rg(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.rg())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        self.tape.push(value, op, self.rg() || other.rg())
    }

    fn zip_with(&self, other: Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = self.zip_with(other, |a, b| a / b);
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    /// Adds a `[n]` row vector to every row of `[m, n]`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let n = b.len();
        assert_eq!(a.cols(), n, "add_row width mismatch: {:?} + {:?}", a.shape(), b.shape());
        let mut data = a.data().to_vec();
        for r in data.chunks_mut(n.max(1)) {
            for (x, y) in r.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.binary(row, Tensor::new(a.shape().to_vec(), data), Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        assert_eq!(b.rows(), k, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        self.binary(other, Tensor::new([m, n], out), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = transpose(&self.value());
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(self.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(self.map(softplus), Op::Softplus(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.map(f64::ln), Op::Log(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(self.map(f64::abs), Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.map(|x| x * x), Op::Square(self.id))
    }

    pub fn clamp_min(self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x.max(c)), Op::ClampMin(self.id, c))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        if n == 0 {
            return self.sum();
        }
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum of each row: `[m, n] -> [m]`.
    pub fn row_sum(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let data = (0..a.rows()).map(|r| a.data()[r * c..(r + 1) * c].iter().sum()).collect();
        self.unary(Tensor::new([a.rows()], data), Op::RowSum(self.id))
    }

    /// Euclidean norm of each row: `[m, n] -> [m]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norm(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let data = (0..a.rows())
            .map(|r| a.data()[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.unary(Tensor::new([a.rows()], data), Op::RowNorm(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.unary(Tensor::new(a.shape().to_vec(), data), Op::SoftmaxRows(self.id))
    }

    /// Layer normalization over each row with learned gain and bias.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let a = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let (rows, c) = (a.rows(), a.cols());
        let mut xhat = vec![0.0; a.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let row = &a.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg() || gamma.rg() || beta.rg();
        self.tape.push(
            Tensor::new(a.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..a.rows() {
            data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        self.binary(other, Tensor::new([a.rows(), ca + cb], data), Op::ConcatCols(self.id, other.id))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        assert!(start <= end && end <= c);
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for r in 0..a.rows() {
            data.extend_from_slice(&a.data()[r * c + start..r * c + end]);
        }
        self.unary(Tensor::new([a.rows(), end - start], data), Op::SliceCols(self.id, start))
    }

    /// Flat element gather into a rank-1 tensor.
    pub fn gather(self, indices: Vec<usize>) -> Var<'t> {
        let a = self.value();
        let data = indices.iter().map(|&i| a.data()[i]).collect();
        self.unary(Tensor::new([indices.len()], data), Op::Gather(self.id, Rc::new(indices)))
    }

    pub fn gather_rows(self, indices: Vec<usize>) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
        }
        self.unary(
            Tensor::new([indices.len(), c], data),
            Op::GatherRows(self.id, Rc::new(indices)),
        )
    }

    /// Fixed-weight linear resampling along one axis, one output per tap set.
    pub fn interp(self, taps: Rc<Vec<Taps>>, axis: Axis) -> Var<'t> {
        let a = self.value();
        let out = match axis {
            Axis::Rows => {
                let c = a.cols();
                let mut out = vec![0.0; taps.len() * c];
                for (o, t) in taps.iter().enumerate() {
                    let dst = &mut out[o * c..(o + 1) * c];
                    for &(i, w) in t {
                        if w != 0.0 {
                            let src = &a.data()[i as usize * c..(i as usize + 1) * c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
                Tensor::new([taps.len(), c], out)
            }
            Axis::Cols => {
                let n_in = a.cols();
                let n_out = taps.len();
                let mut out = vec![0.0; a.rows() * n_out];
                for ch in 0..a.rows() {
                    let src = &a.data()[ch * n_in..(ch + 1) * n_in];
                    let dst = &mut out[ch * n_out..(ch + 1) * n_out];
                    for (o, t) in taps.iter().enumerate() {
                        dst[o] = t.iter().map(|&(i, w)| w * src[i as usize]).sum();
                    }
                }
                Tensor::new([a.rows(), n_out], out)
            }
        };
        let x = self.id;
        self.unary(out, Op::Interp { x, taps, axis })
    }

    /// 2D convolution of a `[c_in, h, w]` map with weights
    /// `[c_out, c_in * k * k]` and bias `[c_out]`, giving `[c_out, h', w']`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "conv2d expects [c, h, w], got {:?}", shape);
        let geom = ConvGeom {
            c_in: shape[0],
            h: shape[1],
            w: shape[2],
            kernel,
            stride,
            pad,
        };
        let wv = weight.value();
        assert_eq!(wv.cols(), geom.patch(), "conv2d weight {:?} vs input {:?}", wv.shape(), shape);
        let c_out = wv.rows();
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let n_out = oh * ow;
        let cols = if kernel == 1 && stride == 1 && pad == 0 {
            x.data().to_vec()
        } else {
            im2col(x.data(), &geom)
        };
        let mut out = vec![0.0; c_out * n_out];
        for (c, row) in out.chunks_mut(n_out).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.value().data()[c]);
        }
        gemm(c_out, geom.patch(), n_out, wv.data(), false, &cols, false, 1.0, &mut out);
        let rg = self.rg() || weight.rg() || bias.rg();
        self.tape.push(
            Tensor::new([c_out, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention. `self` is the projected
    /// query `[lq, d]`; `key` and `value` are projected `[lk, d]`.
    pub fn attention(self, key: Var<'t>, value: Var<'t>, heads: usize) -> Var<'t> {
        let (q, k, v) = (self.value(), key.value(), value.value());
        assert_eq!(q.cols() % heads, 0, "width {} not divisible by {heads} heads", q.cols());
        assert_eq!(k.cols(), q.cols());
        assert_eq!(v.shape(), k.shape());
        assert!(k.rows() > 0, "attention over an empty key set");
        let (out, probs) = attention_forward(&q, &k, &v, heads);
        let rg = self.rg() || key.rg() || value.rg();
        let var = self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: key.id,
                v: value.id,
                heads,
            },
            rg,
        );
        self.tape.inner.borrow_mut().nodes[var.id].attention = Some((heads, Rc::new(probs)));
        var
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_with(rhs, |a, b| a + b);
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_with(rhs, |a, b| a - b);
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_with(rhs, |a, b| a * b);
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
