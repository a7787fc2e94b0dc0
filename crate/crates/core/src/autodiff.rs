//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Tensor`] handles.
//! [`Tape::backward`] walks the records in strict reverse order and
//! accumulates gradients into the leaves that require them. Leaf gradients
//! persist on the tape, so calling `backward` twice without
//! [`Tape::zero_grad`] adds the second gradient onto the first.
//!
//! Broadcasting is limited to scalar-tensor pairs in the binary arithmetic
//! ops; anything else needs an explicit [`Tensor::expand_dim`].
//!
//! Subgradient conventions: `abs'(0) = 0`, `clamp_min'` at the boundary is 0,
//! and sorting orders tied values by their original index.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Powf(f64),
    ClampMin(f64),
    Neg,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        indices: Vec<usize>,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    ExpandDim {
        x: usize,
        axis: usize,
    },
    Sort {
        x: usize,
        perm: Vec<usize>,
    },
    Softmax(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Accumulated leaf gradients after a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor<'_>) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `t`, zeros if it received none.
    pub fn wrt(&self, t: &Tensor<'_>) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        self.push_shared(shape, Rc::new(value), op, requires_grad)
    }

    fn push_shared(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        op: Op,
        requires_grad: bool,
    ) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if numel(shape) != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {len}",
                numel(shape)
            )));
        }
        Ok(())
    }

    /// A differentiable leaf.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    fn node_value(&self, id: usize) -> Rc<Vec<f64>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn node_requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagate d(loss)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Shape("loss belongs to a different tape".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf = self.leaf_grads.borrow_mut();
        if leaf.len() < nodes.len() {
            leaf.resize(nodes.len(), None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, id, g, &mut grads, &mut leaf);
        }
        Ok(Gradients {
            grads: leaf.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g.to_vec()),
    }
}

/// Gradient slot of `id`, zero-filled to `len` on first use.
fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backward_node(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf: &mut [Option<Vec<f64>>],
) {
    let node = &nodes[id];
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => accumulate(leaf, id, g),
        Op::Unary(x, u) => {
            let xv = &nodes[*x].value;
            let yv = &node.value;
            let dx: Vec<f64> = match *u {
                Unary::Softplus => g
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect(),
                Unary::Sigmoid => g
                    .iter()
                    .zip(yv.iter())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect(),
                Unary::Exp => g.iter().zip(yv.iter()).map(|(g, &y)| g * y).collect(),
                Unary::Log => g.iter().zip(xv.iter()).map(|(g, &x)| g / x).collect(),
                Unary::Abs => g
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Unary::Sqrt => g.iter().zip(yv.iter()).map(|(g, &y)| g * 0.5 / y).collect(),
                Unary::Powf(p) => g
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, &x)| g * p * x.powf(p - 1.0))
                    .collect(),
                Unary::ClampMin(c) => g
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, &x)| if x > c { *g } else { 0.0 })
                    .collect(),
                Unary::Neg => g.iter().map(|g| -g).collect(),
                Unary::AddScalar(_) => g,
                Unary::MulScalar(s) => g.iter().map(|g| g * s).collect(),
            };
            accumulate(grads, *x, dx);
        }
        Op::Binary(a, b, kind) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let n = g.len();
            let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
            let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
            let reduce = |full: Vec<f64>, len: usize| -> Vec<f64> {
                if len == 1 && n != 1 {
                    vec![full.iter().sum()]
                } else {
                    full
                }
            };
            if matches!(kind, Binary::Add) && av.len() == n && bv.len() == n {
                match (req(a), req(b)) {
                    (true, true) => {
                        add_into(grads, a, &g);
                        accumulate(grads, b, g);
                    }
                    (true, false) => accumulate(grads, a, g),
                    (false, _) => accumulate(grads, b, g),
                }
                return;
            }
            if req(a) {
                let da: Vec<f64> = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => (0..n).map(|i| g[i] * bt(i)).collect(),
                    Binary::Div => (0..n).map(|i| g[i] / bt(i)).collect(),
                };
                accumulate(grads, a, reduce(da, av.len()));
            }
            if req(b) {
                let db: Vec<f64> = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.iter().map(|g| -g).collect(),
                    Binary::Mul => (0..n).map(|i| g[i] * at(i)).collect(),
                    Binary::Div => (0..n)
                        .map(|i| {
                            let d = bt(i);
                            -g[i] * at(i) / (d * d)
                        })
                        .collect(),
                };
                accumulate(grads, b, reduce(db, bv.len()));
            }
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (a, b, ta, tb, batch, m, k, n) = (*a, *b, *ta, *tb, *batch, *m, *k, *n);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if req(a) {
                let mut da = vec![0.0; av.len()];
                for bi in 0..batch {
                    let dc = View::row_major(&g[bi * sc..(bi + 1) * sc], n);
                    let opb = View::op(&bv[bi * sb..(bi + 1) * sb], k, n, tb);
                    let out = &mut da[bi * sa..(bi + 1) * sa];
                    if !ta {
                        gemm(m, n, k, dc, opb.t(), out);
                    } else {
                        gemm(k, n, m, opb, dc.t(), out);
                    }
                }
                accumulate(grads, a, da);
            }
            if req(b) {
                let mut db = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let dc = View::row_major(&g[bi * sc..(bi + 1) * sc], n);
                    let opa = View::op(&av[bi * sa..(bi + 1) * sa], m, k, ta);
                    let out = &mut db[bi * sb..(bi + 1) * sb];
                    if !tb {
                        gemm(k, m, n, opa.t(), dc, out);
                    } else {
                        gemm(n, m, k, dc.t(), opa, out);
                    }
                }
                accumulate(grads, b, db);
            }
        }
        Op::Conv1d { x, w, bias } => {
            let xs = &nodes[*x].shape;
            let ws = &nodes[*w].shape;
            let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
            let (cout, ksz) = (ws[0], ws[2]);
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let ck = cin * ksz;
            let mut col = vec![0.0; ck * len];
            let mut dcol = vec![0.0; ck * len];
            let mut dw = req(*w).then(|| vec![0.0; wv.len()]);
            let mut dx = req(*x).then(|| vec![0.0; xv.len()]);
            for bi in 0..bsz {
                let gy = &g[bi * cout * len..(bi + 1) * cout * len];
                if let Some(dw) = dw.as_mut() {
                    im2col(
                        &xv[bi * cin * len..(bi + 1) * cin * len],
                        cin,
                        len,
                        ksz,
                        &mut col,
                    );
                    let mut part = vec![0.0; cout * ck];
                    gemm(
                        cout,
                        len,
                        ck,
                        View::row_major(gy, len),
                        View::row_major(&col, len).t(),
                        &mut part,
                    );
                    dw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    gemm(
                        ck,
                        cout,
                        len,
                        View::row_major(wv, ck).t(),
                        View::row_major(gy, len),
                        &mut dcol,
                    );
                    col2im_add(
                        &dcol,
                        cin,
                        len,
                        ksz,
                        &mut dx[bi * cin * len..(bi + 1) * cin * len],
                    );
                }
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(bid) = bias {
                if req(*bid) {
                    let mut db = vec![0.0; cout];
                    for bi in 0..bsz {
                        for (c, d) in db.iter_mut().enumerate() {
                            let o = (bi * cout + c) * len;
                            *d += g[o..o + len].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *bid, db);
                }
            }
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, mid, inner) = split_axis(&nodes[*x].shape, *axis);
            let mut dx = vec![0.0; outer * mid * inner];
            for o in 0..outer {
                for j in 0..mid {
                    let dst = (o * mid + j) * inner;
                    dx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut off = 0;
            for &i in inputs {
                let mid = nodes[i].shape[*axis];
                if req(i) {
                    let mut d = vec![0.0; outer * mid * inner];
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        d[o * mid * inner..(o + 1) * mid * inner]
                            .copy_from_slice(&g[src..src + mid * inner]);
                    }
                    accumulate(grads, i, d);
                }
                off += mid;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = split_axis(&nodes[*x].shape, *axis);
            let len = node.shape[*axis];
            let dx = slot(grads, *x, outer * full * inner);
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                dx[dst..dst + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::IndexSelect { x, indices } => {
            let xs = &nodes[*x].shape;
            let row = numel(&xs[1..]);
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (r, &src) in indices.iter().enumerate() {
                dx[src * row..(src + 1) * row]
                    .iter_mut()
                    .zip(&g[r * row..(r + 1) * row])
                    .for_each(|(a, b)| *a += b);
            }
            accumulate(grads, *x, dx);
        }
        Op::Permute { x, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let dx = permute_data(&g, &node.shape, &inv);
            accumulate(grads, *x, dx);
        }
        Op::Reshape(x) => accumulate(grads, *x, g),
        Op::ExpandDim { x, axis } => {
            let (outer, n, inner) = split_axis(&node.shape, *axis);
            let mut dx = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = (o * n + j) * inner;
                    dx[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(&g[src..src + inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::Sort { x, perm } => {
            let mut dx = vec![0.0; g.len()];
            for (i, &p) in perm.iter().enumerate() {
                dx[p] += g[i];
            }
            accumulate(grads, *x, dx);
        }
        Op::Softmax(x) => {
            let l = *node.shape.last().unwrap_or(&1);
            let y = &node.value;
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.len() / l.max(1) {
                let s = r * l;
                let dot: f64 = (s..s + l).map(|i| g[i] * y[i]).sum();
                for i in s..s + l {
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            accumulate(grads, *x, dx);
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 {
        return data.to_vec();
    }
    // innermost output axis is iterated directly
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        let mut off = base;
        for _ in 0..inner_len {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance the outer multi-index
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn im2col(x: &[f64], cin: usize, len: usize, ksz: usize, col: &mut [f64]) {
    let pad = (ksz - 1) / 2;
    for c in 0..cin {
        let row = &x[c * len..(c + 1) * len];
        for kk in 0..ksz {
            let dst = &mut col[(c * ksz + kk) * len..(c * ksz + kk + 1) * len];
            for (t, d) in dst.iter_mut().enumerate() {
                let s = t as isize + kk as isize - pad as isize;
                *d = if s >= 0 && (s as usize) < len {
                    row[s as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(dcol: &[f64], cin: usize, len: usize, ksz: usize, dx: &mut [f64]) {
    let pad = (ksz - 1) / 2;
    for c in 0..cin {
        for kk in 0..ksz {
            let src = &dcol[(c * ksz + kk) * len..(c * ksz + kk + 1) * len];
            for (t, v) in src.iter().enumerate() {
                let s = t as isize + kk as isize - pad as isize;
                if s >= 0 && (s as usize) < len {
                    dx[c * len + s as usize] += v;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }
    /// View of `op(X)` (`rows x cols`) where `X` is stored row-major and
    /// transposed when `trans` is set.
    fn op(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        if trans {
            View {
                data,
                rs: 1,
                cs: rows as isize,
            }
        } else {
            View::row_major(data, cols)
        }
    }
    fn t(self) -> Self {
        View {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (m x n, row-major) += a (m x k) * b (k x n)`.
fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let max_off =
        |v: View<'_>, r: usize, cl: usize| (r as isize - 1) * v.rs + (cl as isize - 1) * v.cs;
    assert!((max_off(a, m, k) as usize) < a.data.len());
    assert!((max_off(b, k, n) as usize) < b.data.len());
    // SAFETY: the asserts above bound every strided access inside the
    // borrowed slices, and `c` holds at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.node_value(self.id)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_requires(self.id)
    }

    fn same_tape(&self, other: &Tensor<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Shape("tensors from different tapes".into()))
        }
    }

    fn unary(&self, u: Unary) -> Result<Tensor<'t>> {
        let x = self.value();
        let y: Vec<f64> = match u {
            Unary::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(v) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain(format!("log of non-positive value {v}")));
                }
                x.iter().map(|v| v.ln()).collect()
            }
            Unary::Abs => x.iter().map(|v| v.abs()).collect(),
            Unary::Sqrt => {
                if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::Domain(format!("sqrt of negative value {v}")));
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            Unary::Powf(p) => x.iter().map(|v| v.powf(p)).collect(),
            Unary::ClampMin(c) => x.iter().map(|v| v.max(c)).collect(),
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::AddScalar(s) => x.iter().map(|v| v + s).collect(),
            Unary::MulScalar(s) => x.iter().map(|v| v * s).collect(),
        };
        Ok(self
            .tape
            .push(self.shape(), y, Op::Unary(self.id, u), self.requires_grad()))
    }

    pub fn softplus(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Softplus)
    }
    pub fn sigmoid(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn exp(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Exp)
    }
    pub fn log(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Log)
    }
    pub fn abs(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Abs)
    }
    pub fn sqrt(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Sqrt)
    }
    pub fn powf(&self, p: f64) -> Result<Tensor<'t>> {
        self.unary(Unary::Powf(p))
    }
    pub fn clamp_min(&self, c: f64) -> Result<Tensor<'t>> {
        self.unary(Unary::ClampMin(c))
    }
    pub fn neg(&self) -> Result<Tensor<'t>> {
        self.unary(Unary::Neg)
    }
    pub fn add_scalar(&self, s: f64) -> Result<Tensor<'t>> {
        self.unary(Unary::AddScalar(s))
    }
    pub fn mul_scalar(&self, s: f64) -> Result<Tensor<'t>> {
        self.unary(Unary::MulScalar(s))
    }

    fn binary(&self, other: &Tensor<'t>, kind: Binary) -> Result<Tensor<'t>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (a, b) = (self.value(), other.value());
        let out_shape = if sa == sb || b.len() == 1 {
            sa.clone()
        } else if a.len() == 1 {
            sb.clone()
        } else {
            return Err(Error::Shape(format!("{kind:?} of {sa:?} and {sb:?}")));
        };
        let n = numel(&out_shape);
        let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
        let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let y = (0..n).map(|i| f(at(i), bt(i))).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(out_shape, y, Op::Binary(self.id, other.id, kind), rg))
    }

    pub fn add(&self, o: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(o, Binary::Add)
    }
    pub fn sub(&self, o: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(o, Binary::Sub)
    }
    pub fn mul(&self, o: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(o, Binary::Mul)
    }
    pub fn div(&self, o: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(o, Binary::Div)
    }

    /// Matrix product of 2-D `[m, k] x [k, n]` or batched 3-D
    /// `[b, m, k] x [b, k, n]` operands; `ta`/`tb` transpose the trailing two
    /// axes of the respective operand first.
    pub fn matmul_t(&self, other: &Tensor<'t>, ta: bool, tb: bool) -> Result<Tensor<'t>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        if sa.len() == 3 && sb[0] != batch {
            return Err(Error::Shape(format!("batch mismatch {sa:?} vs {sb:?}")));
        }
        let r = sa.len() - 2;
        let (m, k) = if ta {
            (sa[r + 1], sa[r])
        } else {
            (sa[r], sa[r + 1])
        };
        let (k2, n) = if tb {
            (sb[r + 1], sb[r])
        } else {
            (sb[r], sb[r + 1])
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "inner dimensions differ: {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                View::op(&a[bi * m * k..(bi + 1) * m * k], m, k, ta),
                View::op(&b[bi * k * n..(bi + 1) * k * n], k, n, tb),
                &mut c[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            shape,
            c,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul_t(other, false, false)
    }

    /// Length-preserving 1-D convolution (cross-correlation) of
    /// `x: [batch, c_in, len]` with `w: [c_out, c_in, k]` (odd `k`, zero
    /// padding) plus an optional per-channel bias `[c_out]`.
    pub fn conv1d(&self, w: &Tensor<'t>, bias: Option<&Tensor<'t>>) -> Result<Tensor<'t>> {
        self.same_tape(w)?;
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv1d of {xs:?} with kernel {ws:?}")));
        }
        if ws[2].is_multiple_of(2) {
            return Err(Error::Shape("conv1d kernel size must be odd".into()));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, ksz) = (ws[0], ws[2]);
        let bv = match bias {
            Some(b) => {
                self.same_tape(b)?;
                if b.shape() != [cout] {
                    return Err(Error::Shape(format!("conv1d bias {:?}", b.shape())));
                }
                Some(b.value())
            }
            None => None,
        };
        let xv = self.value();
        let wv = w.value();
        let ck = cin * ksz;
        let mut col = vec![0.0; ck * len];
        let mut out = vec![0.0; bsz * cout * len];
        for bi in 0..bsz {
            im2col(
                &xv[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                ksz,
                &mut col,
            );
            let o = &mut out[bi * cout * len..(bi + 1) * cout * len];
            if let Some(bv) = &bv {
                for c in 0..cout {
                    o[c * len..(c + 1) * len]
                        .iter_mut()
                        .for_each(|v| *v = bv[c]);
                }
            }
            gemm(
                cout,
                ck,
                len,
                View::row_major(&wv, ck),
                View::row_major(&col, len),
                o,
            );
        }
        let rg =
            self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            vec![bsz, cout, len],
            out,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Result<Tensor<'t>> {
        let s = self.value().iter().sum();
        Ok(self
            .tape
            .push(Vec::new(), vec![s], Op::Sum(self.id), self.requires_grad()))
    }

    pub fn mean(&self) -> Result<Tensor<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self
            .tape
            .push(Vec::new(), vec![s], Op::Mean(self.id), self.requires_grad()))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} of {shape:?}")));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..mid {
                let src = (o * mid + j) * inner;
                y[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&x[src..src + inner])
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape.push(
            out_shape,
            y,
            Op::SumAxis { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    pub fn concat(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat of {s0:?} and {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0;
        for p in parts {
            let v = p.value();
            let mid = p.shape()[axis];
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                out[dst..dst + mid * inner]
                    .copy_from_slice(&v[o * mid * inner..(o + 1) * mid * inner]);
            }
            off += mid;
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            y.extend_from_slice(&x[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            y,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Rows of axis 0 picked by `indices` (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::Shape("index_select on a scalar".into()));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Shape(format!("index {i} out of range {}", shape[0])));
        }
        let row = numel(&shape[1..]);
        let x = self.value();
        let mut y = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            y.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.tape.push(
            out_shape,
            y,
            Op::IndexSelect {
                x: self.id,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape(format!("permutation {axes:?} of {shape:?}")));
        }
        let y = permute_data(&self.value(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.tape.push(
            out_shape,
            y,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        Ok(self.tape.push_shared(
            shape.to_vec(),
            self.value(),
            Op::Reshape(self.id),
            self.requires_grad(),
        ))
    }

    /// Insert a new axis of length `n` at `axis`, repeating the data.
    pub fn expand_dim(&self, axis: usize, n: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(Error::Shape(format!("expand axis {axis} of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let x = self.value();
        let mut y = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                y.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        Ok(self.tape.push(
            out_shape,
            y,
            Op::ExpandDim { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// Ascending sort of a 1-D tensor. Returns the sorted values and the
    /// permutation with `sorted[i] = x[perm[i]]`; ties keep input order.
    pub fn sort_with_permutation(&self) -> Result<(Tensor<'t>, Vec<usize>)> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::Shape(format!(
                "sort needs a 1-D tensor, got {shape:?}"
            )));
        }
        let x = self.value();
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let y = perm.iter().map(|&p| x[p]).collect();
        let t = self.tape.push(
            shape,
            y,
            Op::Sort {
                x: self.id,
                perm: perm.clone(),
            },
            self.requires_grad(),
        );
        Ok((t, perm))
    }

    /// Softmax over the last axis. `-inf` entries get probability 0; a row
    /// that is entirely `-inf` maps to all zeros.
    pub fn softmax(&self) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let l = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        if l > 0 {
            for (xr, yr) in x.chunks(l).zip(y.chunks_mut(l)) {
                let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut s = 0.0;
                for (a, b) in xr.iter().zip(yr.iter_mut()) {
                    *b = (a - m).exp();
                    s += *b;
                }
                yr.iter_mut().for_each(|b| *b /= s);
            }
        }
        Ok(self
            .tape
            .push(shape, y, Op::Softmax(self.id), self.requires_grad()))
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences with step `h`. Returns the maximum component-wise
/// relative error, using `max(|analytic|, |numeric|, 1e-12)` as denominator.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Result<Tensor<'t>>,
{
    let tape = Tape::new();
    let xt = tape.leaf(x.to_vec(), shape)?;
    let y = f(&tape, xt)?;
    let analytic = tape.backward(y)?.wrt(&xt);
    let eval = |p: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(p, shape)?;
        Ok(f(&t, v)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        up[i] += h;
        let mut dn = x.to_vec();
        dn[i] -= h;
        let numeric = (eval(up)? - eval(dn)?) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
