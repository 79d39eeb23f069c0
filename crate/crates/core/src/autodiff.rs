//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Values are
//! matrices (a tensor's trailing extent is its column count, everything
//! before it folds into rows). [`Tape::backward`] walks the tape once in
//! reverse and returns gradients for every node that depends on a leaf.
//!
//! ```
//! use eqshape_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0, -2.0]);
//! ```

// Only needed when std is absent from the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use alloc::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                alloc::format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
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

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            self.shape[..self.shape.len().saturating_sub(1)].iter().product()
        } else {
            self.data.len() / c
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

/// Neighbor lists of an undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Builds from an undirected edge list; duplicate edges are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidSpec(alloc::format!(
                    "edge ({a}, {b}) out of range for {n} vertices"
                )));
            }
            if a == b {
                return Err(Error::InvalidSpec(alloc::format!("self-loop at vertex {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    /// Edges implied by a triangle list.
    pub fn from_triangles(n: usize, faces: &[[usize; 3]]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Relabels vertices: new vertex `perm[i]` is old vertex `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut neighbors = vec![Vec::new(); self.len()];
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut l: Vec<usize> = list.iter().map(|&j| perm[j]).collect();
            l.sort_unstable();
            neighbors[perm[i]] = l;
        }
        Self { neighbors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Abs(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    NormRows(Var),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    SegmentMean(Var, usize),
    SegmentMax(Var, Vec<usize>),
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Transpose(Var),
    GraphMean(Var, Arc<Adjacency>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `C (+)= op(A) op(B)` for row-major buffers. `ta`/`tb` read the operand as
/// transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // a is m×k (or k×m stored when transposed), b is k×n (or n×k).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let g = self.ng(a);
        self.push(value, op, g)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Row count and column count of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, alloc::format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", alloc::format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), g))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    /// `a + 1·rowᵀ`: adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                alloc::format!("{r}x{c} + {:?}", self.dims(row)),
            ));
        }
        let rv = self.data(row).to_vec();
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, y) in chunk.iter_mut().zip(&rv) {
                *x += y;
            }
        }
        let g = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.unary(a, Tensor { shape: vec![r, c], data }, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.data(a).iter().map(|x| x + s).collect();
        self.unary(a, Tensor { shape: vec![r, c], data }, Op::AddScalar(a))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        self.unary(a, Tensor { shape: vec![r, c], data }, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, elu, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Euclidean norm of each row: `r×c → r×1`.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self
            .data(a)
            .chunks(c.max(1))
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .take(r)
            .collect();
        self.unary(a, Tensor { shape: vec![r, 1], data }, Op::NormRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.unary(a, Tensor::scalar(s), Op::Mean(a))
    }

    /// Average of the rows: `r×c → 1×c`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.data(a).chunks(c.max(1)).take(r) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
        self.unary(a, Tensor::row(out), Op::ColMean(a))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: usize) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        if seg == 0 || r % seg != 0 {
            return Err(Error::shape(op, alloc::format!("{r} rows into segments of {seg}")));
        }
        Ok((r / seg, c))
    }

    /// Mean over consecutive row blocks of length `seg`: `(G·seg)×c → G×c`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (g, c) = self.check_segments("segment_mean", a, seg)?;
        let mut out = vec![0.0; g * c];
        let src = self.data(a);
        for b in 0..g {
            for i in 0..seg {
                let row = &src[(b * seg + i) * c..(b * seg + i + 1) * c];
                for (o, x) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= seg as f64);
        Ok(self.unary(a, Tensor::matrix(g, c, out)?, Op::SegmentMean(a, seg)))
    }

    /// Max over consecutive row blocks of length `seg`. Ties pick the first
    /// row.
    pub fn segment_max(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (g, c) = self.check_segments("segment_max", a, seg)?;
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut arg = vec![0usize; g * c];
        let src = self.data(a);
        for b in 0..g {
            for i in 0..seg {
                let base = (b * seg + i) * c;
                for j in 0..c {
                    let x = src[base + j];
                    if i == 0 || x > out[b * c + j] {
                        out[b * c + j] = x;
                        arg[b * c + j] = base + j;
                    }
                }
            }
        }
        Ok(self.unary(a, Tensor::matrix(g, c, out)?, Op::SegmentMax(a, arg)))
    }

    /// Repeats each row `times` times consecutively: `r×c → (r·times)×c`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * times * c);
        for row in self.data(a).chunks(c.max(1)).take(r) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        self.unary(a, Tensor { shape: vec![r * times, c], data: out }, Op::RepeatRows(a, times))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", alloc::format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", alloc::format!("{pc} cols vs {c}")));
            }
            out.extend_from_slice(self.data(p));
            r += pr;
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::shape("slice_rows", alloc::format!("{start}+{len} > {r}")));
        }
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        Ok(self.unary(a, Tensor::matrix(len, c, data)?, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", alloc::format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.data(a).chunks(c.max(1)).take(r) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.unary(a, Tensor::matrix(r, len, data)?, Op::SliceCols(a, start)))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        if rows * cols != n {
            return Err(Error::shape("reshape", alloc::format!("{n} values into {rows}x{cols}")));
        }
        let data = self.data(a).to_vec();
        Ok(self.unary(a, Tensor::matrix(rows, cols, data)?, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.unary(a, Tensor { shape: vec![c, r], data: out }, Op::Transpose(a))
    }

    /// Neighbor mean on a stack of graphs sharing one adjacency: rows are
    /// grouped in blocks of `adj.len()` vertices. Isolated vertices get zero.
    pub fn graph_mean(&mut self, a: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let n = adj.len();
        let (blocks, c) = self.check_segments("graph_mean", a, n)?;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..blocks {
            for i in 0..n {
                let nb = adj.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let inv = 1.0 / nb.len() as f64;
                let dst = &mut out[(b * n + i) * c..(b * n + i + 1) * c];
                for &j in nb {
                    let row = &src[(b * n + j) * c..(b * n + j + 1) * c];
                    for (o, x) in dst.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                dst.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let r = blocks * n;
        Ok(self.unary(a, Tensor::matrix(r, c, out)?, Op::GraphMean(a, adj.clone())))
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::NotScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &dy, &mut grads);
            // Interior gradients are dropped as soon as they are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &node.value.data;
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data.as_slice();
        let dims = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                acc(*a, &mut |g| gemm(m, n, k, dy, false, val(*b), true, g, true));
                acc(*b, &mut |g| gemm(k, m, n, val(*a), true, dy, false, g, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if vb[i] >= va[i] {
                            g[i] += dy[i];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        if vb[i] < va[i] {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| add_into(g, dy));
                let c = dims(*row).1;
                acc(*row, &mut |g| {
                    for chunk in dy.chunks(c.max(1)) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += s * d)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                })
            }
            Op::Elu(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * if va[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            g[i] += dy[i];
                        } else if va[i] < 0.0 {
                            g[i] -= dy[i];
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] >= *lo && va[i] <= *hi {
                            g[i] += dy[i];
                        }
                    }
                })
            }
            Op::NormRows(a) => {
                let va = val(*a);
                let c = dims(*a).1;
                acc(*a, &mut |g| {
                    for (i, (row, grow)) in va.chunks(c.max(1)).zip(g.chunks_mut(c.max(1))).enumerate() {
                        if y[i] > 0.0 {
                            let s = dy[i] / y[i];
                            for (gx, x) in grow.iter_mut().zip(row) {
                                *gx += s * x;
                            }
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += dy[0])),
            Op::Mean(a) => acc(*a, &mut |g| {
                let s = dy[0] / g.len().max(1) as f64;
                g.iter_mut().for_each(|x| *x += s);
            }),
            Op::ColMean(a) => {
                let (r, c) = dims(*a);
                acc(*a, &mut |g| {
                    for chunk in g.chunks_mut(c.max(1)) {
                        for (x, d) in chunk.iter_mut().zip(dy) {
                            *x += d / r as f64;
                        }
                    }
                })
            }
            Op::SegmentMean(a, seg) => {
                let c = dims(*a).1;
                acc(*a, &mut |g| {
                    for (i, chunk) in g.chunks_mut(c.max(1)).enumerate() {
                        let b = i / seg;
                        for (x, d) in chunk.iter_mut().zip(&dy[b * c..(b + 1) * c]) {
                            *x += d / *seg as f64;
                        }
                    }
                })
            }
            Op::SegmentMax(a, arg) => acc(*a, &mut |g| {
                for (d, &src) in dy.iter().zip(arg) {
                    g[src] += d;
                }
            }),
            Op::RepeatRows(a, times) => {
                let c = dims(*a).1;
                acc(*a, &mut |g| {
                    for (i, chunk) in dy.chunks(c.max(1)).enumerate() {
                        let r = i / times;
                        add_into(&mut g[r * c..(r + 1) * c], chunk);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let c = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = dims(p);
                    acc(p, &mut |g| {
                        for i in 0..pr {
                            add_into(&mut g[i * pc..(i + 1) * pc], &dy[i * c + offset..i * c + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |g| add_into(g, &dy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = dims(*a).1;
                acc(*a, &mut |g| add_into(&mut g[start * c..start * c + dy.len()], dy));
            }
            Op::SliceCols(a, start) => {
                let c = dims(*a).1;
                let len = node.value.cols();
                acc(*a, &mut |g| {
                    for (i, chunk) in dy.chunks(len.max(1)).enumerate() {
                        add_into(&mut g[i * c + start..i * c + start + len], chunk);
                    }
                })
            }
            Op::Transpose(a) => {
                let (r, c) = dims(*a);
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                })
            }
            Op::GraphMean(a, adj) => {
                let n = adj.len();
                let c = dims(*a).1;
                let blocks = dims(*a).0 / n.max(1);
                acc(*a, &mut |g| {
                    for b in 0..blocks {
                        for i in 0..n {
                            let nb = adj.neighbors(i);
                            if nb.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / nb.len() as f64;
                            let src = &dy[(b * n + i) * c..(b * n + i + 1) * c];
                            for &j in nb {
                                let dst = &mut g[(b * n + j) * c..(b * n + j + 1) * c];
                                for (x, d) in dst.iter_mut().zip(src) {
                                    *x += inv * d;
                                }
                            }
                        }
                    }
                })
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (x, y) in g.iter_mut().zip(d) {
        *x += y;
    }
}

/// Gradients from one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for constants, interior nodes and leaves
    /// that do not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All entries concatenated in insertion order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "Params::set_flat",
                alloc::format!("{} values for {} scalars", flat.len(), self.num_scalars()),
            ));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(alloc::format!("missing parameter `{name}`")))
    }

    /// Per-parameter gradients in insertion order.
    pub fn grads(&self, tape: &Tape, g: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| g.get_or_zeros(v, tape.value(v).len()))
            .collect()
    }
}

/// Uniform in `±√(6/(fan_in + fan_out))`, stored `fan_in × fan_out`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor {
        shape: vec![fan_in, fan_out],
        data,
    }
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over all
/// parameters.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], eps: f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p);
        p[i] = orig - eps;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    worst
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn check_op(rng: &mut impl Rng, shapes: &[(usize, usize)], build: &Build) -> Result<f64> {
    // Entries bounded away from zero so kinks (relu, abs) are not straddled.
    let mut flat = Vec::new();
    for &(r, c) in shapes {
        for _ in 0..r * c {
            let mag: f64 = rng.random_range(0.2..1.2);
            flat.push(if rng.random_bool(0.5) { mag } else { -mag });
        }
    }
    let eval = |vals: &[f64], weights: Option<&Tensor>| -> Result<(f64, Option<Vec<f64>>, Tensor)> {
        let mut tape = Tape::new();
        let mut off = 0;
        let mut leaves = Vec::new();
        for &(r, c) in shapes {
            leaves.push(tape.leaf(Tensor::matrix(r, c, vals[off..off + r * c].to_vec())?));
            off += r * c;
        }
        let out = build(&mut tape, &leaves)?;
        let shape = tape.value(out).clone();
        let Some(w) = weights else {
            return Ok((0.0, None, shape));
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        let g = tape.backward(loss)?;
        let mut grads = Vec::new();
        for &l in &leaves {
            grads.extend(g.get_or_zeros(l, tape.value(l).len()));
        }
        Ok((tape.scalar_value(loss), Some(grads), shape))
    };
    let (_, _, out) = eval(&flat, None)?;
    let w = Tensor::matrix(
        out.rows(),
        out.cols(),
        (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let (_, analytic, _) = eval(&flat, Some(&w))?;
    let analytic = analytic.unwrap_or_default();
    let f = |p: &[f64]| eval(p, Some(&w)).map(|r| r.0).unwrap_or(f64::NAN);
    Ok(grad_check(f, &flat, &analytic, 1e-5))
}

/// Finite-difference check of every tape primitive on random inputs.
/// Returns the worst relative gradient error per primitive.
pub fn primitive_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let adj = Arc::new(Adjacency::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])?);
    let cases: Vec<(&'static str, Vec<(usize, usize)>, Box<Build>)> = vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![(3, 2), (3, 2)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![(3, 2), (3, 2)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![(3, 2), (3, 2)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("minimum", vec![(3, 2), (3, 2)], Box::new(|t, v| {
            // Offset one side so no pair is within the difference step.
            let b = t.add_scalar(v[1], 3.0);
            let b = t.scale(b, 0.5);
            t.minimum(v[0], b)
        })),
        ("add_row", vec![(3, 2), (1, 2)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", vec![(2, 3)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![(2, 3)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("relu", vec![(3, 3)], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("elu", vec![(3, 3)], Box::new(|t, v| Ok(t.elu(v[0])))),
        ("tanh", vec![(3, 3)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("abs", vec![(3, 3)], Box::new(|t, v| Ok(t.abs(v[0])))),
        ("exp", vec![(3, 3)], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("clamp", vec![(3, 3)], Box::new(|t, v| Ok(t.clamp(v[0], -2.0, 2.0)))),
        ("norm_rows", vec![(4, 3)], Box::new(|t, v| Ok(t.norm_rows(v[0])))),
        ("sum", vec![(2, 3)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![(2, 3)], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("col_mean", vec![(4, 3)], Box::new(|t, v| Ok(t.col_mean(v[0])))),
        ("segment_mean", vec![(6, 2)], Box::new(|t, v| t.segment_mean(v[0], 3))),
        ("segment_max", vec![(6, 2)], Box::new(|t, v| t.segment_max(v[0], 3))),
        ("repeat_rows", vec![(2, 3)], Box::new(|t, v| Ok(t.repeat_rows(v[0], 3)))),
        ("concat_cols", vec![(2, 3), (2, 1)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![(2, 3), (1, 3)], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_rows", vec![(5, 2)], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("slice_cols", vec![(2, 5)], Box::new(|t, v| t.slice_cols(v[0], 2, 2))),
        ("reshape", vec![(2, 6)], Box::new(|t, v| t.reshape(v[0], 4, 3))),
        ("transpose", vec![(2, 5)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("graph_mean", vec![(8, 3)], Box::new(move |t, v| t.graph_mean(v[0], &adj))),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, build) in &cases {
        out.push((*name, check_op(&mut rng, shapes, &**build)?));
    }
    Ok(out)
}

/// Adam hyperparameters. Defaults: lr 1e-4, β = (0.9, 0.999), ε = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let shapes_ok = grads.len() == params.len()
        && state.m.len() == params.len()
        && params
            .iter()
            .zip(grads.iter().zip(&state.m))
            .all(|((_, t), (g, m))| g.len() == t.len() && m.len() == t.len());
    if !shapes_ok {
        return Err(Error::shape("adam_step", "gradients or state do not match parameters"));
    }
    state.step += 1;
    let b1c = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2c = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..t.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / b1c;
            let vh = v[j] / b2c;
            t.data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EQF1";

/// Checkpoint bytes: `EQF1`, then per tensor the name length, name, rank,
/// extents (all `u64`) and the data as `f64`, everything little-endian.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape.len() as u64).to_le_bytes());
        for &e in &t.shape {
            out.extend((e as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Corrupt("length does not fit in memory".into()))
    }
}

/// Inverse of [`encode_tensors`]; rejects truncated or malformed input.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| Error::Corrupt("missing EQF1 magic".into()))?;
    let mut r = Reader { bytes: rest, pos: 0 };
    let mut out = Vec::new();
    while r.pos < rest.len() {
        let len = r.u64()?;
        let name = core::str::from_utf8(r.take(len)?)
            .map(String::from)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u64()?;
        if rank > 8 {
            return Err(Error::Corrupt(alloc::format!("tensor {name:?} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<usize>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&c| c <= rest.len() / 8)
            .ok_or_else(|| Error::Corrupt(alloc::format!("tensor {name:?} is larger than the file")))?;
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }


    #[test]
    fn checkpoint_bytes_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1, -7.25]).unwrap();
        let b = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let c = Tensor::new(vec![], vec![3.0]).unwrap();
        let bytes = encode_tensors([("a", &a), ("b.w", &b), ("", &c)]);
        assert_eq!(&bytes[..4], b"EQF1");
        // magic + a: 8 + 1 + 8 + 16 + 48
        assert_eq!(&bytes[4..12], &1u64.to_le_bytes());
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, vec![("a".into(), a.clone()), ("b.w".into(), b), ("".into(), c)]);
        assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(decode_tensors(b"EQF1").unwrap(), vec![]);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let a = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let bytes = encode_tensors([("a", &a)]);
        for cut in 5..bytes.len() {
            assert!(matches!(decode_tensors(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        assert!(matches!(decode_tensors(b"EQF2"), Err(Error::Corrupt(_))));
        let mut huge = b"EQF1".to_vec();
        huge.extend(1u64.to_le_bytes());
        huge.push(b'x');
        huge.extend(2u64.to_le_bytes());
        huge.extend(u64::MAX.to_le_bytes());
        huge.extend(u64::MAX.to_le_bytes());
        assert!(matches!(decode_tensors(&huge), Err(Error::Corrupt(_))));
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 2, 3);
        let b = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.dims(c), (2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((tape.value(c).get(i, j) - want).abs() < 1e-14);
            }
        }
        let bad = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.matmul(va, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn simple_forward_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let k = tape.constant(Tensor::full(3, 5, 2.5));
        let m = tape.mean(k);
        assert_eq!(tape.scalar_value(m), 2.5);
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(3, 2, 0.7));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_form_gradient() {
        // loss = ‖W x‖², ∇x = 2 WᵀW x
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, 4, 3);
        let x = rand_tensor(&mut rng, 3, 1);
        let mut tape = Tape::new();
        let vw = tape.constant(w.clone());
        let vx = tape.leaf(x.clone());
        let y = tape.matmul(vw, vx).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let loss = tape.sum(y2);
        let g = tape.backward(loss).unwrap();
        let gx = g.get(vx).unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            for r in 0..4 {
                let wx: f64 = (0..3).map(|k| w.get(r, k) * x.get(k, 0)).sum();
                want += 2.0 * w.get(r, i) * wx;
            }
            assert!((gx[i] - want).abs() < 1e-12);
        }
        assert!(g.get(vw).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(2, 2, 1.0));
        assert_eq!(
            tape.backward(x).err(),
            Some(Error::NotScalarLoss { rows: 2, cols: 2 })
        );
    }

    #[test]
    fn grad_check_harness_sensitivity() {
        let p = [0.3, -1.2, 2.0];
        let lin = |q: &[f64]| 2.0 * q[0] - 3.0 * q[1] + 0.5 * q[2];
        assert!(grad_check(lin, &p, &[2.0, -3.0, 0.5], 1e-5) < 1e-10);
        let wrong = [2.0, -3.0, 0.6];
        assert!(grad_check(lin, &p, &wrong, 1e-5) > 1e-2);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..3 {
            for (name, err) in primitive_gradient_errors(seed).unwrap() {
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn mlp_loss_matches_finite_differences() {
        use crate::backbones::{Activation, Mlp, MlpConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(
            "m",
            MlpConfig {
                widths: vec![3, 6, 6, 1],
                activation: Activation::Tanh,
                skip: None,
            },
        )
        .unwrap();
        let mut p = Params::new();
        mlp.init(&mut rng, &mut p);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let x = rand_tensor(&mut rng, 5, 3);
        let loss_of = |p: &Params| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = mlp.forward(&mut tape, &b, xv).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let l = tape.mean(y2);
            let g = tape.backward(l).unwrap();
            (tape.scalar_value(l), b.grads(&tape, &g).concat())
        };
        let (_, analytic) = loss_of(&p);
        let flat = p.flat();
        let err = grad_check(
            |q| {
                let mut pp = p.clone();
                pp.set_flat(q).unwrap();
                loss_of(&pp).0
            },
            &flat,
            &analytic,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn forward_is_replay_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, 7, 5);
        let b = rand_tensor(&mut rng, 5, 3);
        let run = || {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let c = tape.matmul(va, vb).unwrap();
            let e = tape.elu(c);
            let l = tape.mean(e);
            tape.scalar_value(l).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Params::new();
        p.insert("w", Tensor::row(vec![1.0, -2.0]));
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m, vec![vec![0.0, 0.0]]);
        assert_eq!(st.v, vec![vec![0.0, 0.0]]);
        assert!(matches!(
            adam_step(&mut p, &[vec![0.0]], &mut st, &AdamConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::row(vec![0.0, 0.0]));
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let mut last = [0.0, 0.0];
        for _ in 0..2000 {
            let prev = p.flat();
            adam_step(&mut p, &[vec![0.5, -3.0]], &mut st, &cfg).unwrap();
            let now = p.flat();
            last = [now[0] - prev[0], now[1] - prev[1]];
        }
        assert!(last[0] < 0.0 && last[1] > 0.0);
        assert!((last[0].abs() - cfg.lr).abs() < 1e-3 * cfg.lr);
        assert!((last[1].abs() - cfg.lr).abs() < 1e-3 * cfg.lr);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = [0.7, -0.4, 0.1];
        let mut p = Params::new();
        p.insert(
            "x",
            Tensor::row((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let x = p.flat();
            let g: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        let x = p.flat();
        let err: f64 = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err < 1e-2, "distance {err}");
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = glorot_uniform(&mut rng, 10, 20);
        let b = (6.0f64 / 30.0).sqrt();
        assert_eq!(t.shape(), &[10, 20]);
        assert!(t.data().iter().all(|x| x.abs() <= b));
    }

    #[test]
    fn params_flat_roundtrip() {
        let mut p = Params::new();
        p.insert("a", Tensor::row(vec![1.0, 2.0]));
        p.insert("b", Tensor::scalar(3.0));
        p.insert("a", Tensor::row(vec![4.0, 5.0]));
        assert_eq!(p.flat(), vec![4.0, 5.0, 3.0]);
        p.set_flat(&[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[2.0]);
        assert!(p.set_flat(&[1.0]).is_err());
    }
}
