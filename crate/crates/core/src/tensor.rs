//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors are row-major `f64` buffers owned by a [`Tape`]; a [`Tensor`] is a
//! cheap handle (tape + node id). Every operation appends one tape entry whose
//! parents precede it, so the backward pass is a single reverse sweep that
//! accumulates into per-node gradients. Gradients are never cleared implicitly:
//! running backward twice doubles them, which the training loop relies on
//! never doing and the tests assert.
//!
//! Shape mismatches panic with both shapes in the message — shapes here are
//! static functions of the model config, so a mismatch is a bug, not input.

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Flat row-major offset of a multi-index.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    assert_eq!(shape.len(), idx.len(), "index rank {} vs shape rank {}", idx.len(), shape.len());
    let st = strides(shape);
    idx.iter().zip(&st).map(|(i, s)| i * s).sum()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize, p: usize, q: usize, r: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddRowBias { a: usize, bias: usize, rows: usize, cols: usize },
    SoftmaxLast { a: usize, slice: usize },
    MeanAxis { a: usize, axis: usize },
    Relu { a: usize },
    NormRows { a: usize, rows: usize, cols: usize, eps: f64 },
    PadRepeatLast { a: usize, n: usize, m: usize, cols: usize },
    ConcatRows { a: usize, b: usize, a_rows: usize, cols: usize },
    SliceRows { a: usize, start: usize, len: usize, cols: usize },
    IndexAxis0 { a: usize, index: usize, block: usize },
    StackRows { parts: Vec<usize>, cols: usize },
    Reshape { a: usize },
    SumAll { a: usize },
    CrossEntropy { probs: usize, target: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape. Single-threaded by construction (`Rc`); one tape per
/// forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a tensor living on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d >= 1), "zero dimension in shape {shape:?}");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// New leaf tensor (parameter or input).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Stack rank-1 tensors of equal length into a `[k, cols]` tensor.
    pub fn stack_rows(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let cols = parts[0].len();
        let mut data = Vec::with_capacity(parts.len() * cols);
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(
                p.shape(),
                vec![cols],
                "stack_rows: row shape {:?} vs expected [{}]",
                p.shape(),
                cols
            );
            data.extend_from_slice(&p.data());
            ids.push(p.id);
        }
        self.push(vec![parts.len(), cols], data, Op::StackRows { parts: ids, cols })
    }

    /// Seed the backward pass from a scalar node and sweep the tape once in
    /// reverse. The sweep computes this loss's gradient for every node into
    /// scratch buffers, then adds the scratch into each node's persistent
    /// grad — so a second backward call doubles every gradient.
    pub fn backward(&self, loss: &Tensor) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.nodes[loss.id].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            inner.nodes[loss.id].shape
        );
        let mut scratch: Vec<Vec<f64>> = inner
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        scratch[loss.id][0] = 1.0;
        for i in (0..inner.nodes.len()).rev() {
            backward_step(&inner.nodes, &mut scratch, i);
        }
        for (node, s) in inner.nodes.iter_mut().zip(scratch) {
            match node.grad.as_mut() {
                Some(g) => {
                    for (gv, sv) in g.iter_mut().zip(&s) {
                        *gv += sv;
                    }
                }
                None => node.grad = Some(s),
            }
        }
    }
}

/// Propagate node `i`'s scratch gradient into its parents' scratch slots.
fn backward_step(nodes: &[Node], scratch: &mut [Vec<f64>], i: usize) {
    // Parents always precede node i, so split the scratch there.
    let (before, rest) = scratch.split_at_mut(i);
    let node = &nodes[i];
    let go: &[f64] = &rest[0];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b, p, q, r } => {
            let (p, q, r) = (*p, *q, *r);
            let a_data = &nodes[*a].data;
            let b_data = &nodes[*b].data;
            {
                let ga = &mut before[*a];
                // dA += dC · Bᵀ
                for i in 0..p {
                    for k in 0..q {
                        let mut acc = 0.0;
                        for j in 0..r {
                            acc += go[i * r + j] * b_data[k * r + j];
                        }
                        ga[i * q + k] += acc;
                    }
                }
            }
            {
                let gb = &mut before[*b];
                // dB += Aᵀ · dC
                for k in 0..q {
                    for j in 0..r {
                        let mut acc = 0.0;
                        for i in 0..p {
                            acc += a_data[i * q + k] * go[i * r + j];
                        }
                        gb[k * r + j] += acc;
                    }
                }
            }
        }
        Op::Transpose { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let ga = &mut before[*a];
            for i in 0..rows {
                for j in 0..cols {
                    ga[i * cols + j] += go[j * rows + i];
                }
            }
        }
        Op::Add { a, b } => {
            {
                let ga = &mut before[*a];
                for (g, &u) in ga.iter_mut().zip(go) {
                    *g += u;
                }
            }
            {
                let gb = &mut before[*b];
                for (g, &u) in gb.iter_mut().zip(go) {
                    *g += u;
                }
            }
        }
        Op::Mul { a, b } => {
            let a_data = nodes[*a].data.clone();
            let b_data = nodes[*b].data.clone();
            {
                let ga = &mut before[*a];
                for ((g, &u), &bv) in ga.iter_mut().zip(go).zip(&b_data) {
                    *g += u * bv;
                }
            }
            {
                let gb = &mut before[*b];
                for ((g, &u), &av) in gb.iter_mut().zip(go).zip(&a_data) {
                    *g += u * av;
                }
            }
        }
        Op::Scale { a, c } => {
            let c = *c;
            let ga = &mut before[*a];
            for (g, &u) in ga.iter_mut().zip(go) {
                *g += c * u;
            }
        }
        Op::AddRowBias { a, bias, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            {
                let ga = &mut before[*a];
                for (g, &u) in ga.iter_mut().zip(go) {
                    *g += u;
                }
            }
            {
                let gb = &mut before[*bias];
                for i in 0..rows {
                    for j in 0..cols {
                        gb[j] += go[i * cols + j];
                    }
                }
            }
        }
        Op::SoftmaxLast { a, slice } => {
            let slice = *slice;
            let y = &node.data;
            let ga = &mut before[*a];
            for s in 0..y.len() / slice {
                let base = s * slice;
                let mut dot = 0.0;
                for j in 0..slice {
                    dot += go[base + j] * y[base + j];
                }
                for j in 0..slice {
                    ga[base + j] += y[base + j] * (go[base + j] - dot);
                }
            }
        }
        Op::MeanAxis { a, axis } => {
            let axis = *axis;
            let in_shape = &nodes[*a].shape;
            let axis_len = in_shape[axis];
            let post: usize = in_shape[axis + 1..].iter().product();
            let inv = 1.0 / axis_len as f64;
            let ga = &mut before[*a];
            for (flat, g) in ga.iter_mut().enumerate() {
                let pre = flat / (axis_len * post);
                let rem = flat % (axis_len * post);
                let post_idx = rem % post;
                *g += go[pre * post + post_idx] * inv;
            }
        }
        Op::Relu { a } => {
            let x = &nodes[*a].data;
            let ga = &mut before[*a];
            for ((g, &u), &xv) in ga.iter_mut().zip(go).zip(x.iter()) {
                if xv > 0.0 {
                    *g += u;
                }
            }
        }
        Op::NormRows { a, rows, cols, eps } => {
            let (rows, cols, eps) = (*rows, *cols, *eps);
            let x = &nodes[*a].data;
            let y = &node.data;
            let ga = &mut before[*a];
            for i in 0..rows {
                let row = &x[i * cols..(i + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let base = i * cols;
                let mut g_mean = 0.0;
                let mut gy_dot = 0.0;
                for j in 0..cols {
                    g_mean += go[base + j];
                    gy_dot += go[base + j] * y[base + j];
                }
                g_mean /= cols as f64;
                gy_dot /= cols as f64;
                for j in 0..cols {
                    ga[base + j] += inv_std * (go[base + j] - g_mean - y[base + j] * gy_dot);
                }
            }
        }
        Op::PadRepeatLast { a, n, m, cols } => {
            let (n, m, cols) = (*n, *m, *cols);
            let ga = &mut before[*a];
            for i in 0..n {
                for j in 0..cols {
                    ga[i * cols + j] += go[i * cols + j];
                }
            }
            for i in n..n + m {
                for j in 0..cols {
                    ga[(n - 1) * cols + j] += go[i * cols + j];
                }
            }
        }
        Op::ConcatRows { a, b, a_rows, cols } => {
            let (a_rows, cols) = (*a_rows, *cols);
            {
                let ga = &mut before[*a];
                for (g, &u) in ga.iter_mut().zip(&go[..a_rows * cols]) {
                    *g += u;
                }
            }
            {
                let gb = &mut before[*b];
                for (g, &u) in gb.iter_mut().zip(&go[a_rows * cols..]) {
                    *g += u;
                }
            }
        }
        Op::SliceRows { a, start, len, cols } => {
            let (start, len, cols) = (*start, *len, *cols);
            let ga = &mut before[*a];
            for i in 0..len * cols {
                ga[start * cols + i] += go[i];
            }
        }
        Op::IndexAxis0 { a, index, block } => {
            let (index, block) = (*index, *block);
            let ga = &mut before[*a];
            for j in 0..block {
                ga[index * block + j] += go[j];
            }
        }
        Op::StackRows { parts, cols } => {
            let cols = *cols;
            for (row, &pid) in parts.iter().enumerate() {
                let gp = &mut before[pid];
                for j in 0..cols {
                    gp[j] += go[row * cols + j];
                }
            }
        }
        Op::Reshape { a } => {
            let ga = &mut before[*a];
            for (g, &u) in ga.iter_mut().zip(go) {
                *g += u;
            }
        }
        Op::SumAll { a } => {
            let ga = &mut before[*a];
            for g in ga.iter_mut() {
                *g += go[0];
            }
        }
        Op::CrossEntropy { probs, target } => {
            let target = *target;
            let p = nodes[*probs].data[target];
            if p > PROB_FLOOR {
                // above the floor the clamp is inert (softmax outputs never
                // exceed 1 by more than rounding), so d/dp -ln(clamp(p)) = -1/p
                let gp = &mut before[*probs];
                gp[target] += go[0] * (-1.0 / p.min(1.0));
            }
            // p <= floor: clamp active, zero gradient
        }
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "item() on non-scalar shape {:?}", node.shape);
        node.data[0]
    }

    /// Gradient accumulated so far, `None` before any backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn backward(&self) {
        self.tape.backward(self);
    }

    fn rank2(&self) -> (usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 2, "expected rank-2 tensor, got shape {s:?}");
        (s[0], s[1])
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (p, q) = self.rank2();
        let (q2, r) = other.rank2();
        assert_eq!(
            q, q2,
            "matmul inner dimensions differ: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let av = a[i * q + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[k * r..(k + 1) * r];
                let crow = &mut c[i * r..(i + 1) * r];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        self.tape.push(
            vec![p, r],
            c,
            Op::Matmul {
                a: self.id,
                b: other.id,
                p,
                q,
                r,
            },
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (rows, cols) = self.rank2();
        let a = self.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        self.tape.push(
            vec![cols, rows],
            out,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        self.tape.push(
            self.shape(),
            data,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "mul shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        self.tape.push(
            self.shape(),
            data,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        self.tape.push(self.shape(), data, Op::Scale { a: self.id, c })
    }

    /// Broadcast-add a rank-1 bias across the rows of a rank-2 tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        let (rows, cols) = self.rank2();
        assert_eq!(
            bias.shape(),
            vec![cols],
            "row bias shape {:?} vs expected [{}]",
            bias.shape(),
            cols
        );
        let a = self.data();
        let b = bias.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = a[i * cols + j] + b[j];
            }
        }
        self.tape.push(
            vec![rows, cols],
            out,
            Op::AddRowBias {
                a: self.id,
                bias: bias.id,
                rows,
                cols,
            },
        )
    }

    /// Numerically stable softmax over the trailing axis.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape();
        let slice = *shape.last().expect("softmax_last on empty shape");
        let x = self.data();
        assert!(
            x.iter().all(|v| v.is_finite()),
            "numeric error: non-finite input to softmax_last"
        );
        let mut out = vec![0.0; x.len()];
        for s in 0..x.len() / slice {
            let base = s * slice;
            let row = &x[base..base + slice];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..slice {
                let e = (row[j] - max).exp();
                out[base + j] = e;
                sum += e;
            }
            for j in 0..slice {
                out[base + j] /= sum;
            }
        }
        self.tape
            .push(shape, out, Op::SoftmaxLast { a: self.id, slice })
    }

    /// Arithmetic mean along `axis`; the axis disappears from the shape
    /// (a rank-1 input reduces to shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let in_shape = self.shape();
        assert!(
            axis < in_shape.len(),
            "axis {axis} out of range for shape {in_shape:?}"
        );
        let axis_len = in_shape[axis];
        let post: usize = in_shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.data();
        let mut out = vec![0.0; numel(&out_shape)];
        for (flat, &v) in x.iter().enumerate() {
            let pre = flat / (axis_len * post);
            let rem = flat % (axis_len * post);
            let post_idx = rem % post;
            out[pre * post + post_idx] += v;
        }
        let inv = 1.0 / axis_len as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.tape
            .push(out_shape, out, Op::MeanAxis { a: self.id, axis })
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        self.tape.push(self.shape(), data, Op::Relu { a: self.id })
    }

    /// Per-row standardization over the trailing axis: `(x - mean) / sqrt(var + eps)`.
    pub fn norm_rows(&self, eps: f64) -> Tensor {
        let (rows, cols) = self.rank2();
        let x = self.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[i * cols + j] = (row[j] - mean) * inv_std;
            }
        }
        self.tape.push(
            vec![rows, cols],
            out,
            Op::NormRows {
                a: self.id,
                rows,
                cols,
                eps,
            },
        )
    }

    /// Keep the `n` input rows and append `m` copies of the final row.
    pub fn pad_repeat_last(&self, m: usize) -> Tensor {
        let (n, cols) = self.rank2();
        let x = self.data();
        let mut out = Vec::with_capacity((n + m) * cols);
        out.extend_from_slice(&x);
        for _ in 0..m {
            out.extend_from_slice(&x[(n - 1) * cols..n * cols]);
        }
        self.tape.push(
            vec![n + m, cols],
            out,
            Op::PadRepeatLast {
                a: self.id,
                n,
                m,
                cols,
            },
        )
    }

    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        let (a_rows, cols) = self.rank2();
        let (b_rows, b_cols) = other.rank2();
        assert_eq!(
            cols, b_cols,
            "concat_rows column mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let mut data = self.data();
        data.extend_from_slice(&other.data());
        self.tape.push(
            vec![a_rows + b_rows, cols],
            data,
            Op::ConcatRows {
                a: self.id,
                b: other.id,
                a_rows,
                cols,
            },
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (rows, cols) = self.rank2();
        assert!(
            start + len <= rows,
            "slice_rows {start}..{} out of range for shape {:?}",
            start + len,
            self.shape()
        );
        let x = self.data();
        let data = x[start * cols..(start + len) * cols].to_vec();
        self.tape.push(
            vec![len, cols],
            data,
            Op::SliceRows {
                a: self.id,
                start,
                len,
                cols,
            },
        )
    }

    /// Index the leading axis; result drops that axis.
    pub fn index_axis0(&self, index: usize) -> Tensor {
        let shape = self.shape();
        assert!(shape.len() >= 2, "index_axis0 needs rank >= 2, got {shape:?}");
        assert!(
            index < shape[0],
            "index {index} out of range for shape {shape:?}"
        );
        let block: usize = shape[1..].iter().product();
        let x = self.data();
        let data = x[index * block..(index + 1) * block].to_vec();
        self.tape.push(
            shape[1..].to_vec(),
            data,
            Op::IndexAxis0 {
                a: self.id,
                index,
                block,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.len(),
            "reshape to {:?} incompatible with shape {:?}",
            shape,
            self.shape()
        );
        self.tape
            .push(shape.to_vec(), self.data(), Op::Reshape { a: self.id })
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        self.tape.push(vec![1], vec![s], Op::SumAll { a: self.id })
    }
}

/// Matrix product (spec name for [`Tensor::matmul`]).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    a.matmul(b)
}

/// Trailing-axis softmax (spec name).
pub fn softmax_last(x: &Tensor) -> Tensor {
    x.softmax_last()
}

/// Mean along an axis (spec name).
pub fn mean_over_axis(x: &Tensor, axis: usize) -> Tensor {
    x.mean_axis(axis)
}

/// Single-head scaled dot-product attention: `softmax(q·kᵀ/√d)·v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.shape()[1];
    assert_eq!(
        k.shape()[1],
        d,
        "attention dim mismatch: q {:?} vs k {:?}",
        q.shape(),
        k.shape()
    );
    assert_eq!(
        v.shape()[0],
        k.shape()[0],
        "attention k/v row mismatch: {:?} vs {:?}",
        k.shape(),
        v.shape()
    );
    let logits = q.matmul(&k.transpose()).scale(1.0 / (d as f64).sqrt());
    logits.softmax_last().matmul(v)
}

/// Cross entropy between a probability vector and a one-hot target:
/// `-Σ onehot[j]·log(clamp(pred[j]))`. The prediction is clamped to
/// `[1e-12, 1]` before the log.
pub fn cross_entropy(pred_probs: &Tensor, onehot: &Tensor) -> Tensor {
    let k = pred_probs.len();
    assert_eq!(
        onehot.len(),
        k,
        "cross_entropy length mismatch: pred {:?} vs onehot {:?}",
        pred_probs.shape(),
        onehot.shape()
    );
    let oh = onehot.data();
    let mut target = None;
    for (j, &v) in oh.iter().enumerate() {
        if v == 1.0 {
            assert!(target.is_none(), "onehot has more than one 1 entry");
            target = Some(j);
        } else {
            assert!(v == 0.0, "onehot entry {j} is {v}, expected 0 or 1");
        }
    }
    let target = target.expect("onehot has no 1 entry");
    cross_entropy_indexed(pred_probs, target)
}

/// Cross entropy against a class index (the hot position).
pub fn cross_entropy_indexed(pred_probs: &Tensor, target: usize) -> Tensor {
    let k = pred_probs.len();
    assert!(target < k, "target {target} out of range for {k} classes");
    let p = pred_probs.data()[target].clamp(PROB_FLOOR, 1.0);
    let loss = -p.ln();
    pred_probs.tape.push(
        vec![1],
        vec![loss],
        Op::CrossEntropy {
            probs: pred_probs.id,
            target,
        },
    )
}

/// Central finite-difference check of tape gradients.
///
/// `f` evaluates the scalar objective at a parameter vector, returning the
/// value and the tape gradient. The returned figure is the maximum over all
/// coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, theta: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    grad_check_coords(f, theta, &coords, eps)
}

/// [`grad_check`] restricted to a subset of coordinates (used to report
/// per-parameter-group errors).
pub fn grad_check_coords<F>(
    mut f: F,
    theta: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(eps > 0.0, "eps must be positive, got {eps}");
    let (loss0, analytic) = f(theta);
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss0}")));
    }
    assert_eq!(analytic.len(), theta.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    let mut work = theta.to_vec();
    for &c in coords {
        work[c] = theta[c] + eps;
        let (lp, _) = f(&work);
        work[c] = theta[c] - eps;
        let (lm, _) = f(&work);
        work[c] = theta[c];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss during finite differences at coordinate {c}"
            )));
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[c].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[c] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let i2 = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(i2.matmul(&m).data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).data(), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let t = Tape::new();
        let z = t.leaf(vec![0.0; 6], &[2, 3]);
        let b = t.leaf((1..=12).map(|v| v as f64).collect(), &[3, 4]);
        let c = z.matmul(&b);
        assert_eq!(c.shape(), vec![2, 4]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "matmul inner dimensions differ: [2, 3] vs [2, 2]")]
    fn matmul_shape_mismatch_names_shapes() {
        let t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3]);
        let b = t.leaf(vec![0.0; 4], &[2, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn matmul_gradient_rule() {
        // C = A·B, loss = sum(C): dA = 1·Bᵀ, dB = Aᵀ·1
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let loss = a.matmul(&b).sum_all();
        loss.backward();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 0.0], &[3]);
        for v in x.softmax_last().data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let c = t.leaf(vec![7.25, 7.25, 7.25], &[3]);
        for v in c.softmax_last().data() {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
        // arbitrary slice + constant shift
        let base = t.leaf(vec![0.3, -1.2, 2.0], &[3]);
        let shifted = t.leaf(vec![0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0], &[3]);
        let sa = base.softmax_last().data();
        let sb = shifted.softmax_last().data();
        for (a, b) in sa.iter().zip(&sb) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn softmax_log_counts_case() {
        let t = Tape::new();
        let x = t.leaf(vec![1f64.ln(), 2f64.ln(), 3f64.ln()], &[3]);
        let y = x.softmax_last().data();
        assert!(close(y[0], 1.0 / 6.0, 1e-15));
        assert!(close(y[1], 2.0 / 6.0, 1e-15));
        assert!(close(y[2], 3.0 / 6.0, 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tape::new();
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = t.leaf(data, &[4, 3, 5]);
        let y = x.softmax_last().data();
        for s in 0..12 {
            let sum: f64 = y[s * 5..(s + 1) * 5].iter().sum();
            assert!(close(sum, 1.0, 1e-12), "slice {s} sums to {sum}");
        }
    }

    #[test]
    #[should_panic(expected = "non-finite input to softmax_last")]
    fn softmax_rejects_non_finite() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, f64::NAN], &[2]);
        let _ = x.softmax_last();
    }

    #[test]
    fn mean_axis_cases() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 3.0, 5.0, 7.0], &[2, 2]);
        assert_eq!(x.mean_axis(0).data(), vec![3.0, 5.0]);
        assert_eq!(x.mean_axis(1).data(), vec![2.0, 6.0]);
        // single-element axis is the identity on remaining dims
        let y = t.leaf(vec![4.0, 9.0], &[1, 2]);
        assert_eq!(y.mean_axis(0).data(), vec![4.0, 9.0]);
        // constant tensor reduces to the same constant
        let c = t.leaf(vec![2.5; 6], &[3, 2]);
        assert_eq!(c.mean_axis(0).data(), vec![2.5, 2.5]);
    }

    #[test]
    #[should_panic(expected = "axis 2 out of range")]
    fn mean_axis_out_of_range() {
        let t = Tape::new();
        let x = t.leaf(vec![0.0; 4], &[2, 2]);
        let _ = x.mean_axis(2);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let t = Tape::new();
        let q = t.leaf(vec![0.3, -2.0, 0.9, 0.1, 0.0, 4.0], &[3, 2]);
        let k = t.leaf(vec![0.5, 0.5], &[1, 2]);
        let v = t.leaf(vec![7.0, -3.0], &[1, 2]);
        let out = scaled_dot_attention(&q, &k, &v).data();
        for row in 0..3 {
            assert!(close(out[row * 2], 7.0, 1e-15));
            assert!(close(out[row * 2 + 1], -3.0, 1e-15));
        }
    }

    #[test]
    fn attention_orthogonal_query_gives_column_mean() {
        let t = Tape::new();
        let q = t.leaf(vec![1.0, 0.0], &[1, 2]);
        let k = t.leaf(vec![0.0, 1.0, 0.0, -1.0], &[2, 2]);
        let v = t.leaf(vec![2.0, 4.0, 6.0, 8.0], &[2, 2]);
        let out = scaled_dot_attention(&q, &k, &v).data();
        assert!(close(out[0], 4.0, 1e-12));
        assert!(close(out[1], 6.0, 1e-12));
    }

    #[test]
    fn attention_two_by_two_worked_case() {
        let t = Tape::new();
        let q = t.leaf(vec![1.0, 0.0], &[1, 2]);
        let k = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let v = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = scaled_dot_attention(&q, &k, &v).data();
        // logits = [1/sqrt(2), 0]; weights = softmax of that
        let l = 1.0 / 2f64.sqrt();
        let w0 = l.exp() / (l.exp() + 1.0);
        let w1 = 1.0 / (l.exp() + 1.0);
        assert!(close(out[0], w0, 1e-15));
        assert!(close(out[1], w1, 1e-15));
    }

    #[test]
    fn cross_entropy_cases() {
        let t = Tape::new();
        let perfect = t.leaf(vec![1.0, 0.0, 0.0], &[3]);
        let y = t.leaf(vec![1.0, 0.0, 0.0], &[3]);
        assert!(cross_entropy(&perfect, &y).item().abs() <= 1e-12);

        let half = t.leaf(vec![0.5, 0.5], &[2]);
        let y1 = t.leaf(vec![0.0, 1.0], &[2]);
        assert!(close(cross_entropy(&half, &y1).item(), 2f64.ln(), 1e-15));

        let e = std::f64::consts::E;
        let pe = t.leaf(vec![1.0 / e, 1.0 - 1.0 / e], &[2]);
        let y0 = t.leaf(vec![1.0, 0.0], &[2]);
        assert!(close(cross_entropy(&pe, &y0).item(), 1.0, 1e-15));
    }

    #[test]
    fn cross_entropy_gradient_is_reciprocal() {
        let t = Tape::new();
        let p = t.leaf(vec![0.25, 0.75], &[2]);
        let loss = cross_entropy_indexed(&p, 0);
        loss.backward();
        assert_eq!(p.grad().unwrap(), vec![-4.0, 0.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let t = Tape::new();
        let x = t.leaf(vec![3.0], &[1]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn pad_repeat_last_duplicates_final_row() {
        let t = Tape::new();
        let h = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let p = h.pad_repeat_last(2);
        assert_eq!(p.shape(), vec![4, 2]);
        assert_eq!(p.data(), vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        // gradient funnels the padded rows into the last source row
        let loss = p.sum_all();
        loss.backward();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn row_major_round_trip() {
        let shape = [3usize, 4, 5];
        let st = strides(&shape);
        assert_eq!(st, vec![20, 5, 1]);
        let mut seen = vec![false; 60];
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let flat = flat_index(&shape, &[i, j, k]);
                    assert!(!seen[flat]);
                    seen[flat] = true;
                    // invert
                    assert_eq!(flat / st[0], i);
                    assert_eq!((flat % st[0]) / st[1], j);
                    assert_eq!(flat % st[1], k);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let f = |theta: &[f64]| {
            let t = Tape::new();
            let x = t.leaf(theta.to_vec(), &[theta.len()]);
            let loss = x.mul(&x).sum_all();
            loss.backward();
            (loss.item(), x.grad().unwrap())
        };
        let worst = grad_check(f, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(worst < 1e-6, "relative error {worst}");
        // analytic gradient itself
        let (_, g) = f(&[1.0, 2.0, 3.0]);
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_check_constant_function() {
        let f = |theta: &[f64]| (42.0, vec![0.0; theta.len()]);
        let worst = grad_check(f, &[0.3, -0.7], 1e-5).unwrap();
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let f = |theta: &[f64]| (f64::INFINITY, vec![0.0; theta.len()]);
        assert!(grad_check(f, &[1.0], 1e-5).is_err());
    }



    /// Every differentiable op, composed into a scalar via sum_all, passes
    /// finite differences on random small tensors across 10 seeds.
    #[test]
    fn grad_check_every_op_random_tensors() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_vec =
                |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();

            // matmul + transpose + add_row_bias + relu chain: params are a 3x2 matrix,
            // a 2x3 matrix and a 3-bias, flattened together.
            let a0 = rand_vec(&mut rng, 6);
            let b0 = rand_vec(&mut rng, 6);
            let bias0 = rand_vec(&mut rng, 3);
            let mut theta = a0.clone();
            theta.extend(&b0);
            theta.extend(&bias0);
            let f = |th: &[f64]| {
                let t = Tape::new();
                let a = t.leaf(th[0..6].to_vec(), &[3, 2]);
                let b = t.leaf(th[6..12].to_vec(), &[3, 2]);
                let bias = t.leaf(th[12..15].to_vec(), &[3]);
                let c = a.matmul(&b.transpose()).add_row_bias(&bias).relu();
                // mean over rows of a row-softmax is a genuine mixture; any
                // other arrangement here collapses to a constant or has an
                // exactly-invariant coordinate, which fd noise then dominates
                let probs = c.softmax_last().mean_axis(0);
                let loss = cross_entropy_indexed(&probs, 0);
                loss.backward();
                let mut grad = a.grad().unwrap();
                grad.extend(b.grad().unwrap());
                grad.extend(bias.grad().unwrap());
                (loss.item(), grad)
            };
            let worst = grad_check(f, &theta, 1e-5).unwrap();
            assert!(worst < 1e-4, "seed {seed}: chain rel err {worst}");

            // norm_rows + pad_repeat_last + slice/stack/index + cross entropy.
            // The fixed weight vector keeps the objective non-degenerate
            // (normalized rows have zero mean, so an unweighted reduction
            // would be constant).
            let x0 = rand_vec(&mut rng, 8);
            let f2 = |th: &[f64]| {
                let t = Tape::new();
                let x = t.leaf(th.to_vec(), &[2, 4]);
                let n = x.norm_rows(1e-5);
                let p = n.pad_repeat_last(2); // 4x4
                let w = t.leaf(vec![0.7, -1.3, 0.4, 2.0], &[4]);
                let row = p.index_axis0(3).mul(&w);
                let stacked = t.stack_rows(&[row.clone(), row.scale(-0.5)]);
                let sliced = stacked.slice_rows(0, 2).reshape(&[2, 4]);
                let probs = sliced.mean_axis(1).softmax_last();
                let loss = cross_entropy_indexed(&probs, 0);
                loss.backward();
                (loss.item(), x.grad().unwrap())
            };
            let worst2 = grad_check(f2, &x0, 1e-5).unwrap();
            assert!(worst2 < 1e-4, "seed {seed}: norm chain rel err {worst2}");

            // attention composite
            let q0 = rand_vec(&mut rng, 6);
            let k0 = rand_vec(&mut rng, 8);
            let v0 = rand_vec(&mut rng, 8);
            let mut theta3 = q0.clone();
            theta3.extend(&k0);
            theta3.extend(&v0);
            let f3 = |th: &[f64]| {
                let t = Tape::new();
                let q = t.leaf(th[0..6].to_vec(), &[3, 2]);
                let k = t.leaf(th[6..14].to_vec(), &[4, 2]);
                let v = t.leaf(th[14..22].to_vec(), &[4, 2]);
                let out = scaled_dot_attention(&q, &k, &v);
                let probs = out.concat_rows(&q).mean_axis(0).softmax_last();
                let loss = cross_entropy_indexed(&probs, 1);
                loss.backward();
                let mut grad = q.grad().unwrap();
                grad.extend(k.grad().unwrap());
                grad.extend(v.grad().unwrap());
                (loss.item(), grad)
            };
            let worst3 = grad_check(f3, &theta3, 1e-5).unwrap();
            assert!(worst3 < 1e-4, "seed {seed}: attention rel err {worst3}");
        }
    }
}
