//! The compute tape: forward ops and reverse-mode backward.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    /// Elementwise add; `b` may be a trailing-shape broadcast of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    Transpose { a: Var, ax0: usize, ax1: usize },
    Reshape { a: Var },
    /// Row gather over the flattened leading dims: `a` viewed as [rows, width].
    PickRows { a: Var, ids: Vec<usize>, width: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Dropout { a: Var, mask: Vec<f32> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    ExpandLeading { a: Var, reps: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations. Nodes are appended in execution order, so the tape
/// order is a topological order and backward is a single reverse sweep that
/// visits each node exactly once. Gradients accumulate additively across
/// fan-out.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Work threshold (multiply-accumulates) below which matmul stays serial.
const PAR_MACS: usize = 1 << 15;

fn matmul_block(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                acc[j] += av * brow[j] as f64;
            }
        }
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] = acc[j] as f32;
        }
    }
}

/// Batched matmul kernel: O(batch*m*k*n) with a 64-bit accumulator row.
/// Rows are independent, so the parallel path is bit-identical to the
/// serial one regardless of thread count.
fn matmul_batched(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * n];
    if batch * m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each_init(
            || vec![0.0f64; n],
            |acc, (row, crow)| {
                let bi = row / m;
                let i = row % m;
                acc.iter_mut().for_each(|v| *v = 0.0);
                let arow = &a[bi * m * k + i * k..bi * m * k + (i + 1) * k];
                let bmat = &b[bi * k * n..(bi + 1) * k * n];
                for (p, &av) in arow.iter().enumerate() {
                    let av = av as f64;
                    let brow = &bmat[p * n..(p + 1) * n];
                    for j in 0..n {
                        acc[j] += av * brow[j] as f64;
                    }
                }
                for j in 0..n {
                    crow[j] = acc[j] as f32;
                }
            },
        );
    } else {
        for bi in 0..batch {
            matmul_block(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    out
}

/// Swap two axes by strided copy.
fn transpose_copy(data: &[f32], shape: &[usize], ax0: usize, ax1: usize) -> (Vec<usize>, Vec<f32>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // Input strides in output index order.
    let mut src_strides = in_strides.clone();
    src_strides.swap(ax0, ax1);
    let numel = data.len();
    let mut out = vec![0.0f32; numel];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for d in 0..rank {
            let q = rem / out_strides[d];
            rem %= out_strides[d];
            src += q * src_strides[d];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

fn gelu_value(x: f64) -> f64 {
    const C0: f64 = 0.7978845608028654; // sqrt(2/pi)
    const C1: f64 = 0.044715;
    let u = C0 * (x + C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C0: f64 = 0.7978845608028654;
    const C1: f64 = 0.044715;
    let u = C0 * (x + C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if any was recorded.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward records a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    /// Insert constant data that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                msg: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let out = matmul_batched(&self.nodes[a.0].data, &self.nodes[b.0].data, batch, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Matmul { a, b, batch, m, k, n }, ng))
    }

    /// Elementwise add. `b` may have a shape that is a suffix of `a`'s, in
    /// which case it broadcasts over the leading dims (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !suffix_ok {
            return Err(Error::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let bn = self.numel(b);
        let mut out = self.nodes[a.0].data.clone();
        {
            let bd = &self.nodes[b.0].data;
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[i % bn];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Scale { a, c }, ng)
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::Dimension {
                op: "transpose",
                msg: format!("axes ({ax0},{ax1}) out of range for shape {:?}", shape),
            });
        }
        let (out_shape, out) = transpose_copy(&self.nodes[a.0].data, &shape, ax0, ax1);
        let ng = self.needs(a);
        Ok(self.push(out_shape, out, Op::Transpose { a, ax0, ax1 }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {:?}", self.shape(a), shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(shape, data, Op::Reshape { a }, ng))
    }

    /// Gather rows of `a` viewed as [rows, width] where width is the last
    /// dim. Serves both embedding lookup (table [V,d] + token ids) and
    /// mask-position extraction (hidden [b*len,d] + flat positions).
    pub fn pick_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::Dimension { op: "pick_rows", msg: "scalar input".into() });
        }
        let width = shape[shape.len() - 1];
        let rows = self.numel(a) / width;
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange { what: "row", index: id, bound: rows });
            }
            out.extend_from_slice(&self.nodes[a.0].data[id * width..(id + 1) * width]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::PickRows { a, ids: ids.to_vec(), width },
            ng,
        ))
    }

    /// Layer normalization over the last axis with affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::Dimension { op: "layer_norm", msg: "scalar input".into() })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let lanes = self.numel(x) / d;
        let mut out = vec![0.0f32; self.numel(x)];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for l in 0..lanes {
                let lane = &xd[l * d..(l + 1) * d];
                let mean: f64 = lane.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var: f64 =
                    lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps as f64).sqrt();
                for i in 0..d {
                    let xhat = (lane[i] as f64 - mean) * rstd;
                    out[l * d + i] = (xhat * gd[i] as f64 + bd[i] as f64) as f32;
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> =
            self.nodes[a.0].data.iter().map(|&x| gelu_value(x as f64) as f32).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Op::Gelu { a }, ng)
    }

    /// Numerically stabilized softmax along `axis` (max subtraction, 64-bit
    /// accumulation of the normalizer).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                msg: format!("axis {axis} invalid for shape {:?}", shape),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0f32; self.numel(a)];
        {
            let xd = &self.nodes[a.0].data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(xd[base + j * inner]);
                    }
                    let mut sum = 0.0f64;
                    for j in 0..len {
                        sum += ((xd[base + j * inner] - mx) as f64).exp();
                    }
                    for j in 0..len {
                        out[base + j * inner] =
                            (((xd[base + j * inner] - mx) as f64).exp() / sum) as f32;
                    }
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, ng))
    }

    /// Mean over the batch of -log softmax(logits)[target]. `logits` must be
    /// 2-D [batch, classes]; the output is a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                msg: format!("expected 2-D logits, got {:?}", shape),
            });
        }
        let (b, v) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                msg: format!("{} targets for batch {}", targets.len(), b),
            });
        }
        let mut total = 0.0f64;
        {
            let xd = &self.nodes[logits.0].data;
            for (row, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::IndexOutOfRange { what: "target", index: t, bound: v });
                }
                let lane = &xd[row * v..(row + 1) * v];
                let mx = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse: f64 = lane.iter().map(|&x| ((x as f64) - mx).exp()).sum::<f64>().ln() + mx;
                total += lse - lane[t] as f64;
            }
        }
        let loss = (total / b as f64) as f32;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            ng,
        ))
    }

    /// Inverted-scaling dropout; train-only (callers skip it in eval mode).
    pub fn dropout(&mut self, a: Var, p: f32, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0,1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.numel(a))
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::Dropout { a, mask }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension { op: "concat", msg: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension {
                op: "concat",
                msg: format!("axis {axis} out of range for {:?}", first),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let plen = self.shape(p)[axis];
            let pd = &self.nodes[p.0].data;
            for o in 0..outer {
                let src = &pd[o * plen * inner..(o + 1) * plen * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                out[dst_base..dst_base + plen * inner].copy_from_slice(src);
            }
            offset += plen;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "slice",
                msg: format!("[{start}..{}] on axis {axis} of {:?}", start + len, shape),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        {
            let xd = &self.nodes[a.0].data;
            for o in 0..outer {
                let src = o * full * inner + start * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start, len }, ng))
    }

    /// Tile `a` along a new leading axis: [..] -> [reps, ..].
    pub fn expand_leading(&mut self, a: Var, reps: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let n = self.numel(a);
        let mut out = Vec::with_capacity(n * reps);
        for _ in 0..reps {
            out.extend_from_slice(&self.nodes[a.0].data);
        }
        let mut out_shape = vec![reps];
        out_shape.extend_from_slice(&shape);
        let ng = self.needs(a);
        self.push(out_shape, out, Op::ExpandLeading { a, reps }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s as f32], Op::SumAll { a }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![(s / n) as f32], Op::MeanAll { a }, ng)
    }

    /// Reverse sweep from `loss` (must be scalar). Populates gradients for
    /// every node with `needs_grad`, including leaves inserted with
    /// `requires_grad` tensors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue, // not reachable from the loss
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contrib: &[f32]) {
        match &mut grads[v.0] {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, batch, m, k, n } => {
                // dA = g . B^T,  dB = A^T . g  (batched)
                if self.needs(a) {
                    let bt = {
                        let (_, t) = transposed_last_two(&self.nodes[b.0].data, batch, k, n);
                        t
                    };
                    let da = matmul_batched(g, &bt, batch, m, n, k);
                    Self::accumulate(grads, a, &da);
                }
                if self.needs(b) {
                    let at = {
                        let (_, t) = transposed_last_two(&self.nodes[a.0].data, batch, m, k);
                        t
                    };
                    let db = matmul_batched(&at, g, batch, k, m, n);
                    Self::accumulate(grads, b, &db);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g);
                }
                if self.needs(b) {
                    let bn = self.numel(b);
                    if bn == g.len() {
                        Self::accumulate(grads, b, g);
                    } else {
                        // Reduce the broadcast: sum over leading tiles in f64.
                        let mut acc = vec![0.0f64; bn];
                        for (i, &gv) in g.iter().enumerate() {
                            acc[i % bn] += gv as f64;
                        }
                        let db: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
                        Self::accumulate(grads, b, &db);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<f32> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                    Self::accumulate(grads, a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f32> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                    Self::accumulate(grads, b, &db);
                }
            }
            &Op::Scale { a, c } => {
                if self.needs(a) {
                    let da: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::Transpose { a, ax0, ax1 } => {
                if self.needs(a) {
                    let (_, da) = transpose_copy(g, &node.shape, ax0, ax1);
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::Reshape { a } => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g);
                }
            }
            Op::PickRows { a, ids, width } => {
                if self.needs(*a) {
                    let mut da = vec![0.0f32; self.numel(*a)];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * width..(row + 1) * width];
                        let dst = &mut da[id * width..(id + 1) * width];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *node.shape.last().unwrap();
                let lanes = node.data.len() / d;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let mut dx = vec![0.0f32; xd.len()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for l in 0..lanes {
                    let lane = &xd[l * d..(l + 1) * d];
                    let glane = &g[l * d..(l + 1) * d];
                    let mean: f64 = lane.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var: f64 =
                        lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps as f64).sqrt();
                    let mut mean_gg = 0.0f64;
                    let mut mean_ggx = 0.0f64;
                    for i in 0..d {
                        let xhat = (lane[i] as f64 - mean) * rstd;
                        let gg = glane[i] as f64 * gd[i] as f64;
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                        dgamma[i] += glane[i] as f64 * xhat;
                        dbeta[i] += glane[i] as f64;
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for i in 0..d {
                        let xhat = (lane[i] as f64 - mean) * rstd;
                        let gg = glane[i] as f64 * gd[i] as f64;
                        dx[l * d + i] = (rstd * (gg - mean_gg - xhat * mean_ggx)) as f32;
                    }
                }
                if self.needs(x) {
                    Self::accumulate(grads, x, &dx);
                }
                if self.needs(gamma) {
                    let dg: Vec<f32> = dgamma.into_iter().map(|v| v as f32).collect();
                    Self::accumulate(grads, gamma, &dg);
                }
                if self.needs(beta) {
                    let db: Vec<f32> = dbeta.into_iter().map(|v| v as f32).collect();
                    Self::accumulate(grads, beta, &db);
                }
            }
            &Op::Gelu { a } => {
                if self.needs(a) {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| (gv as f64 * gelu_deriv(x as f64)) as f32)
                        .collect();
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::Softmax { a, axis } => {
                if self.needs(a) {
                    let shape = &node.shape;
                    let len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let y = &node.data;
                    let mut da = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0f64;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += y[idx] as f64 * g[idx] as f64;
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                da[idx] = (y[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                            }
                        }
                    }
                    Self::accumulate(grads, a, &da);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let shape = self.shape(*logits);
                    let (b, v) = (shape[0], shape[1]);
                    let xd = &self.nodes[logits.0].data;
                    let scale = g[0] as f64 / b as f64;
                    let mut da = vec![0.0f32; xd.len()];
                    for (row, &t) in targets.iter().enumerate() {
                        let lane = &xd[row * v..(row + 1) * v];
                        let mx = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                        let sum: f64 = lane.iter().map(|&x| ((x as f64) - mx).exp()).sum();
                        for j in 0..v {
                            let p = ((lane[j] as f64) - mx).exp() / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            da[row * v + j] = ((p - onehot) * scale) as f32;
                        }
                    }
                    Self::accumulate(grads, *logits, &da);
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let da: Vec<f32> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let plen = self.shape(p)[axis];
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; self.numel(p)];
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * plen * inner;
                            dp[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        Self::accumulate(grads, p, &dp);
                    }
                    offset += plen;
                }
            }
            &Op::Slice { a, axis, start, len } => {
                if self.needs(a) {
                    let in_shape = self.shape(a);
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let outer: usize = in_shape[..axis].iter().product();
                    let full = in_shape[axis];
                    let mut da = vec![0.0f32; self.numel(a)];
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::ExpandLeading { a, reps } => {
                if self.needs(a) {
                    let n = self.numel(a);
                    let mut acc = vec![0.0f64; n];
                    for r in 0..reps {
                        for i in 0..n {
                            acc[i] += g[r * n + i] as f64;
                        }
                    }
                    let da: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::SumAll { a } => {
                if self.needs(a) {
                    let da = vec![g[0]; self.numel(a)];
                    Self::accumulate(grads, a, &da);
                }
            }
            &Op::MeanAll { a } => {
                if self.needs(a) {
                    let da = vec![g[0] / self.numel(a) as f32; self.numel(a)];
                    Self::accumulate(grads, a, &da);
                }
            }
        }
        Ok(())
    }
}

/// Transpose the last two dims of a batched matrix.
fn transposed_last_two(data: &[f32], batch: usize, r: usize, c: usize) -> (Vec<usize>, Vec<f32>) {
    let mut out = vec![0.0f32; data.len()];
    for bi in 0..batch {
        let src = &data[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    (vec![batch, c, r], out)
}
