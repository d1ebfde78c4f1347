//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes one
//! node holding its forward value and whatever it needs for the backward
//! pass, so arena order is already a topological order. A graph is built
//! fresh for every training step and dropped afterwards.
//!
//! ```
//! use vislang::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One packed sequence inside an attention call: rows `start..start+len`
/// attend to each other, restricted to keys where `key_mask` is true.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub key_mask: Vec<bool>,
}

impl Segment {
    pub fn full(start: usize, len: usize) -> Self {
        Segment {
            start,
            len,
            key_mask: vec![true; len],
        }
    }
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    StraightThrough {
        input: Var,
        entries: Var,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        src: Var,
        fill: Var,
        positions: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Stop-gradient barrier: same value, no gradient flows to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul shapes {sa:?} and {sb:?} do not agree")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s), rg)
    }

    /// Adds a length-`c` vector to every trailing-axis row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(Error::dim(format!(
                "add_row: row of shape {:?} against {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), rg)
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K0 * (x + GELU_K1 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Per-row layer normalisation with affine `gain`/`bias` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} against input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let n = t.cols();
        let b = t.rows();
        if targets.len() != b {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(n).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} labels for {} logits",
                labels.len(),
                z.len()
            )));
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Vector-quantizer output with a straight-through gradient.
    ///
    /// The forward value of row `i` is exactly `entries[indices[i]]`. The
    /// backward pass behaves like `input + sg[entries[indices] - input]`:
    /// the upstream gradient reaches `input` unchanged and `entries` gets zero.
    pub fn straight_through(&mut self, input: Var, entries: Var, indices: &[usize]) -> Result<Var> {
        let (xi, e) = (self.value(input), self.value(entries));
        if xi.rank() != 2 || e.rank() != 2 || xi.cols() != e.cols() {
            return Err(Error::dim(format!(
                "straight_through: input {:?} against entries {:?}",
                xi.shape(),
                e.shape()
            )));
        }
        if indices.len() != xi.rows() {
            return Err(Error::contract(format!(
                "stale assignment: {} indices for {} feature rows",
                indices.len(),
                xi.rows()
            )));
        }
        let k = e.rows();
        let c = e.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &j in indices {
            if j >= k {
                return Err(Error::Index { index: j, len: k });
            }
            out.extend_from_slice(e.row(j));
        }
        let shape = xi.shape().to_vec();
        let rg = self.rg(input) || self.rg(entries);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::StraightThrough { input, entries },
            rg,
        ))
    }

    /// Rows of a 2-D `src` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 {
            return Err(Error::dim(format!("gather_rows on shape {:?}", t.shape())));
        }
        let (n, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `src` with the listed rows overwritten by the vector `fill`.
    pub fn replace_rows(&mut self, src: Var, positions: &[usize], fill: Var) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        if self.value(fill).len() != c {
            return Err(Error::dim(format!(
                "replace_rows: fill {:?} against rows of width {c}",
                self.shape(fill)
            )));
        }
        let n = t.rows();
        let mut out = t.data().to_vec();
        let f = self.value(fill).data();
        for &p in positions {
            if p >= n {
                return Err(Error::Index { index: p, len: n });
            }
            out[p * c..(p + 1) * c].copy_from_slice(f);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(src) || self.rg(fill);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ReplaceRows {
                src,
                fill,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != c {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} does not have {c} columns",
                    t.shape()
                )));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let n = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        let mut rg = false;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != n {
                return Err(Error::dim(format!(
                    "concat_cols: {:?} does not have {n} rows",
                    t.shape()
                )));
            }
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim(format!("transpose of shape {:?}", t.shape())));
        }
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let out = transpose_data(t.data(), n, m);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,k,k]` weights and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(Error::dim(format!("conv2d: input {si:?} with weight {sw:?}")));
        }
        if self.value(bias).len() != sw[0] {
            return Err(Error::dim(format!(
                "conv2d: bias {:?} for {} output channels",
                self.shape(bias),
                sw[0]
            )));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::dim(format!("conv2d: kernel {kernel} does not fit input {si:?}")));
        }
        let h_out = (h + 2 * pad - kernel) / stride + 1;
        let w_out = (w + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kernel,
            stride,
            pad,
            h_out,
            w_out,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let p = h_out * w_out;
        let ck = c_in * kernel * kernel;
        let mut out = vec![0.0; c_out * p];
        let b = self.value(bias).data();
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(c_out, ck, p, self.value(weight).data(), false, &cols, false, 1.0, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, h_out, w_out], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 on a `[C,H,W]` input with even H and W.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dim(format!("max_pool2 needs [C, even H, even W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if best == usize::MAX || x[idx] > bv {
                                best = idx;
                                bv = x[idx];
                            }
                        }
                    }
                    let o = ch * ho * wo + oy * wo + ox;
                    out[o] = bv;
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N×c]`; each segment is an independent sequence.
    /// Rows are split into `heads` contiguous column blocks of width `c/heads`,
    /// logits are scaled by `1/sqrt(c/heads)` and masked keys get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (n, c) = {
            let s = self.shape(q);
            if s.len() != 2 {
                return Err(Error::dim(format!("attention input of shape {s:?}")));
            }
            (s[0], s[1])
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim(format!("width {c} not divisible by {heads} heads")));
        }
        check_segments(segments, n)?;
        let dh = c / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * c];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let p = head_probs(qd, kd, c, seg, h * dh, dh);
                for i in 0..seg.len {
                    let orow = &mut out[(seg.start + i) * c + h * dh..(seg.start + i) * c + (h + 1) * dh];
                    for j in 0..seg.len {
                        let pij = p[i * seg.len + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(seg.start + j) * c + h * dh..(seg.start + j) * c + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Attention weights cached by an attention node, one `len×len` matrix
    /// per (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Hash of every piecewise branch taken (ReLU signs, max-pool winners).
    ///
    /// Finite differences are only meaningful between evaluations that share
    /// a signature.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`. Gradients of leaves created with
    /// `requires_grad` are added to whatever they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::scalar(1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim(format!(
                "seed of shape {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        if !self.rg(out) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed.into_data());
        let mut leaf_grads = Vec::new();
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                leaf_grads.push((idx, g));
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, bv.data(), true, 0.0, &mut da);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, &g, false, 0.0, &mut db);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    send(*a, g.clone());
                }
                send(*b, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    send(*a, g.clone());
                }
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    let c = self.value(*row).len();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*row, dr);
                }
                send(*a, g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0]; n]);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| {
                        let t = (GELU_K0 * (x + GELU_K1 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_K0 * (1.0 + 3.0 * GELU_K1 * x * x);
                        d * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                send(*a, dx);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; c];
                    for (r, ((dxr, gr), hr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dxr[j] = inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).cols();
                let b = targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= 1.0;
                }
                let s = g[0] / b;
                d.iter_mut().for_each(|x| *x *= s);
                send(*logits, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits).data();
                let s = g[0] / labels.len() as f64;
                send(
                    *logits,
                    z.iter().zip(labels).map(|(&z, &y)| (sigmoid(z) - y) * s).collect(),
                );
            }
            Op::StraightThrough { input, entries } => {
                if self.rg(*entries) {
                    send(*entries, vec![0.0; self.value(*entries).len()]);
                }
                send(*input, g);
            }
            Op::GatherRows { src, idx } => {
                let t = self.value(*src);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (gr, &i) in g.chunks(c).zip(idx) {
                    for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                        *a += b;
                    }
                }
                send(*src, d);
            }
            Op::ReplaceRows { src, fill, positions } => {
                let c = self.value(*fill).len();
                if self.rg(*fill) {
                    let mut df = vec![0.0; c];
                    for &p in positions {
                        for (a, b) in df.iter_mut().zip(&g[p * c..(p + 1) * c]) {
                            *a += b;
                        }
                    }
                    send(*fill, df);
                }
                if self.rg(*src) {
                    let mut d = g;
                    for &p in positions {
                        d[p * c..(p + 1) * c].fill(0.0);
                    }
                    send(*src, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        send(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        send(p, d);
                    }
                    off += w;
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose_data(&g, s[0], s[1]));
            }
            Op::Reshape(a) => send(*a, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let p = geom.h_out * geom.w_out;
                let ck = geom.c_in * geom.kernel * geom.kernel;
                if self.rg(*bias) {
                    send(*bias, g.chunks(p).map(|r| r.iter().sum()).collect());
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; geom.c_out * ck];
                    gemm(geom.c_out, p, ck, &g, false, cols, true, 0.0, &mut dw);
                    send(*weight, dw);
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; ck * p];
                    gemm(ck, geom.c_out, p, self.value(*weight).data(), true, &g, false, 0.0, &mut dcols);
                    send(*input, col2im(&dcols, geom));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    d[i] += gv;
                }
                send(*input, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let c = node.value.cols();
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut pi = 0;
                for seg in segments {
                    let len = seg.len;
                    let mut ds = vec![0.0; len * len];
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let col = |r: usize| (seg.start + r) * c + h * dh;
                        for i in 0..len {
                            let go = &g[col(i)..col(i) + dh];
                            let mut row_dot = 0.0;
                            for j in 0..len {
                                let pij = p[i * len + j];
                                if pij == 0.0 {
                                    ds[i * len + j] = 0.0;
                                    continue;
                                }
                                let vrow = &vd[col(j)..col(j) + dh];
                                let dp: f64 = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                ds[i * len + j] = dp;
                                row_dot += pij * dp;
                                for (dvv, &gg) in dv[col(j)..col(j) + dh].iter_mut().zip(go) {
                                    *dvv += pij * gg;
                                }
                            }
                            for j in 0..len {
                                let pij = p[i * len + j];
                                ds[i * len + j] = pij * (ds[i * len + j] - row_dot) * scale;
                            }
                        }
                        for i in 0..len {
                            for j in 0..len {
                                let s = ds[i * len + j];
                                if s == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[col(i) + t] += s * kd[col(j) + t];
                                    dk[col(j) + t] += s * qd[col(i) + t];
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }
}

fn check_segments(segments: &[Segment], n: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 || s.key_mask.len() != s.len {
            return Err(Error::dim(format!(
                "attention segments must tile rows 0..{n} in order (bad segment at {})",
                s.start
            )));
        }
        if !s.key_mask.iter().any(|&m| m) {
            return Err(Error::contract(format!("segment at row {} has no valid key", s.start)));
        }
        next += s.len;
    }
    if next != n {
        return Err(Error::dim(format!("attention segments cover {next} of {n} rows")));
    }
    Ok(())
}

/// Attention weights for one head of one segment, row-major `len×len`.
fn head_probs(q: &[f64], k: &[f64], c: usize, seg: &Segment, off: usize, dh: usize) -> Vec<f64> {
    let len = seg.len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; len * len];
    for i in 0..len {
        let qi = &q[(seg.start + i) * c + off..(seg.start + i) * c + off + dh];
        let row = &mut p[i * len..(i + 1) * len];
        let mut max = f64::NEG_INFINITY;
        for j in 0..len {
            if !seg.key_mask[j] {
                continue;
            }
            let kj = &k[(seg.start + j) * c + off..(seg.start + j) * c + off + dh];
            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            row[j] = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for j in 0..len {
            if seg.key_mask[j] {
                row[j] = (row[j] - max).exp();
                z += row[j];
            }
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.kernel * g.kernel * p];
    for c in 0..g.c_in {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.w_out + ox] = x[c * g.h * g.w + iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        x[c * g.h * g.w + iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
    x
}

fn transpose_data(d: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
