use std::sync::Arc;

use super::kernels::{self, axis_split, gemm};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::label::{LabelMap, IGNORE};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant linear map applied to the rows of an `n × d` block.
///
/// Used for operators whose structure is fixed during a forward pass (the
/// hypergraph propagation matrix): gradients flow to the block, never into
/// the operator.
pub trait RowOperator: Send + Sync {
    /// Number of rows the operator acts on.
    fn rows(&self) -> usize;
    /// `out = A · x` for `x` of shape `rows × cols`.
    fn apply(&self, x: &[f64], cols: usize, out: &mut [f64]);
    /// `out = Aᵀ · x`.
    fn apply_transpose(&self, x: &[f64], cols: usize, out: &mut [f64]);
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        k: usize,
        cols: Vec<f64>,
    },
    ChannelBias(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    MaxAlong {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        weights: Vec<f64>,
        count: usize,
    },
    RowOps {
        x: Var,
        ops: Vec<Arc<dyn RowOperator>>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    UpsampleBilinear {
        x: Var,
        factor: usize,
    },
}

/// Per output index: the two source indices and the weight of the second,
/// with half-pixel centres and edge clamping.
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the reverse of insertion order
/// is a valid reverse topological order for [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require grad
    /// or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Moves the raw gradient buffer out without copying.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn make(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = self.make(va.shape(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("mul", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = self.make(va.shape(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = self.make(va.shape(), va.data().iter().map(|x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = self.make(va.shape(), va.data().iter().map(|&x| x.max(0.0)).collect());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Relu(a))
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return shape_err("matmul", va.shape(), vb.shape());
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let t = self.make(&[m, n], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    /// Stride-1 cross-correlation of `x: B×C×H×W` with `w: F×C×k×k`, zero
    /// padding `k/2` (so spatial size is preserved). `k` must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 {
            return shape_err("conv2d", vx.shape(), vw.shape());
        }
        let [b, c, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [f, wc, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if wc != c || kh != kw || kh % 2 == 0 {
            return shape_err("conv2d", vx.shape(), vw.shape());
        }
        let k = kh;
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![0.0; b * f * hw];
        let cols = if k == 1 {
            for bi in 0..b {
                let xb = &vx.data()[bi * c * hw..(bi + 1) * c * hw];
                let ob = &mut out[bi * f * hw..(bi + 1) * f * hw];
                gemm(f, c, hw, vw.data(), false, xb, false, ob, 0.0);
            }
            Vec::new()
        } else {
            let mut cols = vec![0.0; b * ckk * hw];
            for bi in 0..b {
                let xb = &vx.data()[bi * c * hw..(bi + 1) * c * hw];
                let cb = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                kernels::im2col(xb, c, h, wd, k, cb);
                let ob = &mut out[bi * f * hw..(bi + 1) * f * hw];
                gemm(f, ckk, hw, vw.data(), false, cb, false, ob, 0.0);
            }
            cols
        };
        let t = self.make(&[b, f, h, wd], out);
        let rg = self.rg(&[x, w]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(t, rg, Op::Conv2d { x, w, k, cols }))
    }

    /// Adds a per-channel bias `b: C` to `x: B×C×…`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.rank() < 2 || vb.numel() != vx.shape()[1] {
            return shape_err("channel_bias", vx.shape(), vb.shape());
        }
        let (outer, c, inner) = axis_split(vx.shape(), 1)?;
        let mut out = vx.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let bias = vb.data()[ch];
                let s = (o * c + ch) * inner;
                out[s..s + inner].iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = self.make(vx.shape(), out);
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, rg, Op::ChannelBias(x, b)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| {
            Error::Contract("concat needs at least one input".into())
        })?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::IndexOutOfRange {
                what: "axis",
                index: axis,
                len: rank,
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == rank
                && (0..rank).all(|d| d == axis || s[d] == first.shape()[d]);
            if !compatible {
                return shape_err("concat", first.shape(), s);
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = self.make(&shape, out);
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, size, inner) = axis_split(vx.shape(), axis)?;
        if len == 0 || start + len > size {
            return Err(Error::IndexOutOfRange {
                what: "slice",
                index: start + len,
                len: size,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let t = self.make(&shape, out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", vx.shape(), axes);
        }
        let data = kernels::permute(vx.data(), vx.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&a| vx.shape()[a]).collect();
        let t = self.make(&shape, data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Maximum along `axis` (differentiable) plus the arg-max, ties to the
    /// lowest index.
    pub fn max_with_index(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let (t, argmax) = self.value(x).max_with_index(axis)?;
        let rg = self.rg(&[x]);
        let v = self.push(
            t,
            rg,
            Op::MaxAlong {
                x,
                axis,
                argmax: argmax.clone(),
            },
        );
        Ok((v, argmax))
    }

    /// Mean over non-ignored pixels of `weight · (−log softmax(logits)[label])`.
    ///
    /// `logits` is `B×C×…` with the class axis at 1; `labels` and `weights`
    /// cover the remaining `B×…` positions. Pixels labeled [`IGNORE`] contribute
    /// nothing to the sum or the count; an all-ignored batch yields 0.
    pub fn masked_weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        weights: &[f64],
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() < 2 {
            return shape_err("cross_entropy", vl.shape(), &[labels.data().len()]);
        }
        let (outer, c, inner) = axis_split(vl.shape(), 1)?;
        let n = outer * inner;
        if labels.data().len() != n || weights.len() != n {
            return shape_err(
                "cross_entropy",
                vl.shape(),
                &[labels.batch(), labels.height(), labels.width()],
            );
        }
        labels.validate(c)?;
        let x = vl.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let p = o * inner + i;
                let y = labels.data()[p];
                if y == IGNORE {
                    continue;
                }
                count += 1;
                let base = o * c * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..c {
                    mx = mx.max(x[base + k * inner]);
                }
                let lse = mx
                    + (0..c)
                        .map(|k| (x[base + k * inner] - mx).exp())
                        .sum::<f64>()
                        .ln();
                total += weights[p] * (lse - x[base + y as usize * inner]);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.data().to_vec(),
                weights: weights.to_vec(),
                count,
            },
        ))
    }

    /// Applies `ops[b]` to block `b` of `x: B×n×d`.
    pub fn row_operators(&mut self, x: Var, ops: Vec<Arc<dyn RowOperator>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || ops.len() != vx.shape()[0] {
            return shape_err("row_operators", vx.shape(), &[ops.len()]);
        }
        let (n, d) = (vx.shape()[1], vx.shape()[2]);
        if let Some(bad) = ops.iter().find(|op| op.rows() != n) {
            return shape_err("row_operators", vx.shape(), &[bad.rows()]);
        }
        let mut out = vec![0.0; vx.numel()];
        for (b, op) in ops.iter().enumerate() {
            op.apply(
                &vx.data()[b * n * d..(b + 1) * n * d],
                d,
                &mut out[b * n * d..(b + 1) * n * d],
            );
        }
        let t = self.make(vx.shape(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::RowOps { x, ops }))
    }

    /// Non-overlapping `factor×factor` average pooling of `B×C×H×W`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 || factor == 0 || vx.shape()[2] % factor != 0 || vx.shape()[3] % factor != 0 {
            return shape_err("avg_pool", vx.shape(), &[factor]);
        }
        let [b, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..h {
                for col in 0..w {
                    dst[(r / factor) * ow + col / factor] += src[r * w + col] * norm;
                }
            }
        }
        let t = self.make(&[b, c, oh, ow], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::AvgPool { x, factor }))
    }

    /// Nearest-neighbour upsampling of `B×C×H×W` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 || factor == 0 {
            return shape_err("upsample", vx.shape(), &[factor]);
        }
        let [b, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..oh {
                for col in 0..ow {
                    dst[r * ow + col] = src[(r / factor) * w + col / factor];
                }
            }
        }
        let t = self.make(&[b, c, oh, ow], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Upsample { x, factor }))
    }

    /// Bilinear upsampling of `B×C×H×W` by an integer factor (half-pixel
    /// centres, clamped at the border).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 || factor == 0 {
            return shape_err("upsample_bilinear", vx.shape(), &[factor]);
        }
        let [b, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (oh, ow) = (h * factor, w * factor);
        let (rt, ct) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(r0, r1, wr)) in rt.iter().enumerate() {
                for (col, &(c0, c1, wc)) in ct.iter().enumerate() {
                    let top = src[r0 * w + c0] * (1.0 - wc) + src[r0 * w + c1] * wc;
                    let bot = src[r1 * w + c0] * (1.0 - wc) + src[r1 * w + c1] * wc;
                    dst[r * ow + col] = top * (1.0 - wr) + bot * wr;
                }
            }
        }
        let t = self.make(&[b, c, oh, ow], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::UpsampleBilinear { x, factor }))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // accumulate into the gradient buffer of `v` if it participates
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Relu(a) => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| gemm(m, n, k, g, false, vb, true, ga, 1.0));
                acc(*b, &mut |gb| gemm(k, m, n, va, true, g, false, gb, 1.0));
            }
            Op::Conv2d { x, w, k, cols } => {
                let sx = nodes[x.0].value.shape();
                let [b, c, h, wd] = [sx[0], sx[1], sx[2], sx[3]];
                let f = nodes[w.0].value.shape()[0];
                let (hw, ckk, k) = (h * wd, c * k * k, *k);
                let (vx, vw) = (val(*x), val(*w));
                acc(*w, &mut |gw| {
                    for bi in 0..b {
                        let gy = &g[bi * f * hw..(bi + 1) * f * hw];
                        let cb = if k == 1 {
                            &vx[bi * c * hw..(bi + 1) * c * hw]
                        } else {
                            &cols[bi * ckk * hw..(bi + 1) * ckk * hw]
                        };
                        gemm(f, hw, ckk, gy, false, cb, true, gw, 1.0);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dcols = vec![0.0; ckk * hw];
                    for bi in 0..b {
                        let gy = &g[bi * f * hw..(bi + 1) * f * hw];
                        let gxb = &mut gx[bi * c * hw..(bi + 1) * c * hw];
                        if k == 1 {
                            gemm(c, f, hw, vw, true, gy, false, gxb, 1.0);
                        } else {
                            gemm(ckk, f, hw, vw, true, gy, false, &mut dcols, 0.0);
                            kernels::col2im_add(&dcols, c, h, wd, k, gxb);
                        }
                    }
                });
            }
            Op::ChannelBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                let shape = node.value.shape();
                let (outer, c, inner) = axis_split(shape, 1).expect("validated in forward");
                acc(*b, &mut |gb| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let s = (o * c + ch) * inner;
                            gb[ch] += g[s..s + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, y)| *a += y);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, size, inner) =
                    axis_split(nodes[x.0].value.shape(), *axis).expect("validated in forward");
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * size + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, y)| *a += y);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = kernels::permute(g, node.value.shape(), &inverse);
                acc(*x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, y)| *a += y));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, size, inner) =
                    axis_split(node.value.shape(), *axis).expect("validated in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |c: usize| (o * size + c) * inner + i;
                            let dot: f64 = (0..size).map(|c| g[at(c)] * y[at(c)]).sum();
                            for c in 0..size {
                                gx[at(c)] += y[at(c)] * (g[at(c)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let s = g[0] / nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::MaxAlong { x, axis, argmax } => {
                let (outer, size, inner) =
                    axis_split(nodes[x.0].value.shape(), *axis).expect("validated in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let p = o * inner + i;
                            gx[(o * size + argmax[p]) * inner + i] += g[p];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let x = val(*logits);
                let (outer, c, inner) =
                    axis_split(nodes[logits.0].value.shape(), 1).expect("validated in forward");
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gx| {
                    let mut probs = vec![0.0; c];
                    for o in 0..outer {
                        for i in 0..inner {
                            let p = o * inner + i;
                            let y = labels[p];
                            if y == IGNORE || weights[p] == 0.0 {
                                continue;
                            }
                            let base = o * c * inner + i;
                            let mut mx = f64::NEG_INFINITY;
                            for k in 0..c {
                                mx = mx.max(x[base + k * inner]);
                            }
                            let mut sum = 0.0;
                            for k in 0..c {
                                probs[k] = (x[base + k * inner] - mx).exp();
                                sum += probs[k];
                            }
                            let s = scale * weights[p];
                            for k in 0..c {
                                let target = if k == y as usize { 1.0 } else { 0.0 };
                                gx[base + k * inner] += s * (probs[k] / sum - target);
                            }
                        }
                    }
                });
            }
            Op::RowOps { x, ops } => {
                let shape = node.value.shape();
                let (n, d) = (shape[1], shape[2]);
                acc(*x, &mut |gx| {
                    let mut tmp = vec![0.0; n * d];
                    for (b, op) in ops.iter().enumerate() {
                        op.apply_transpose(&g[b * n * d..(b + 1) * n * d], d, &mut tmp);
                        gx[b * n * d..(b + 1) * n * d]
                            .iter_mut()
                            .zip(&tmp)
                            .for_each(|(a, y)| *a += y);
                    }
                });
            }
            Op::AvgPool { x, factor } => {
                let sx = nodes[x.0].value.shape();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let ow = w / factor;
                let norm = 1.0 / (factor * factor) as f64;
                let (oh, f) = (h / factor, *factor);
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for r in 0..h {
                            for col in 0..w {
                                dst[r * w + col] += src[(r / f) * ow + col / f] * norm;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let sx = nodes[x.0].value.shape();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow, f) = (h * factor, w * factor, *factor);
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for r in 0..oh {
                            for col in 0..ow {
                                dst[(r / f) * w + col / f] += src[r * ow + col];
                            }
                        }
                    }
                });
            }
            Op::UpsampleBilinear { x, factor } => {
                let sx = nodes[x.0].value.shape();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let ow = w * factor;
                let (rt, ct) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        let src = &g[p * rt.len() * ow..(p + 1) * rt.len() * ow];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for (r, &(r0, r1, wr)) in rt.iter().enumerate() {
                            for (col, &(c0, c1, wc)) in ct.iter().enumerate() {
                                let gv = src[r * ow + col];
                                dst[r0 * w + c0] += gv * (1.0 - wr) * (1.0 - wc);
                                dst[r0 * w + c1] += gv * (1.0 - wr) * wc;
                                dst[r1 * w + c0] += gv * wr * (1.0 - wc);
                                dst[r1 * w + c1] += gv * wr * wc;
                            }
                        }
                    }
                });
            }
        }
    }
}
