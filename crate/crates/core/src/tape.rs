//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as an arena of nodes; [`Tape::backward`]
//! replays the recorded operations in exact reverse order and accumulates
//! gradients into every leaf that requested them. Tapes are rebuilt per
//! forward pass and never shared between threads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    /// a[m,k] @ b[k,n]
    MatMul { a: NodeId, b: NodeId },
    /// Cross-correlation of x[N,Ci,H,W] with k[Co,Ci,kh,kw].
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: usize,
    },
    /// x[B,F] + b[F], or x[N,C,H,W] + b[C] broadcast over the channel axis.
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    /// Non-overlapping max pooling; `argmax` caches the winning flat input
    /// index per output cell (first occurrence on ties).
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    Reshape { x: NodeId },
    /// Row-wise log-softmax over [B,C].
    LogSoftmax { x: NodeId },
    /// Mean over the batch of -log_softmax(z)[i, y_i].
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Row-wise (z - mean) / (population_std + eps).
    RowStandardize { x: NodeId, eps: T },
    Exp { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScaleConst { x: NodeId, c: T },
    /// [B,C] -> [B]
    RowSum { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// The single value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let n = self.node(id);
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = self.node(id);
        Tensor::from_vec_unchecked(n.shape.clone(), n.data.clone())
    }

    /// Gradient buffer of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> NodeId {
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!(
                "matmul requires [m,k] x [k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d requires input [N,C,H,W] and kernel [Co,Ci,kh,kw], got {sx:?} and {sk:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kci != ci {
            return Err(Error::dimension(format!(
                "conv2d channel mismatch: input {sx:?} vs kernel {sk:?}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![T::zero(); n * co * oh * ow];
        {
            let xd = self.value(x);
            let kd = self.value(k);
            for ni in 0..n {
                for coi in 0..co {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = T::zero();
                            for cii in 0..ci {
                                for khi in 0..kh {
                                    let ih = (ohi * stride + khi) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kwi in 0..kw {
                                        let iw = (owi * stride + kwi) as isize - padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let xi = ((ni * ci + cii) * h + ih as usize) * w
                                            + iw as usize;
                                        let ki = ((coi * ci + cii) * kh + khi) * kw + kwi;
                                        acc = acc + xd[xi] * kd[ki];
                                    }
                                }
                            }
                            out[((ni * co + coi) * oh + ohi) * ow + owi] = acc;
                        }
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad || self.node(k).requires_grad;
        Ok(self.push(
            out,
            vec![n, co, oh, ow],
            rg,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
        ))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sb.len() == 1
            && match sx.len() {
                2 => sb[0] == sx[1],
                4 => sb[0] == sx[1],
                _ => false,
            };
        if !ok {
            return Err(Error::dimension(format!(
                "add_bias requires [B,F]+[F] or [N,C,H,W]+[C], got {sx:?} + {sb:?}"
            )));
        }
        let mut out = self.value(x).to_vec();
        {
            let bd = self.value(b);
            if sx.len() == 2 {
                let f = sx[1];
                for (i, v) in out.iter_mut().enumerate() {
                    *v = *v + bd[i % f];
                }
            } else {
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                for (i, v) in out.iter_mut().enumerate() {
                    *v = *v + bd[(i / hw) % c];
                }
            }
        }
        let rg = self.node(x).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, sx, rg, Op::AddBias { x, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(out, shape, rg, Op::Relu { x })
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dimension(format!(
                "maxpool2d requires [N,C,H,W], got {sx:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if window == 0 || window > h || window > w {
            return Err(Error::dimension(format!(
                "maxpool2d window {window} invalid for input {h}x{w}"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        {
            let xd = self.value(x);
            for ni in 0..n {
                for cc in 0..c {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best_idx =
                                ((ni * c + cc) * h + ohi * window) * w + owi * window;
                            let mut best = xd[best_idx];
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx = ((ni * c + cc) * h + ohi * window + dy) * w
                                        + owi * window
                                        + dx;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx);
                        }
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![n, c, oh, ow], rg, Op::MaxPool2d { x, argmax }))
    }

    /// Collapse all non-batch axes: [B, d1, d2, ...] -> [B, d1*d2*...].
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::dimension("flatten requires rank >= 1".to_string()));
        }
        let b = sx[0];
        let rest: usize = sx[1..].iter().product();
        self.reshape(x, vec![b, rest.max(1)])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] < 2 {
            return Err(Error::dimension(format!(
                "log_softmax requires [B,C] with C >= 2, got {sx:?}"
            )));
        }
        let out = kernels::log_softmax_rows(self.value(x), sx[0], sx[1]);
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, sx, rg, Op::LogSoftmax { x }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[1] < 2 {
            return Err(Error::dimension(format!(
                "cross_entropy requires logits [B,C] with C >= 2, got {sx:?}"
            )));
        }
        let (b, c) = (sx[0], sx[1]);
        if labels.len() != b {
            return Err(Error::dimension(format!(
                "cross_entropy got {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let loss = kernels::cross_entropy_rows(self.value(logits), b, c, labels);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn row_standardize(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] < 2 {
            return Err(Error::dimension(format!(
                "row_standardize requires [B,C] with C >= 2, got {sx:?}"
            )));
        }
        let out = kernels::standardize_rows(self.value(x), sx[0], sx[1], eps);
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, sx, rg, Op::RowStandardize { x, eps }))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out: Vec<T> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(out, shape, rg, Op::Exp { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dimension(format!(
                "{name} requires equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, sa, rg, op(a, b)))
    }

    pub fn scale_const(&mut self, x: NodeId, c: T) -> NodeId {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(out, shape, rg, Op::ScaleConst { x, c })
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dimension(format!(
                "row_sum requires [B,C], got {sx:?}"
            )));
        }
        let (b, c) = (sx[0], sx[1]);
        let xd = self.value(x);
        let out: Vec<T> = (0..b)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..c {
                    acc = acc + xd[i * c + j];
                }
                acc
            })
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(out, vec![b], rg, Op::RowSum { x }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        let rg = self.node(x).requires_grad;
        self.push(vec![acc], vec![1], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let mut acc = T::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        let mean = acc / T::from_f64(n as f64);
        let rg = self.node(x).requires_grad;
        self.push(vec![mean], vec![1], rg, Op::MeanAll { x })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Every `requires_grad` node
    /// reachable from `loss` ends up with a populated gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on empty tape"));
        }
        let n = self.node(loss);
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = self.grads[id.0]
            .get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].data.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &[T]) {
        // The borrow checker forbids holding node refs while accumulating, so
        // each arm computes its deltas into fresh buffers first.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                // da = g . b^T
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // db = a^T . g
                let mut db = vec![T::zero(); k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for i in 0..m {
                            acc = acc + ad[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let (x, k, stride, padding) = (*x, *k, *stride, *padding);
                let sx = self.shape(x).to_vec();
                let sk = self.shape(k).to_vec();
                let so = self.nodes[idx].shape.clone();
                let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                let (oh, ow) = (so[2], so[3]);
                let xd = self.nodes[x.0].data.clone();
                let kd = self.nodes[k.0].data.clone();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                for ni in 0..n {
                    for coi in 0..co {
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let go = g[((ni * co + coi) * oh + ohi) * ow + owi];
                                for cii in 0..ci {
                                    for khi in 0..kh {
                                        let ih = (ohi * stride + khi) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for kwi in 0..kw {
                                            let iw =
                                                (owi * stride + kwi) as isize - padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let xi = ((ni * ci + cii) * h + ih as usize) * w
                                                + iw as usize;
                                            let ki = ((coi * ci + cii) * kh + khi) * kw + kwi;
                                            dx[xi] = dx[xi] + go * kd[ki];
                                            dk[ki] = dk[ki] + go * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(k, &dk);
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let sx = self.shape(x).to_vec();
                let blen = self.nodes[b.0].data.len();
                let mut db = vec![T::zero(); blen];
                if sx.len() == 2 {
                    let f = sx[1];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % f] = db[i % f] + gv;
                    }
                } else {
                    let (c, hw) = (sx[1], sx[2] * sx[3]);
                    for (i, &gv) in g.iter().enumerate() {
                        let ci = (i / hw) % c;
                        db[ci] = db[ci] + gv;
                    }
                }
                self.accumulate(x, g);
                self.accumulate(b, &db);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                for (o, &xi) in argmax.iter().enumerate() {
                    dx[xi] = dx[xi] + g[o];
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::LogSoftmax { x } => {
                let x = *x;
                let so = self.nodes[idx].shape.clone();
                let (b, c) = (so[0], so[1]);
                let y = &self.nodes[idx].data;
                // dx_i = g_i - exp(y_i) * sum_j g_j (per row)
                let mut dx = vec![T::zero(); b * c];
                for r in 0..b {
                    let mut gsum = T::zero();
                    for j in 0..c {
                        gsum = gsum + g[r * c + j];
                    }
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let sl = self.shape(logits).to_vec();
                let (b, c) = (sl[0], sl[1]);
                let ld = self.nodes[logits.0].data.clone();
                let ls = kernels::log_softmax_rows(&ld, b, c);
                let inv_b = T::one() / T::from_f64(b as f64);
                let mut dx = vec![T::zero(); b * c];
                for r in 0..b {
                    for j in 0..c {
                        let p = ls[r * c + j].exp();
                        let onehot = if labels[r] == j { T::one() } else { T::zero() };
                        dx[r * c + j] = g[0] * (p - onehot) * inv_b;
                    }
                }
                self.accumulate(logits, &dx);
            }
            Op::RowStandardize { x, eps } => {
                let (x, eps) = (*x, *eps);
                let so = self.nodes[idx].shape.clone();
                let (b, c) = (so[0], so[1]);
                let xd = self.nodes[x.0].data.clone();
                let cf = T::from_f64(c as f64);
                let mut dx = vec![T::zero(); b * c];
                for r in 0..b {
                    let row = &xd[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mut mu = T::zero();
                    for &v in row {
                        mu = mu + v;
                    }
                    mu = mu / cf;
                    let mut var = T::zero();
                    for &v in row {
                        var = var + (v - mu) * (v - mu);
                    }
                    var = var / cf;
                    let sigma = var.sqrt();
                    let d = sigma + eps;
                    let mut gbar = T::zero();
                    let mut s = T::zero();
                    for j in 0..c {
                        gbar = gbar + grow[j];
                        s = s + grow[j] * (row[j] - mu);
                    }
                    gbar = gbar / cf;
                    for j in 0..c {
                        let mut grad = (grow[j] - gbar) / d;
                        // The sigma term vanishes for constant rows; sigma=0
                        // is the non-differentiable kink guarded by eps.
                        if sigma > T::zero() {
                            grad = grad - (row[j] - mu) * s / (cf * sigma * d * d);
                        }
                        dx[r * c + j] = grad;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Exp { x } => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[idx].data)
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(a, g);
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::ScaleConst { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<T> = g.iter().map(|&v| v * c).collect();
                self.accumulate(x, &dx);
            }
            Op::RowSum { x } => {
                let x = *x;
                let sx = self.shape(x).to_vec();
                let (b, c) = (sx[0], sx[1]);
                let mut dx = vec![T::zero(); b * c];
                for r in 0..b {
                    for j in 0..c {
                        dx[r * c + j] = g[r];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.nodes[x.0].data.len();
                let gv = g[0] / T::from_f64(n as f64);
                let dx = vec![gv; n];
                self.accumulate(x, &dx);
            }
        }
    }
}

/// Forward-only cross-entropy, sharing the tape's kernel.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::dimension(format!(
            "cross_entropy requires logits [B,C] with C >= 2, got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::dimension(format!(
            "cross_entropy got {} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok(kernels::cross_entropy_rows(logits.data(), b, c, labels))
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b[p * n + j];
            }
        }
    }
    out
}

/// Row-wise kernels shared by the tape ops and the tape-free inference paths
/// so both produce bit-identical values.
pub(crate) mod kernels {
    use crate::scalar::Scalar;

    pub fn standardize_rows<T: Scalar>(data: &[T], rows: usize, cols: usize, eps: T) -> Vec<T> {
        let cf = T::from_f64(cols as f64);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mut mu = T::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu / cf;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mu) * (v - mu);
            }
            var = var / cf;
            let d = var.sqrt() + eps;
            for (j, &v) in row.iter().enumerate() {
                out[r * cols + j] = (v - mu) / d;
            }
        }
        out
    }

    pub fn log_softmax_rows<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - m).exp();
            }
            let lse = m + sum.ln();
            for (j, &v) in row.iter().enumerate() {
                out[r * cols + j] = v - lse;
            }
        }
        out
    }

    pub fn cross_entropy_rows<T: Scalar>(
        logits: &[T],
        rows: usize,
        cols: usize,
        labels: &[usize],
    ) -> T {
        let ls = log_softmax_rows(logits, rows, cols);
        let mut acc = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            acc = acc - ls[r * cols + y];
        }
        acc / T::from_f64(rows as f64)
    }
}
