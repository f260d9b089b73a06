//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that needs one.
//! Leaves created with `needs_grad = false` act as constants: nothing
//! downstream of only-constant inputs is differentiated.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input_err, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var, out_h: usize, out_w: usize },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(input_err!("{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `c[i, j] += sum_p a[i, p] * b[p, j]` over arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f64],
    (c_rs, c_cs): (usize, usize),
) {
    if b_cs == 1 && c_cs == 1 {
        for i in 0..m {
            let crow = &mut c[i * c_rs..][..n];
            for p in 0..k {
                let av = a[i * a_rs + p * a_cs];
                if av != 0.0 {
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * b_rs..][..n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        return;
    }
    for i in 0..m {
        for p in 0..k {
            let av = a[i * a_rs + p * a_cs];
            if av == 0.0 {
                continue;
            }
            let brow = p * b_rs;
            let crow = i * c_rs;
            for j in 0..n {
                c[crow + j * c_cs] += av * b[brow + j * b_cs];
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
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
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Stride-1 2-D convolution with square kernels and symmetric zero padding.
    ///
    /// `x` is `(N, Cin, H, W)`, `w` is `(Cout, Cin, k, k)`, `b` is `(Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(input_err!("conv2d: input {:?}, kernel {:?}", xs, ws));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(input_err!("conv2d: kernel expects {} channels, input has {cin}", ws[1]));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(input_err!("conv2d: kernel {k} larger than padded input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(input_err!("conv2d: bias shape {:?}", self.value(b).shape()));
            }
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let (ckk, hw) = (cin * k * k, ho * wo);
        let mut out = vec![0.0; n * cout * hw];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let mut col = vec![0.0; ckk * hw];
            for ni in 0..n {
                im2col(&xd[ni * cin * h * wd..][..cin * h * wd], (cin, h, wd), k, pad, (ho, wo), &mut col);
                let oimg = &mut out[ni * cout * hw..][..cout * hw];
                if let Some(bias) = bias {
                    for (plane, &bv) in oimg.chunks_mut(hw).zip(bias) {
                        plane.iter_mut().for_each(|v| *v = bv);
                    }
                }
                gemm_acc(cout, hw, ckk, wdata, (ckk, 1), &col, (hw, 1), oimg, (hw, 1));
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, needs))
    }

    /// `x (N, F) -> x W^T + b` with `w` shaped `(Out, F)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(input_err!("linear: input {:?}, weight {:?}", xs, ws));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != o {
                return Err(input_err!("linear: bias length {} for {o} outputs", bd.len()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        gemm_acc(
            n,
            o,
            f,
            self.value(x).data(),
            (f, 1),
            self.value(w).data(),
            (1, f),
            &mut out,
            (o, 1),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(input_err!("max_pool2: input {:?}", xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Average pooling onto a fixed `out_h x out_w` grid with adaptive bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 || xs[2] < out_h || xs[3] < out_w {
            return Err(input_err!("adaptive_avg_pool: input {:?} to {out_h}x{out_w}", xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += xd[base + y * w + x0..base + y * w + x1].iter().sum::<f64>();
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x, out_h, out_w }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(value, Op::Square(x), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        let needs = self.needs(x);
        self.push(value, Op::Mean(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Softmax(x), needs)
    }

    /// Batched product `op(a) · op(b)` over 3-D operands, where `op` optionally
    /// transposes the trailing two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(input_err!("batch_matmul: {:?} x {:?}", as_, bs));
        }
        let (m, ka) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if ka != kb {
            return Err(input_err!("batch_matmul: inner dims {ka} vs {kb}"));
        }
        let batch = as_[0];
        let mut out = vec![0.0; batch * m * n];
        let sa = mat_strides(as_[1], as_[2], ta);
        let sb = mat_strides(bs[1], bs[2], tb);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm_acc(
                m,
                n,
                ka,
                &ad[bi * m * ka..][..m * ka],
                sa,
                &bd[bi * ka * n..][..ka * n],
                sb,
                &mut out[bi * m * n..][..m * n],
                (n, 1),
            );
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }, needs))
    }

    /// Masked mean cross-entropy of `(N, K)` logits. Rows whose mask is zero
    /// contribute nothing; an all-zero mask gives a loss of exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[f64]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] != mask.len() {
            return Err(input_err!(
                "cross_entropy: logits {:?}, {} labels, {} mask entries",
                ls,
                labels.len(),
                mask.len()
            ));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(input_err!("cross_entropy: label {bad} outside [0, {k})"));
        }
        let total: f64 = mask.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            let mut logp = vec![0.0; k];
            for (i, row) in self.value(logits).data().chunks(k).enumerate() {
                if mask[i] != 0.0 {
                    log_softmax_row(row, &mut logp);
                    loss -= mask[i] * logp[labels[i]];
                }
            }
            loss /= total;
        }
        let needs = self.needs(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.value(loss).numel(), 1);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        if let Some(t) = slot {
            f(t.data_mut());
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => self.backprop_conv(*x, *w, *b, *pad, g, grads),
            Op::Linear { x, w, b } => {
                let (n, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                self.accumulate_with(grads, *x, |dx| {
                    gemm_acc(n, f, o, gd, (o, 1), wd, (f, 1), dx, (f, 1));
                });
                self.accumulate_with(grads, *w, |dw| {
                    gemm_acc(o, f, n, gd, (1, o), xd, (f, 1), dw, (f, 1));
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for row in gd.chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(yd).zip(gd) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        dx[src] += gv;
                    }
                });
            }
            Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let xs = self.value(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (*out_h, *out_w);
                self.accumulate_with(grads, *x, |dx| {
                    for plane in 0..nc {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let share = gd[(plane * oh + oy) * ow + ox]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    for xi in x0..x1 {
                                        dx[plane * h * w + y * w + xi] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate_with(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(gd) {
                        *d += gv;
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| {
                    for ((d, &bv), &gv) in da.iter_mut().zip(bd).zip(gd) {
                        *d += gv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for ((d, &av), &gv) in db.iter_mut().zip(ad).zip(gd) {
                        *d += gv * av;
                    }
                });
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        *d += 2.0 * xv * gv;
                    }
                });
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(x) => {
                let gv = gd[0] / self.value(*x).numel().max(1) as f64;
                self.accumulate_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
            Op::Softmax(x) => {
                let yd = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                self.accumulate_with(grads, *x, |dx| {
                    for ((drow, yrow), grow) in dx.chunks_mut(k).zip(yd.chunks(k)).zip(gd.chunks(k)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for ((d, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let as_ = self.value(*a).shape();
                let bs = self.value(*b).shape();
                let (m, k) = if *ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if *tb { bs[1] } else { bs[2] };
                let sa = mat_strides(as_[1], as_[2], *ta);
                let sb = mat_strides(bs[1], bs[2], *tb);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let batch = as_[0];
                // d op(a) = dC · op(b)^T, written back through op(a)'s strides.
                self.accumulate_with(grads, *a, |da| {
                    for bi in 0..batch {
                        gemm_acc(
                            m,
                            k,
                            n,
                            &gd[bi * m * n..][..m * n],
                            (n, 1),
                            &bd[bi * k * n..][..k * n],
                            (sb.1, sb.0),
                            &mut da[bi * m * k..][..m * k],
                            sa,
                        );
                    }
                });
                // d op(b) = op(a)^T · dC.
                self.accumulate_with(grads, *b, |db| {
                    for bi in 0..batch {
                        gemm_acc(
                            k,
                            n,
                            m,
                            &ad[bi * m * k..][..m * k],
                            (sa.1, sa.0),
                            &gd[bi * m * n..][..m * n],
                            (n, 1),
                            &mut db[bi * k * n..][..k * n],
                            sb,
                        );
                    }
                });
            }
            Op::CrossEntropy { logits, labels, mask } => {
                let total: f64 = mask.iter().sum();
                if total <= 0.0 {
                    return;
                }
                let k = self.value(*logits).shape()[1];
                let ld = self.value(*logits).data();
                let gv = gd[0];
                self.accumulate_with(grads, *logits, |dl| {
                    let mut logp = vec![0.0; k];
                    for (i, row) in ld.chunks(k).enumerate() {
                        if mask[i] == 0.0 {
                            continue;
                        }
                        log_softmax_row(row, &mut logp);
                        let weight = gv * mask[i] / total;
                        for c in 0..k {
                            let target = if c == labels[i] { 1.0 } else { 0.0 };
                            dl[i * k + c] += weight * (libm::exp(logp[c]) - target);
                        }
                    }
                });
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let gd = g.data();
        let xd = self.value(x).data();
        let wdata = self.value(w).data();

        if let Some(b) = b {
            self.accumulate_with(grads, b, |db| {
                for ni in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += gd[(ni * cout + co) * ho * wo..][..ho * wo].iter().sum::<f64>();
                    }
                }
            });
        }
        let (ckk, hw) = (cin * k * k, ho * wo);
        let mut col = vec![0.0; ckk * hw];
        self.accumulate_with(grads, w, |dw| {
            for ni in 0..n {
                im2col(&xd[ni * cin * h * wd..][..cin * h * wd], (cin, h, wd), k, pad, (ho, wo), &mut col);
                let gimg = &gd[ni * cout * hw..][..cout * hw];
                for (grow, dwrow) in gimg.chunks(hw).zip(dw.chunks_mut(ckk)) {
                    for (d, crow) in dwrow.iter_mut().zip(col.chunks(hw)) {
                        *d += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        });
        self.accumulate_with(grads, x, |dx| {
            for ni in 0..n {
                col.iter_mut().for_each(|v| *v = 0.0);
                let gimg = &gd[ni * cout * hw..][..cout * hw];
                gemm_acc(ckk, hw, cout, wdata, (1, ckk), gimg, (hw, 1), &mut col, (hw, 1));
                col2im(&col, (cin, h, wd), k, pad, (ho, wo), &mut dx[ni * cin * h * wd..][..cin * h * wd]);
            }
        });
    }
}

/// Unfolds one image `(C, H, W)` into `(C*k*k, Ho*Wo)` patch columns.
fn im2col(img: &[f64], (c, h, w): (usize, usize, usize), k: usize, pad: usize, (ho, wo): (usize, usize), col: &mut [f64]) {
    for ci in 0..c {
        let plane = &img[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                let (x0, x1) = valid_range(wo, kx, pad, w);
                for oy in 0..ho {
                    let orow = &mut row[oy * wo..][..wo];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        orow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let irow = &plane[(iy - pad) * w..][..w];
                    orow[..x0].iter_mut().for_each(|v| *v = 0.0);
                    orow[x1..].iter_mut().for_each(|v| *v = 0.0);
                    orow[x0..x1].copy_from_slice(&irow[x0 + kx - pad..x1 + kx - pad]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `img`.
fn col2im(col: &[f64], (c, h, w): (usize, usize, usize), k: usize, pad: usize, (ho, wo): (usize, usize), img: &mut [f64]) {
    for ci in 0..c {
        let plane = &mut img[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                let (x0, x1) = valid_range(wo, kx, pad, w);
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let irow = &mut plane[(iy - pad) * w..][..w];
                    for (d, &v) in irow[x0 + kx - pad..x1 + kx - pad].iter_mut().zip(&row[oy * wo + x0..oy * wo + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Output columns `ox` for which `ox + kx - pad` lands inside `[0, width)`.
#[inline]
fn valid_range(wo: usize, kx: usize, pad: usize, width: usize) -> (usize, usize) {
    let start = pad.saturating_sub(kx);
    let end = (width + pad).saturating_sub(kx).min(wo);
    (start, end.max(start))
}

#[inline]
fn pool_bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    (i * size / bins, ((i + 1) * size).div_ceil(bins))
}

/// Row/column strides of a stored `rows x cols` matrix viewed optionally transposed.
#[inline]
fn mat_strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    let _ = rows;
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}
