//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates gradients into every node that (transitively) depends
//! on a leaf created with `requires_grad = true`. A value consumed by several
//! operations receives the sum of the gradients from each use.
//!
//! A tape is single-threaded and meant to be dropped after one step; build a
//! fresh one for each forward pass.

use crate::deform::{deform_backward, deform_forward, DeformGeometry};
use crate::error::{Error, Result};
use crate::ops::conv::{check_conv_shapes, conv2d_backward, conv2d_forward, Geometry};
use crate::ops::pool::{
    global_avg_pool_backward, global_avg_pool_forward, max_pool2_backward, max_pool2_forward,
};
use crate::ops::resize::{resize_backward, resize_forward, ResizeTable};
use crate::ops::Conv2dParams;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] node: given the input values, the
/// output value and the output gradient, returns one optional gradient per
/// input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Geometry,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Resize {
        x: Var,
        table: ResizeTable,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    CrossEntropy2 {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    ChannelMask {
        x: Var,
        mask: Var,
    },
    WeightedChannelSum {
        maps: Var,
        weights: Var,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        w: Var,
        b: Var,
        geom: DeformGeometry,
    },
    SquaredError {
        pred: Var,
        target: Var,
        batch: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, params: Conv2dParams) -> Result<Var> {
        let geom = check_conv_shapes(self.value(x), self.value(w), self.value(b), params)?;
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2_forward(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, ng))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool_forward(self.value(x))?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, ng))
    }

    /// Row-wise softmax of `[N, K]` logits, `K >= 2`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = match t.shape() {
            [_, k] if *k >= 2 => *k,
            s => return Err(Error::shape(format!("softmax expects [N, K>=2], got {s:?}"))),
        };
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(k) {
            out.extend(softmax_row(row));
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x }, ng))
    }

    /// Align-corners bilinear resize of every plane to `out_h x out_w`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let table = ResizeTable::new(h, w, out_h, out_w)?;
        let out = resize_forward(self.value(x), &table);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Resize { x, table }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise_mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// Concatenates rank-4 tensors along the channel axis, preserving order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels of an empty list"))?;
        let [n, _, h, w] = self.value(*first).dims4()?;
        let mut total_c = 0;
        for v in xs {
            let [vn, vc, vh, vw] = self.value(*v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: N,H,W must match, got {:?} vs {:?}",
                    self.value(*first).shape(),
                    self.value(*v).shape()
                )));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for v in xs {
                let t = self.value(*v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        let ng = self.any_grad(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, ng))
    }

    /// Mean over the batch of `-ln softmax(logits)[label]` for `[N, 2]` logits.
    /// Label 1 is the crowd class.
    pub fn cross_entropy_2class(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let t = self.value(logits);
        let n = match t.shape() {
            [n, 2] => *n,
            s => return Err(Error::shape(format!("cross_entropy_2class expects [N, 2], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {bad} outside {{0, 1}}")));
        }
        let mut probs = Vec::with_capacity(2 * n);
        let mut loss = T::zero();
        for (row, &label) in t.data().chunks(2).zip(labels) {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            loss += lse - row[label as usize];
            probs.extend(softmax_row(row));
        }
        let out = Tensor::scalar(loss / T::from_usize(n).unwrap());
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy2 {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sum { x }, ng)
    }

    /// Multiplies every channel of `x: [N, C, h, w]` by `mask: [N, 1, h, w]`.
    pub fn channel_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(mask).shape() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "channel_mask: mask {:?} does not match features {:?}",
                self.value(mask).shape(),
                self.value(x).shape()
            )));
        }
        let plane = h * w;
        let m = self.value(mask).data();
        let mut data = self.value(x).data().to_vec();
        for b in 0..n {
            let mp = &m[b * plane..(b + 1) * plane];
            for ch in data[b * c * plane..(b + 1) * c * plane].chunks_mut(plane) {
                ch.iter_mut().zip(mp).for_each(|(v, s)| *v *= *s);
            }
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        let ng = self.any_grad(&[x, mask]);
        Ok(self.push(out, Op::ChannelMask { x, mask }, ng))
    }

    /// `sum_k weights[n, k] * maps[n, k]`, giving `[N, 1, h, w]`.
    pub fn weighted_channel_sum(&mut self, maps: Var, weights: Var) -> Result<Var> {
        let [n, k, h, w] = self.value(maps).dims4()?;
        if self.value(weights).shape() != [n, k] {
            return Err(Error::shape(format!(
                "weighted_channel_sum: weights {:?} vs maps {:?}",
                self.value(weights).shape(),
                self.value(maps).shape()
            )));
        }
        let plane = h * w;
        let (md, wd) = (self.value(maps).data(), self.value(weights).data());
        let mut data = vec![T::zero(); n * plane];
        for b in 0..n {
            let dst = &mut data[b * plane..(b + 1) * plane];
            for ch in 0..k {
                let s = wd[b * k + ch];
                let src = &md[(b * k + ch) * plane..(b * k + ch + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += s * *v);
            }
        }
        let out = Tensor::new(&[n, 1, h, w], data)?;
        let ng = self.any_grad(&[maps, weights]);
        Ok(self.push(out, Op::WeightedChannelSum { maps, weights }, ng))
    }

    /// Deformable convolution of `x` with per-location tap displacements
    /// `offsets: [N, 2k^2, H', W']` (see [`crate::deform`] for the layout).
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = DeformGeometry::check(
            self.value(x),
            self.value(offsets),
            self.value(w),
            self.value(b),
            stride,
            padding,
        )?;
        let out = deform_forward(
            self.value(x),
            self.value(offsets),
            self.value(w),
            self.value(b),
            &geom,
        );
        let ng = self.any_grad(&[x, offsets, w, b]);
        Ok(self.push(
            out,
            Op::DeformConv {
                x,
                offsets,
                w,
                b,
                geom,
            },
            ng,
        ))
    }

    /// `(1 / 2N) * ||pred - target||^2` summed over every element.
    pub fn squared_error(&mut self, pred: Var, target: Var, batch: usize) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(format!(
                "squared_error: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let ss: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let out = Tensor::scalar(ss / T::from_usize(2 * batch).unwrap());
        let ng = self.any_grad(&[pred, target]);
        Ok(self.push(
            out,
            Op::SquaredError {
                pred,
                target,
                batch,
            },
            ng,
        ))
    }

    /// `x * scale + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let value = self.value(x).map(|v| v * a + b);
        self.custom(
            &[x],
            value,
            Box::new(move |_, _, g| vec![Some(g.iter().map(|&v| v * a).collect())]),
        )
    }

    /// Records an operation computed outside the tape with a caller-supplied
    /// backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let ng = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let r = conv2d_backward(val(*x), val(*w), geom, g, [ng(*x), ng(*w), ng(*b)]);
                for (v, d) in [(*x, r.input), (*w, r.weight), (*b, r.bias)] {
                    if let Some(d) = d {
                        add_into(grads, v, d);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dst = accumulate(grads, *x, val(*x).len());
                max_pool2_backward(argmax, g, dst);
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = val(*x).dims4().expect("rank 4");
                let dst = accumulate(grads, *x, val(*x).len());
                global_avg_pool_backward(h * w, g, dst);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let dst = accumulate(grads, *x, y.len());
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dst.chunks_mut(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for i in 0..k {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
            Op::Resize { x, table } => {
                let dst = accumulate(grads, *x, val(*x).len());
                resize_backward(table, g, dst);
            }
            Op::Relu { x } => {
                let xs = val(*x).data();
                let dst = accumulate(grads, *x, xs.len());
                for ((d, xv), gv) in dst.iter_mut().zip(xs).zip(g) {
                    if *xv > T::zero() {
                        *d += *gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if ng(v) {
                        add_into(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                // Read both operands before writing: `a` and `b` may be the same node.
                let da: Option<Vec<T>> = ng(*a)
                    .then(|| g.iter().zip(val(*b).data()).map(|(gv, bv)| *gv * *bv).collect());
                let db: Option<Vec<T>> = ng(*b)
                    .then(|| g.iter().zip(val(*a).data()).map(|(gv, av)| *gv * *av).collect());
                if let Some(d) = da {
                    add_into(grads, *a, d);
                }
                if let Some(d) = db {
                    add_into(grads, *b, d);
                }
            }
            Op::Concat { xs } => {
                let [n, _, h, w] = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                let total: usize = node.value.shape()[1];
                for v in xs {
                    let c = val(*v).shape()[1];
                    if ng(*v) {
                        let dst = accumulate(grads, *v, n * c * plane);
                        for b in 0..n {
                            let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            dst[b * c * plane..(b + 1) * c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += *s);
                        }
                    }
                    offset += c;
                }
            }
            Op::CrossEntropy2 {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                let dst = accumulate(grads, *logits, 2 * n);
                for (i, &label) in labels.iter().enumerate() {
                    for k in 0..2 {
                        let target = if k == label as usize { T::one() } else { T::zero() };
                        dst[2 * i + k] += scale * (probs[2 * i + k] - target);
                    }
                }
            }
            Op::Sum { x } => {
                let dst = accumulate(grads, *x, val(*x).len());
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::ChannelMask { x, mask } => {
                let [n, c, h, w] = val(*x).dims4().expect("rank 4");
                let plane = h * w;
                let m = val(*mask).data();
                let xs = val(*x).data();
                if ng(*x) {
                    let mut dx = g.to_vec();
                    for b in 0..n {
                        let mp = &m[b * plane..(b + 1) * plane];
                        for ch in dx[b * c * plane..(b + 1) * c * plane].chunks_mut(plane) {
                            ch.iter_mut().zip(mp).for_each(|(d, s)| *d *= *s);
                        }
                    }
                    add_into(grads, *x, dx);
                }
                if ng(*mask) {
                    let mut dm = vec![T::zero(); n * plane];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            for p in 0..plane {
                                dm[b * plane + p] += g[o + p] * xs[o + p];
                            }
                        }
                    }
                    add_into(grads, *mask, dm);
                }
            }
            Op::WeightedChannelSum { maps, weights } => {
                let [n, k, h, w] = val(*maps).dims4().expect("rank 4");
                let plane = h * w;
                let (md, wd) = (val(*maps).data(), val(*weights).data());
                if ng(*maps) {
                    let mut dm = vec![T::zero(); md.len()];
                    for b in 0..n {
                        for ch in 0..k {
                            let s = wd[b * k + ch];
                            let o = (b * k + ch) * plane;
                            for p in 0..plane {
                                dm[o + p] = s * g[b * plane + p];
                            }
                        }
                    }
                    add_into(grads, *maps, dm);
                }
                if ng(*weights) {
                    let mut dw = vec![T::zero(); n * k];
                    for b in 0..n {
                        for ch in 0..k {
                            let o = (b * k + ch) * plane;
                            dw[b * k + ch] = (0..plane).map(|p| md[o + p] * g[b * plane + p]).sum();
                        }
                    }
                    add_into(grads, *weights, dw);
                }
            }
            Op::DeformConv {
                x,
                offsets,
                w,
                b,
                geom,
            } => {
                let r = deform_backward(
                    val(*x),
                    val(*offsets),
                    val(*w),
                    geom,
                    g,
                    [ng(*x), ng(*offsets), ng(*w), ng(*b)],
                );
                for (v, d) in [
                    (*x, r.input),
                    (*offsets, r.offsets),
                    (*w, r.weight),
                    (*b, r.bias),
                ] {
                    if let Some(d) = d {
                        add_into(grads, v, d);
                    }
                }
            }
            Op::SquaredError {
                pred,
                target,
                batch,
            } => {
                let scale = g[0] / T::from_usize(*batch).unwrap();
                let diff: Vec<T> = val(*pred)
                    .data()
                    .iter()
                    .zip(val(*target).data())
                    .map(|(p, t)| (*p - *t) * scale)
                    .collect();
                if ng(*target) {
                    add_into(grads, *target, diff.iter().map(|d| -*d).collect());
                }
                if ng(*pred) {
                    add_into(grads, *pred, diff);
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let ds = backward(&vals, &node.value, g);
                for (v, d) in inputs.iter().zip(ds) {
                    if let (true, Some(d)) = (ng(*v), d) {
                        add_into(grads, *v, d);
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row<T: Real>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let denom: T = row.iter().map(|v| (*v - m).exp()).sum();
    row.iter().map(move |v| (*v - m).exp() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn two_consumers_add_exactly() {
        let xv = t(&[1, 1, 2, 2], &[0.3, -1.2, 2.5, 0.7]);
        let grad_of = |use_relu: bool, use_square: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), true);
            let r = tape.relu(x);
            let a = tape.sum(r);
            let sq = tape.mul(x, x).unwrap();
            let b = tape.sum(sq);
            let loss = match (use_relu, use_square) {
                (true, true) => tape.add(a, b).unwrap(),
                (true, false) => a,
                _ => b,
            };
            tape.backward(loss).unwrap().get(x).unwrap().to_vec()
        };
        let ga = grad_of(true, false);
        let gb = grad_of(false, true);
        let gab = grad_of(true, true);
        for i in 0..4 {
            assert_eq!(gab[i], ga[i] + gb[i]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_values_and_gate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 9.0]));
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let z = tape.constant(Tensor::ones(&[4]));
        assert!(tape.mul(x, z).is_err());
    }

    #[test]
    fn concat_preserves_channel_order() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 1, 2], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[1, 3, 1, 2], |i| 10.0 + i as f32));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 1, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]
        );
        let bad = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let b = tape.constant(t(&[2, 3], &[0.1, -2.0, 3.0, 4.0, 4.0, -1.0]));
        let c = tape.constant(t(&[2, 3], &[100.1, 98.0, 103.0, -6.0, -6.0, -11.0]));
        let sb = tape.softmax(b).unwrap();
        let sc = tape.softmax(c).unwrap();
        for (x, y) in tape.value(sb).data().iter().zip(tape.value(sc).data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let one = tape.constant(t(&[1, 1], &[0.0]));
        assert!(tape.softmax(one).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy_2class(l, &[1]).unwrap();
        assert!((tape.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let l = tape.constant(t(&[1, 2], &[-20.0, 20.0]));
        let ce = tape.cross_entropy_2class(l, &[1]).unwrap();
        assert!(tape.value(ce).data()[0] < 1e-6);
        assert!(tape.cross_entropy_2class(l, &[2]).is_err());
    }

    #[test]
    fn gap_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64), true);
        let p = tape.global_avg_pool(x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let m = tape.mul(x, y).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(y).unwrap(), &[1.0, 2.0]);
    }
}
