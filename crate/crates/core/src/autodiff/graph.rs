//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse and accumulates analytic gradients. Graphs are
//! single-sample and single-threaded; run one graph per sample to
//! parallelize.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How per-cell losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Sparse linear read-out from a `[C, H, W]` map into `[C, out_dims...]`:
/// every output position is a weighted sum of input pixels. Positions with
/// no taps produce zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    pub in_dims: [usize; 2],
    pub out_dims: Vec<usize>,
    offsets: Vec<u32>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl GatherPlan {
    /// Builds a plan from per-output tap lists `(flat pixel index, weight)`.
    pub fn from_taps(in_dims: [usize; 2], out_dims: Vec<usize>, taps: &[Vec<(u32, f64)>]) -> Result<Self> {
        let n_out: usize = out_dims.iter().product();
        if taps.len() != n_out {
            return Err(Error::Contract(format!(
                "gather plan has {} tap lists for output {out_dims:?}",
                taps.len()
            )));
        }
        let plane = (in_dims[0] * in_dims[1]) as u32;
        let mut offsets = Vec::with_capacity(n_out + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for list in taps {
            for &(i, w) in list {
                if i >= plane {
                    return Err(Error::Contract(format!(
                        "gather tap {i} outside a {in_dims:?} map"
                    )));
                }
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len() as u32);
        }
        Ok(Self {
            in_dims,
            out_dims,
            offsets,
            indices,
            weights,
        })
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Taps of output position `o`.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
        self.indices[a..b]
            .iter()
            .zip(&self.weights[a..b])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn has_taps(&self, o: usize) -> bool {
        self.offsets[o + 1] > self.offsets[o]
    }

    /// Applies the plan to a `[channels, H, W]` buffer.
    pub fn apply<T: Real>(&self, x: &[T], channels: usize) -> Vec<T> {
        let plane = self.in_dims[0] * self.in_dims[1];
        let n_out = self.n_out();
        let mut out = vec![T::zero(); channels * n_out];
        for o in 0..n_out {
            let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
            for t in a..b {
                let (i, w) = (self.indices[t] as usize, T::from_f64(self.weights[t]));
                for c in 0..channels {
                    out[c * n_out + o] += w * x[c * plane + i];
                }
            }
        }
        out
    }

    /// Adjoint of [`GatherPlan::apply`]: scatters `g` back into `gx`.
    pub fn apply_transpose<T: Real>(&self, g: &[T], channels: usize, gx: &mut [T]) {
        let plane = self.in_dims[0] * self.in_dims[1];
        let n_out = self.n_out();
        for o in 0..n_out {
            let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
            for t in a..b {
                let (i, w) = (self.indices[t] as usize, T::from_f64(self.weights[t]));
                for c in 0..channels {
                    gx[c * plane + i] += w * g[c * n_out + o];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    SoftmaxChannel(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    NearestResize {
        x: Var,
        src: Arc<Vec<usize>>,
    },
    LinearResize {
        x: Var,
        outer: usize,
        inner: usize,
        n_in: usize,
        taps: Arc<Vec<(usize, usize, f64)>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        plan: Arc<GatherPlan>,
    },
    MaskedCrossEntropy {
        logits: Var,
        labels: Arc<Vec<Option<u32>>>,
        reduction: Reduction,
    },
    SoftArgmin {
        logits: Var,
        centers: Arc<Vec<f64>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the named parameter from `store` into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err("conv bias", self.shape(b), &[geom.cout]));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Conv { x, w, b, geom }, needs))
    }

    /// 2D convolution of `[C, H, W]` by `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(
            &[xs[0], 1, xs[1], xs[2]],
            &[ws[0], ws[1], 1, ws[2], ws[3]],
            [1, stride, stride],
            [0, padding, padding],
        )?;
        let shape = vec![geom.cout, geom.output[1], geom.output[2]];
        self.conv(x, w, b, geom, shape)
    }

    /// 3D convolution of `[C, D, H, W]` by `[O, C, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = ConvGeom::new(&xs, &ws, [stride; 3], [padding; 3])?;
        let shape = geom.out_shape();
        self.conv(x, w, b, geom, shape)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    /// Per-channel `x * scale + shift` over a `[C, ...]` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("channel_affine", &xs, self.shape(scale)));
        }
        let p = self.value(x).len() / c;
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            for v in &mut out[ch * p..(ch + 1) * p] {
                *v = *v * sc[ch] + sh[ch];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(Tensor::new(xs, out)?, Op::ChannelAffine { x, scale, shift }, needs))
    }

    /// Softmax along axis 0 of a `[C, ...]` tensor, max-subtracted.
    pub fn softmax_channel(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let p = t.len() / c;
        let out = softmax_axis0(t.data(), c, p);
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxChannel(x), needs)
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != first[1..] {
                return Err(shape_err("concat", &first, s));
            }
            channels += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = channels;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Nearest-neighbour resize of a `[C, H, W]` map.
    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err("nearest_resize", &xs, &[out_h, out_w]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut src = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                src.push(sy * w + ox * w / out_w);
            }
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            out.extend(src.iter().map(|&s| data[ch * h * w + s]));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::NearestResize { x, src: Arc::new(src) },
            needs,
        ))
    }

    /// Linear resize of one axis to `n_out` samples with cell-centred
    /// alignment: output `o` samples input coordinate
    /// `(o + 0.5) * n_in / n_out - 0.5`, clamped to the valid range.
    pub fn linear_resize(&mut self, x: Var, axis: usize, n_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || n_out == 0 {
            return Err(Error::Contract(format!(
                "linear_resize: axis {axis} / length {n_out} invalid for shape {xs:?}"
            )));
        }
        let n_in = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let taps = linear_taps(n_in, n_out);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * n_out * inner];
        for a in 0..outer {
            for (o, &(i0, i1, f)) in taps.iter().enumerate() {
                let (w0, w1) = (T::from_f64(1.0 - f), T::from_f64(f));
                let src0 = &data[(a * n_in + i0) * inner..(a * n_in + i0 + 1) * inner];
                let src1 = &data[(a * n_in + i1) * inner..(a * n_in + i1 + 1) * inner];
                let dst = &mut out[(a * n_out + o) * inner..(a * n_out + o + 1) * inner];
                for ((d, &s0), &s1) in dst.iter_mut().zip(src0).zip(src1) {
                    *d = w0 * s0 + w1 * s1;
                }
            }
        }
        let mut shape = xs;
        shape[axis] = n_out;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LinearResize {
                x,
                outer,
                inner,
                n_in,
                taps: Arc::new(taps),
            },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(t.len() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Samples a `[C, H, W]` map through `plan`, producing `[C, out_dims...]`.
    pub fn gather(&mut self, x: Var, plan: Arc<GatherPlan>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || [xs[1], xs[2]] != plan.in_dims {
            return Err(shape_err("gather", &xs, &plan.in_dims));
        }
        let out = plan.apply(self.value(x).data(), xs[0]);
        let mut shape = vec![xs[0]];
        shape.extend_from_slice(&plan.out_dims);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, plan }, needs))
    }

    /// Cross entropy of `[Nc, ...]` logits against per-position class
    /// labels; positions labelled `None` are ignored. Returns a scalar.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<Option<u32>>>,
        reduction: Reduction,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let nc = ls[0];
        let p = self.value(logits).len() / nc;
        if labels.len() != p {
            return Err(shape_err("masked_cross_entropy", &ls, &[labels.len()]));
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        let mut n_valid = 0usize;
        for (pos, label) in labels.iter().enumerate() {
            let Some(c) = *label else { continue };
            if c as usize >= nc {
                return Err(Error::Contract(format!("label {c} outside {nc} classes")));
            }
            let lse = log_sum_exp(data, nc, p, pos);
            total += lse - data[c as usize * p + pos].as_f64();
            n_valid += 1;
        }
        if reduction == Reduction::Mean && n_valid > 0 {
            total /= n_valid as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::MaskedCrossEntropy {
                logits,
                labels,
                reduction,
            },
            needs,
        ))
    }

    /// Expected bin centre under the softmax over axis 0 of `[Nc, ...]` logits.
    pub fn soft_argmin(&mut self, logits: Var, centers: Arc<Vec<f64>>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let nc = ls[0];
        if centers.len() != nc {
            return Err(shape_err("soft_argmin", &ls, &[centers.len()]));
        }
        let p = self.value(logits).len() / nc;
        let probs = softmax_axis0(self.value(logits).data(), nc, p);
        let mut out = vec![T::zero(); p];
        for c in 0..nc {
            let e = T::from_f64(centers[c]);
            for (o, &s) in out.iter_mut().zip(&probs[c * p..(c + 1) * p]) {
                *o += e * s;
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(ls[1..].to_vec(), out)?,
            Op::SoftArgmin { logits, centers },
            needs,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let mut gx = self.take_slot(grads, *x);
                let mut gw = self.take_slot(grads, *w);
                let mut gb = b.and_then(|b| self.take_slot(grads, b));
                conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if gx.is_some() {
                    grads[x.0] = gx;
                }
                if gw.is_some() {
                    grads[w.0] = gw;
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    grads[b.0] = Some(gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x).data();
                let c = self.shape(*x)[0];
                let p = xv.len() / c;
                let sc = self.value(*scale).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for (o, &gi) in gx[ch * p..(ch + 1) * p].iter_mut().zip(&g[ch * p..(ch + 1) * p]) {
                            *o += gi * sc[ch];
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *scale) {
                    for ch in 0..c {
                        gs[ch] += super::tensor::dot(&g[ch * p..(ch + 1) * p], &xv[ch * p..(ch + 1) * p]);
                    }
                }
                if let Some(gh) = self.slot(grads, *shift) {
                    for ch in 0..c {
                        gh[ch] += g[ch * p..(ch + 1) * p].iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
            Op::SoftmaxChannel(x) => {
                let s = node.value.data();
                let c = node.value.shape()[0];
                let p = s.len() / c;
                if let Some(gx) = self.slot(grads, *x) {
                    let mut inner = vec![T::zero(); p];
                    for ch in 0..c {
                        for q in 0..p {
                            inner[q] += g[ch * p + q] * s[ch * p + q];
                        }
                    }
                    for ch in 0..c {
                        for q in 0..p {
                            let k = ch * p + q;
                            gx[k] += s[k] * (g[k] - inner[q]);
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if let Some(gx) = self.slot(grads, v) {
                        for (o, &gi) in gx.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::NearestResize { x, src } => {
                let xs = self.shape(*x);
                let plane_in = xs[1] * xs[2];
                let plane_out = src.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..xs[0] {
                        for (q, &s) in src.iter().enumerate() {
                            gx[ch * plane_in + s] += g[ch * plane_out + q];
                        }
                    }
                }
            }
            Op::LinearResize {
                x,
                outer,
                inner,
                n_in,
                taps,
            } => {
                let n_out = taps.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for a in 0..*outer {
                        for (o, &(i0, i1, f)) in taps.iter().enumerate() {
                            let (w0, w1) = (T::from_f64(1.0 - f), T::from_f64(f));
                            let go = (a * n_out + o) * inner;
                            for q in 0..*inner {
                                let gv = g[go + q];
                                gx[(a * n_in + i0) * inner + q] += w0 * gv;
                                gx[(a * n_in + i1) * inner + q] += w1 * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        if negate {
                            *o -= gi;
                        } else {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).len();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::from_f64(n as f64)
                } else {
                    g[0]
                };
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += scale;
                    }
                }
            }
            Op::Gather { x, plan } => {
                let c = self.shape(*x)[0];
                if let Some(gx) = self.slot(grads, *x) {
                    plan.apply_transpose(g, c, gx);
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                labels,
                reduction,
            } => {
                let data = self.value(*logits).data();
                let nc = self.shape(*logits)[0];
                let p = data.len() / nc;
                let n_valid = labels.iter().filter(|l| l.is_some()).count();
                if n_valid == 0 {
                    return;
                }
                let scale = match reduction {
                    Reduction::Sum => g[0].as_f64(),
                    Reduction::Mean => g[0].as_f64() / n_valid as f64,
                };
                if let Some(gx) = self.slot(grads, *logits) {
                    for (pos, label) in labels.iter().enumerate() {
                        let Some(cls) = *label else { continue };
                        let lse = log_sum_exp(data, nc, p, pos);
                        for c in 0..nc {
                            let s = (data[c * p + pos].as_f64() - lse).exp();
                            let target = if c == cls as usize { 1.0 } else { 0.0 };
                            gx[c * p + pos] += T::from_f64(scale * (s - target));
                        }
                    }
                }
            }
            Op::SoftArgmin { logits, centers } => {
                let data = self.value(*logits).data();
                let nc = centers.len();
                let p = data.len() / nc;
                let probs = softmax_axis0(data, nc, p);
                let e_hat = node.value.data();
                if let Some(gx) = self.slot(grads, *logits) {
                    for c in 0..nc {
                        let e = T::from_f64(centers[c]);
                        for q in 0..p {
                            let k = c * p + q;
                            gx[k] += g[q] * probs[k] * (e - e_hat[q]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, if it was reached by the reverse pass.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter name, gradient)` for every parameter node in `graph`.
    /// A parameter used several times appears once per use.
    pub fn params<'a>(&'a self, graph: &'a Graph<T>) -> impl Iterator<Item = (&'a str, &'a [T])> + 'a {
        graph.nodes.iter().enumerate().filter_map(move |(i, n)| match &n.op {
            Op::Param(name) => self.grads[i].as_deref().map(|g| (name.as_str(), g)),
            _ => None,
        })
    }
}

fn softmax_axis0<T: Real>(x: &[T], c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for q in 0..p {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(x[ch * p + q]);
        }
        let mut s = T::zero();
        for ch in 0..c {
            let e = (x[ch * p + q] - m).exp();
            out[ch * p + q] = e;
            s += e;
        }
        for ch in 0..c {
            out[ch * p + q] = out[ch * p + q] / s;
        }
    }
    out
}

/// `log Σ_c exp(x[c, pos])` in f64 with max subtraction.
fn log_sum_exp<T: Real>(x: &[T], c: usize, p: usize, pos: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for ch in 0..c {
        m = m.max(x[ch * p + pos].as_f64());
    }
    let mut s = 0.0;
    for ch in 0..c {
        s += (x[ch * p + pos].as_f64() - m).exp();
    }
    m + s.ln()
}

/// `(i0, i1, frac)` per output sample for cell-centred linear resizing.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
