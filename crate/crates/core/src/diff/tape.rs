//! Reverse-mode tape.
//!
//! Every primitive evaluates eagerly and appends a node. Nodes whose inputs
//! are all untracked keep only their value (no saved activations, no input
//! references), so constant-only subgraphs cost nothing at backward time.
//! Node order is creation order, which is a topological order by
//! construction; `backward` walks it in reverse and accumulates into each
//! input in that fixed order, so gradients are bit-reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    ClampMin(usize, f64),
    Softmax(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Conv(usize, usize, ConvGeom),
    AvgPool(usize, PoolGeom),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    L2Normalize { input: usize, norms: Vec<f64> },
    BroadcastMul { a: usize, b: usize, map: Vec<usize> },
    BroadcastAdd { a: usize, b: usize, map: Vec<usize> },
    Expand { input: usize, map: Vec<usize> },
    Dropout { input: usize, mask: Vec<f64> },
    BatchNorm { input: usize, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Per-channel batch statistics returned by [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, one per tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index()).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index())
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[usize],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        let op = if tracked { op() } else { Op::Leaf };
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), tracked, op });
        Ok(Var { tape: self.id, index })
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, tracked: requires_grad, op: Op::Leaf });
        Var { tape: self.id, index }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].tracked).unwrap_or(false)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let i = self.idx(x)?;
        let shape = self.node(i).value.shape().to_vec();
        let data = self.node(i).value.data().iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, &[i], || op(i))
    }

    fn same_shape(&self, name: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.node(a).value.shape(), self.node(b).value.shape());
        if sa != sb {
            return Err(Error::shape(name, shape_str(&[sa, sb])));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", shape_str(&[sa, sb])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.node(ia).value.data(), self.node(ib).value.data(), m, k, n);
        self.push("matmul", vec![m, n], data, &[ia, ib], || Op::MatMul(ia, ib))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.node(i).value.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", shape_str(&[s])));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.node(i).value.data(), r, c);
        self.push("transpose", vec![c, r], data, &[i], || Op::Transpose(i))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ia, ib)?;
        let data = self
            .node(ia)
            .value
            .data()
            .iter()
            .zip(self.node(ib).value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(ia).value.shape().to_vec();
        self.push(name, shape, data, &[ia, ib], || op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("elementwise_mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary("scale", x, |v| k * v, |i| Op::Scale(i, k))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::Shift)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, libm::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, libm::log, Op::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, libm::exp, Op::Exp)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| if v > floor { v } else { floor }, |i| Op::ClampMin(i, floor))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let shape = self.node(i).value.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax_lastdim", "rank 0".into()))?;
        let mut data = self.node(i).value.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax_lastdim", shape, data, &[i], || Op::Softmax(i))
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let i = self.idx(x)?;
        let shape = self.node(i).value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = kernels::axis_split(&shape, axis);
        let src = self.node(i).value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let s = &src[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / ext as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(name, out_shape, data, &[i], || if mean { Op::MeanAxis(i, axis) } else { Op::SumAxis(i, axis) })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s: f64 = self.node(i).value.data().iter().sum();
        self.push("sum", Vec::new(), vec![s], &[i], || Op::SumAll(i))
    }

    fn conv(&mut self, name: &'static str, x: Var, k: Var, geom: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(k)?);
        let data = geom.forward(self.node(ix).value.data(), self.node(ik).value.data());
        self.push(name, shape, data, &[ix, ik], || Op::Conv(ix, ik, geom))
    }

    /// Stride-1 zero-padded convolution; `x: [N,H,W,Cin]`, `k: [KH,KW,Cin,Cout]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        self.idx(x)?;
        self.idx(k)?;
        let (sx, sk) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] || sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(Error::shape("conv2d", shape_str(&[&sx, &sk])));
        }
        let geom = ConvGeom { batch: sx[0], dims: [1, sx[1], sx[2]], kernel: [1, sk[0], sk[1]], c_in: sk[2], c_out: sk[3] };
        self.conv("conv2d", x, k, geom, vec![sx[0], sx[1], sx[2], sk[3]])
    }

    /// Stride-1 zero-padded convolution; `x: [N,T,H,W,Cin]`, `k: [KT,KH,KW,Cin,Cout]` with odd kernel extents.
    pub fn conv3d(&mut self, x: Var, k: Var) -> Result<Var> {
        self.idx(x)?;
        self.idx(k)?;
        let (sx, sk) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if sx.len() != 5 || sk.len() != 5 || sx[4] != sk[3] || sk[..3].iter().any(|d| d % 2 == 0) {
            return Err(Error::shape("conv3d", shape_str(&[&sx, &sk])));
        }
        let geom = ConvGeom {
            batch: sx[0],
            dims: [sx[1], sx[2], sx[3]],
            kernel: [sk[0], sk[1], sk[2]],
            c_in: sk[3],
            c_out: sk[4],
        };
        self.conv("conv3d", x, k, geom, vec![sx[0], sx[1], sx[2], sx[3], sk[4]])
    }

    /// Non-overlapping average pooling of `[N,T,H,W,C]`; extents must divide evenly.
    pub fn avg_pool3d(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.node(i).value.shape().to_vec();
        if s.len() != 5 || (0..3).any(|d| window[d] == 0 || s[d + 1] % window[d] != 0) {
            return Err(Error::shape("avg_pool3d", format!("{s:?} by window {window:?}")));
        }
        let geom = PoolGeom { batch: s[0], dims: [s[1], s[2], s[3]], window, channels: s[4] };
        let data = geom.forward(self.node(i).value.data());
        let [t, h, w] = geom.out_dims();
        self.push("avg_pool3d", vec![s[0], t, h, w, s[4]], data, &[i], || Op::AvgPool(i, geom))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.node(i).value.shape();
        if shape.iter().product::<usize>() != s.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", shape_str(&[s, shape])));
        }
        let data = self.node(i).value.data().to_vec();
        self.push("reshape", shape.to_vec(), data, &[i], || Op::Reshape(i))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| Error::shape("concat", "no inputs".into()))?;
        let base = self.node(*first).value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.node(i).value.shape();
            let ok = s.len() == base.len() && (0..s.len()).all(|d| d == axis || s[d] == base[d]);
            if !ok {
                return Err(Error::shape("concat", shape_str(&[&base, s])));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let ext = self.node(i).value.shape()[axis];
                data.extend_from_slice(&self.node(i).value.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, data, &ids, || Op::Concat(ids.clone(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.node(i).value.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, ext, inner) = kernels::axis_split(&s, axis);
        let src = self.node(i).value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, data, &[i], || Op::Slice { input: i, axis, start })
    }

    /// `v / sqrt(sum v^2 + eps)` along the last axis.
    pub fn l2_normalize_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let i = self.idx(x)?;
        let shape = self.node(i).value.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize_eps", "rank 0".into()))?;
        let mut data = self.node(i).value.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let s = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() + eps);
            row.iter_mut().for_each(|v| *v /= s);
            norms.push(s);
        }
        self.push("l2_normalize_eps", shape, data, &[i], || Op::L2Normalize { input: i, norms })
    }

    fn broadcast_check(&self, name: &'static str, full: &[usize], reduced: &[usize], axes: &[usize]) -> Result<()> {
        let sorted = axes.windows(2).all(|w| w[0] < w[1]);
        let expect: Vec<usize> = (0..full.len()).filter(|a| !axes.contains(a)).map(|a| full[a]).collect();
        if !sorted || axes.iter().any(|&a| a >= full.len()) || expect != reduced {
            return Err(Error::shape(name, format!("{full:?} vs {reduced:?} over axes {axes:?}")));
        }
        Ok(())
    }

    /// `a * b` where `b` has `a`'s shape with `axes` removed and is repeated along them.
    pub fn broadcast_mul(&mut self, a: Var, b: Var, axes: &[usize]) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let full = self.node(ia).value.shape().to_vec();
        self.broadcast_check("broadcast_mul", &full, self.node(ib).value.shape(), axes)?;
        let map = kernels::broadcast_map(&full, axes);
        let (av, bv) = (self.node(ia).value.data(), self.node(ib).value.data());
        let data = av.iter().zip(&map).map(|(&x, &j)| x * bv[j]).collect();
        self.push("broadcast_mul", full, data, &[ia, ib], || Op::BroadcastMul { a: ia, b: ib, map })
    }

    /// `a + b` with the same broadcasting rule as [`Tape::broadcast_mul`].
    pub fn broadcast_add(&mut self, a: Var, b: Var, axes: &[usize]) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let full = self.node(ia).value.shape().to_vec();
        self.broadcast_check("broadcast_add", &full, self.node(ib).value.shape(), axes)?;
        let map = kernels::broadcast_map(&full, axes);
        let (av, bv) = (self.node(ia).value.data(), self.node(ib).value.data());
        let data = av.iter().zip(&map).map(|(&x, &j)| x + bv[j]).collect();
        self.push("broadcast_add", full, data, &[ia, ib], || Op::BroadcastAdd { a: ia, b: ib, map })
    }

    /// Duplicates `x` along the inserted `axes` to reach `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize], axes: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        self.broadcast_check("expand", shape, self.node(i).value.shape(), axes)?;
        let map = kernels::broadcast_map(shape, axes);
        let src = self.node(i).value.data();
        let data = map.iter().map(|&j| src[j]).collect();
        self.push("expand", shape.to_vec(), data, &[i], || Op::Expand { input: i, map })
    }

    /// Inverted dropout: zeroes each entry with probability `rate`, scales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let i = self.idx(x)?;
        let keep = 1.0 / (1.0 - rate);
        let n = self.node(i).value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = self.node(i).value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.node(i).value.shape().to_vec();
        self.push("dropout", shape, data, &[i], || Op::Dropout { input: i, mask })
    }

    /// Normalizes each channel (last axis) with statistics over every other axis.
    /// Returns the normalized tensor and the (biased) batch statistics.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let i = self.idx(x)?;
        let shape = self.node(i).value.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("batch_norm", "rank 0".into()))?;
        let src = self.node(i).value.data();
        let count = (src.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut data = src.to_vec();
        for row in data.chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let out = self.push("batch_norm", shape, data, &[i], || Op::BatchNorm { input: i, inv_std })?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.idx(root).map_err(|_| Error::InvalidRoot)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::InvalidRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=r).map(|_| None).collect();
        grads[r] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let y = node.value.data();
            let mut send = |j: usize, contrib: Vec<f64>| accumulate(&mut grads, j, contrib);
            let tracked = |j: usize| self.nodes[j].tracked;
            let val = |j: usize| self.nodes[j].value.data();
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                &Op::MatMul(a, b) => {
                    let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if tracked(a) {
                        send(a, kernels::matmul_grad_a(&g, val(b), m, k, n));
                    }
                    if tracked(b) {
                        send(b, kernels::matmul_grad_b(val(a), &g, m, k, n));
                    }
                }
                &Op::Transpose(a) => {
                    let s = node.value.shape();
                    send(a, kernels::transpose(&g, s[0], s[1]));
                }
                &Op::Add(a, b) => {
                    if tracked(a) {
                        send(a, g.clone());
                    }
                    if tracked(b) {
                        send(b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if tracked(a) {
                        send(a, g.clone());
                    }
                    if tracked(b) {
                        send(b, g.iter().map(|v| -v).collect());
                    }
                }
                &Op::Mul(a, b) => {
                    if tracked(a) {
                        send(a, g.iter().zip(val(b)).map(|(g, v)| g * v).collect());
                    }
                    if tracked(b) {
                        send(b, g.iter().zip(val(a)).map(|(g, v)| g * v).collect());
                    }
                }
                &Op::Scale(a, k) => send(a, g.iter().map(|v| v * k).collect()),
                &Op::Shift(a) => send(a, g),
                &Op::Tanh(a) => send(a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
                &Op::Sigmoid(a) => send(a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
                &Op::Relu(a) => {
                    send(a, g.iter().zip(val(a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())
                }
                &Op::Log(a) => send(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
                &Op::Exp(a) => send(a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                &Op::ClampMin(a, floor) => {
                    send(a, g.iter().zip(val(a)).map(|(g, x)| if *x > floor { *g } else { 0.0 }).collect())
                }
                &Op::Softmax(a) => {
                    let d = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in xr.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(a, gx);
                }
                &Op::SumAxis(a, axis) | &Op::MeanAxis(a, axis) => {
                    let shape = self.nodes[a].value.shape();
                    let (outer, ext, inner) = kernels::axis_split(shape, axis);
                    let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / ext as f64 } else { 1.0 };
                    let mut gx = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        for e in 0..ext {
                            for n in 0..inner {
                                gx[(o * ext + e) * inner + n] = g[o * inner + n] * scale;
                            }
                        }
                    }
                    send(a, gx);
                }
                &Op::SumAll(a) => send(a, vec![g[0]; self.nodes[a].value.len()]),
                &Op::Conv(x, k, geom) => {
                    if tracked(x) {
                        send(x, geom.grad_input(&g, val(k)));
                    }
                    if tracked(k) {
                        send(k, geom.grad_kernel(&g, val(x)));
                    }
                }
                &Op::AvgPool(a, geom) => send(a, geom.backward(&g)),
                &Op::Reshape(a) => send(a, g),
                Op::Concat(ids, axis) => {
                    let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis];
                    let mut offset = 0;
                    for &j in ids {
                        let ext = self.nodes[j].value.shape()[*axis];
                        if tracked(j) {
                            let mut gx = Vec::with_capacity(outer * ext * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                gx.extend_from_slice(&g[s..s + ext * inner]);
                            }
                            send(j, gx);
                        }
                        offset += ext;
                    }
                }
                &Op::Slice { input, axis, start } => {
                    let shape = self.nodes[input].value.shape();
                    let (outer, ext, inner) = kernels::axis_split(shape, axis);
                    let len = node.value.shape()[axis];
                    let mut gx = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(input, gx);
                }
                Op::L2Normalize { input, norms } => {
                    let d = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for (((gr, yr), xr), s) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).zip(norms) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in xr.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) / s;
                        }
                    }
                    send(*input, gx);
                }
                Op::BroadcastMul { a, b, map } => {
                    let (a, b) = (*a, *b);
                    if tracked(a) {
                        let bv = val(b);
                        send(a, g.iter().zip(map).map(|(g, &j)| g * bv[j]).collect());
                    }
                    if tracked(b) {
                        let mut gb = vec![0.0; self.nodes[b].value.len()];
                        for ((gv, av), &j) in g.iter().zip(val(a)).zip(map) {
                            gb[j] += gv * av;
                        }
                        send(b, gb);
                    }
                }
                Op::BroadcastAdd { a, b, map } => {
                    let (a, b) = (*a, *b);
                    if tracked(b) {
                        let mut gb = vec![0.0; self.nodes[b].value.len()];
                        for (gv, &j) in g.iter().zip(map) {
                            gb[j] += gv;
                        }
                        send(b, gb);
                    }
                    if tracked(a) {
                        send(a, g);
                    }
                }
                Op::Expand { input, map } => {
                    let mut gx = vec![0.0; self.nodes[*input].value.len()];
                    for (gv, &j) in g.iter().zip(map) {
                        gx[j] += gv;
                    }
                    send(*input, gx);
                }
                Op::Dropout { input, mask } => send(*input, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
                Op::BatchNorm { input, inv_std } => {
                    let c = inv_std.len();
                    let count = (g.len() / c) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gy = vec![0.0; c];
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        for ch in 0..c {
                            sum_g[ch] += gr[ch];
                            sum_gy[ch] += gr[ch] * yr[ch];
                        }
                    }
                    let mut gx = vec![0.0; g.len()];
                    for ((xr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        for ch in 0..c {
                            xr[ch] = inv_std[ch] / count * (count * gr[ch] - sum_g[ch] - yr[ch] * sum_gy[ch]);
                        }
                    }
                    send(*input, gx);
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for t in out.iter().flatten() {
            check_finite("backward", t.data())?;
        }
        Ok(Gradients { tape: self.id, grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, contrib: Vec<f64>) {
    match &mut grads[j] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}
