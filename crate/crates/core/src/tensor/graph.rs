use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::kernels::{self, ConvGeom, Mat};
use super::{axis_split, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear,
    Gelu,
    Sigmoid,
    LayerNorm { axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { axis: usize },
    MaskedSoftmax { axis: usize, mask: Vec<bool> },
    Conv2d { geom: ConvGeom, bias: bool },
    Deconv2d { geom: ConvGeom, bias: bool },
    MaxOverLast { argmax: Vec<Option<usize>> },
    RepeatLast { n: usize },
    NearestUpsample { factor: usize },
    Concat { axis: usize },
    Add,
    Mul,
    MulBcast,
    Scale(f64),
    Sum,
    Reshape,
    Slice { axis: usize, start: usize },
    ScatterVoxels { targets: Vec<usize>, depth: usize, plane: usize },
    GatherPoints { index: Vec<Option<usize>> },
    Interleave2x2,
    BoxRegressionLoss { target: Tensor, weight: Tensor, code: usize, sin_index: Option<usize> },
    FocalLoss { labels: Tensor, weights: Tensor, alpha: f64, gamma: f64 },
    BceLoss { targets: Tensor, weights: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear => "linear",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::MaxOverLast { .. } => "max_over_points",
            Op::RepeatLast { .. } => "repeat_last",
            Op::NearestUpsample { .. } => "nearest_upsample",
            Op::Concat { .. } => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MulBcast => "mul_bcast",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::ScatterVoxels { .. } => "scatter_voxels",
            Op::GatherPoints { .. } => "gather_points",
            Op::Interleave2x2 => "interleave2x2",
            Op::BoxRegressionLoss { .. } => "box_regression_loss",
            Op::FocalLoss { .. } => "focal_loss",
            Op::BceLoss { .. } => "bce_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// A single forward pass recorded in topological order.
///
/// Nodes are appended as operations run, so the node vector is already a
/// topological order and backward is a reverse sweep over it.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    x * gelu_cdf(x)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Clamped probability and `d p_clamped / d logit`.
fn clamped_sigmoid(z: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if p < PROB_CLAMP {
        (PROB_CLAMP, 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Focal term `-a (1-pt)^g ln pt` and its derivative in `pt`.
pub fn focal_term(pt: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - pt;
    let loss = -alpha * q.powf(gamma) * pt.ln();
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    let d = -alpha * (-dq * pt.ln() + q.powf(gamma) / pt);
    (loss, d)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` values held by recorded node outputs.
    pub fn stored_values(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new())
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node so
    /// fan-out gradients accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .and_then(|s| s.get(name))
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.is_empty() || xs[0] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (cout, cin) = (ws[0], ws[1]);
        let mut shape = xs.to_vec();
        shape[0] = cout;
        let m = self.value(x).numel() / cin.max(1);
        let mut out = vec![0.0; cout * m];
        for (o, row) in out.chunks_mut(m.max(1)).enumerate().take(cout) {
            row.fill(self.value(b).data()[o]);
        }
        kernels::gemm(
            self.value(w).data(),
            Mat::dense(cout, cin),
            self.value(x).data(),
            Mat::dense(cin, m),
            &mut out,
            Mat::dense(cout, m),
            1.0,
        );
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear, vec![x, w, b]))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, op, vec![x])
    }

    /// Exact-CDF GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu, gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid, sigmoid)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(s), |v| v * s)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(scale) != [xs[axis]] || self.shape(shift) != [xs[axis]] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {xs:?} axis {axis}, scale {:?}, shift {:?}", self.shape(scale), self.shape(shift)),
            ));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            let base = o * n * inner;
            let mut mean = vec![0.0; inner];
            for j in 0..n {
                for (m, v) in mean.iter_mut().zip(&xv[base + j * inner..base + (j + 1) * inner]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; inner];
            for j in 0..n {
                for ((s, v), m) in var.iter_mut().zip(&xv[base + j * inner..base + (j + 1) * inner]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let istd: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + LAYER_NORM_EPS).sqrt()).collect();
            for j in 0..n {
                for i in 0..inner {
                    let k = base + j * inner + i;
                    xhat[k] = (xv[k] - mean[i]) * istd[i];
                    out[k] = xhat[k] * gv[j] + bv[j];
                }
            }
            inv_std[o * inner..(o + 1) * inner].copy_from_slice(&istd);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::LayerNorm { axis, xhat, inv_std }, vec![x, scale, shift]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mask = vec![true; self.value(x).numel()];
        let value = self.softmax_value(x, axis, &mask, "softmax")?;
        Ok(self.push(value, Op::Softmax { axis }, vec![x]))
    }

    /// Softmax restricted to entries where `mask` is set; masked entries
    /// produce zero. A slice with no unmasked entries is all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], axis: usize) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for x {:?}", mask.len(), self.shape(x)),
            ));
        }
        let value = self.softmax_value(x, axis, mask, "masked_softmax")?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                axis,
                mask: mask.to_vec(),
            },
            vec![x],
        ))
    }

    fn softmax_value(&self, x: Var, axis: usize, mask: &[bool], op: &'static str) -> Result<Tensor> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(Error::shape(op, format!("axis {axis} for {xs:?}")));
        }
        let (outer, n, inner) = axis_split(xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n)
                    .filter(|&j| mask[idx(j)])
                    .map(|j| xv[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in (0..n).filter(|&j| mask[idx(j)]) {
                    let e = (xv[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in (0..n).filter(|&j| mask[idx(j)]) {
                    out[idx(j)] /= total;
                }
            }
        }
        Tensor::new(xs, out)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, k, b, |cin, h, w, cout, kk| {
            ConvGeom::conv(cin, h, w, cout, kk, stride, padding)
        })?;
        let mut out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        self.add_channel_bias(&mut out, b, geom.ho * geom.wo);
        let value = Tensor::new(&[geom.cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { geom, bias: b.is_some() }, inputs))
    }

    /// Transposed convolution with kernel layout `(C_out, C_in, k, k)`.
    /// Output side is `(H-1)·stride - 2·padding + k + output_padding`.
    pub fn deconv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("deconv2d", x, k, b, |cin, h, w, cout, kk| {
            ConvGeom::deconv(cin, h, w, cout, kk, stride, padding, output_padding)
        })?;
        let mut out = kernels::deconv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        self.add_channel_bias(&mut out, b, geom.ho * geom.wo);
        let value = Tensor::new(&[geom.cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::Deconv2d { geom, bias: b.is_some() }, inputs))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        k: Var,
        b: Option<Var>,
        make: impl Fn(usize, usize, usize, usize, usize) -> Option<ConvGeom>,
    ) -> Result<ConvGeom> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        let bad = || Error::shape(op, format!("x {xs:?}, kernel {ks:?}"));
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(bad());
        }
        if let Some(b) = b {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape(op, format!("bias {:?} for kernel {ks:?}", self.shape(b))));
            }
        }
        make(xs[0], xs[1], xs[2], ks[0], ks[2]).ok_or_else(bad)
    }

    fn add_channel_bias(&self, out: &mut [f64], b: Option<Var>, plane: usize) {
        if let Some(b) = b {
            for (row, bv) in out.chunks_mut(plane).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    /// Max over the last axis of `(C, V, N)` restricted to `mask` (length
    /// `V·N`), giving `(C, V, 1)`. Empty voxels yield zero; ties resolve to
    /// the first maximal point.
    pub fn max_over_points(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || mask.len() != xs[1] * xs[2] {
            return Err(Error::shape(
                "max_over_points",
                format!("x {xs:?} with mask of {}", mask.len()),
            ));
        }
        let (c, v, n) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * v];
        let mut argmax = vec![None; c * v];
        for ci in 0..c {
            for vi in 0..v {
                let mut best: Option<(usize, f64)> = None;
                for ni in 0..n {
                    if !mask[vi * n + ni] {
                        continue;
                    }
                    let val = xv[(ci * v + vi) * n + ni];
                    if best.is_none_or(|(_, b)| val > b) {
                        best = Some((ni, val));
                    }
                }
                if let Some((ni, val)) = best {
                    out[ci * v + vi] = val;
                    argmax[ci * v + vi] = Some(ni);
                }
            }
        }
        let value = Tensor::new(&[c, v, 1], out)?;
        Ok(self.push(value, Op::MaxOverLast { argmax }, vec![x]))
    }

    /// `(C, V, 1)` → `(C, V, n)`.
    pub fn repeat_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != 1 {
            return Err(Error::shape("repeat_last", format!("{xs:?}")));
        }
        let mut out = Vec::with_capacity(xs[0] * xs[1] * n);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, n));
        }
        let value = Tensor::new(&[xs[0], xs[1], n], out)?;
        Ok(self.push(value, Op::RepeatLast { n }, vec![x]))
    }

    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::shape("nearest_upsample", format!("{xs:?} x{factor}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(ci * ho + oy) * wo + ox] = xv[(ci * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(value, Op::NearestUpsample { factor }, vec![x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { axis }, xs.to_vec()))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op.name(), format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add, |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul, |x, y| x * y)
    }

    /// `x (C, ...) ⊙ w (1, ...)` with `w` broadcast along axis 0.
    pub fn mul_bcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.is_empty() || ws.len() != xs.len() || ws[0] != 1 || ws[1..] != xs[1..] {
            return Err(Error::shape("mul_bcast", format!("x {xs:?}, w {ws:?}")));
        }
        let wv = self.value(w).data();
        let plane = wv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wv[i % plane])
            .collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::MulBcast, vec![x, w]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape, vec![x]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape("slice", format!("{xs:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { axis, start }, vec![x]))
    }

    /// Scatters per-voxel vectors `(C, V, 1)` into a dense `(C·D, H, W)` map,
    /// with channel index `c·D + d`. Cells without a voxel stay zero.
    pub fn scatter_voxels(&mut self, x: Var, coords: &[[usize; 3]], dims: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != 1 || xs[1] != coords.len() {
            return Err(Error::shape(
                "scatter_voxels",
                format!("x {xs:?} with {} coordinates", coords.len()),
            ));
        }
        let [d, h, w] = dims;
        let plane = h * w;
        let c = xs[0];
        let mut seen = vec![false; d * plane];
        let mut targets = Vec::with_capacity(coords.len());
        for (i, &[zi, yi, xi]) in coords.iter().enumerate() {
            if zi >= d || yi >= h || xi >= w {
                return Err(Error::Invalid(format!(
                    "scatter_voxels: voxel {i} at {:?} outside grid {dims:?}",
                    [zi, yi, xi]
                )));
            }
            let cell = (zi * h + yi) * w + xi;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Invalid(format!(
                    "scatter_voxels: duplicate voxel coordinate {:?}",
                    [zi, yi, xi]
                )));
            }
            targets.push(cell);
        }
        let xv = self.value(x).data();
        let v = coords.len();
        let mut out = vec![0.0; c * d * plane];
        for ci in 0..c {
            for (vi, &cell) in targets.iter().enumerate() {
                out[ci * d * plane + cell] = xv[ci * v + vi];
            }
        }
        let value = Tensor::new(&[c * d, h, w], out)?;
        Ok(self.push(value, Op::ScatterVoxels { targets, depth: d, plane }, vec![x]))
    }

    /// Gathers point slots of `(C, V, N)` into `(C, V', K)`; `index` has
    /// `V'·K` entries of `(voxel, slot)`, `None` producing zero padding.
    pub fn gather_points(&mut self, x: Var, index: &[Option<(usize, usize)>], out_voxels: usize, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index.len() != out_voxels * k {
            return Err(Error::shape(
                "gather_points",
                format!("x {xs:?}, {} indices for ({out_voxels}, {k})", index.len()),
            ));
        }
        let (c, v, n) = (xs[0], xs[1], xs[2]);
        let mut flat = Vec::with_capacity(index.len());
        for &e in index {
            flat.push(match e {
                Some((vi, ni)) if vi < v && ni < n => Some(vi * n + ni),
                Some(p) => return Err(Error::shape("gather_points", format!("index {p:?} outside {xs:?}"))),
                None => None,
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * index.len()];
        for ci in 0..c {
            for (j, src) in flat.iter().enumerate() {
                if let Some(s) = src {
                    out[ci * index.len() + j] = xv[ci * v * n + s];
                }
            }
        }
        let value = Tensor::new(&[c, out_voxels, k], out)?;
        Ok(self.push(value, Op::GatherPoints { index: flat }, vec![x]))
    }

    /// Interleaves two `(C, H, W)` maps onto a `(C, 2H, 2W)` canvas: `a` at
    /// offsets (0,0) and (0,1), `b` at (1,0) and (1,1) of each 2×2 block.
    pub fn interleave2x2(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || self.shape(b) != s.as_slice() {
            return Err(Error::shape("interleave2x2", format!("{s:?} vs {:?}", self.shape(b))));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = (ci * h + y) * w + x;
                    let top = (ci * 2 * h + 2 * y) * 2 * w + 2 * x;
                    let bottom = top + 2 * w;
                    out[top] = av[src];
                    out[top + 1] = av[src];
                    out[bottom] = bv[src];
                    out[bottom + 1] = bv[src];
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Interleave2x2, vec![a, b]))
    }

    /// `Σ weight[a,h,w] · Σ_k smoothL1(e_k)` over a `(A·code, H, W)` map,
    /// where `e_k = pred - target`, or `sin(pred - target)` on `sin_index`.
    pub fn box_regression_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        weight: &Tensor,
        code: usize,
        sin_index: Option<usize>,
    ) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        let ok = ps.len() == 3
            && target.shape() == ps.as_slice()
            && code > 0
            && ps[0] % code == 0
            && weight.shape() == [ps[0] / code, ps[1], ps[2]];
        if !ok {
            return Err(Error::shape(
                "box_regression_loss",
                format!("pred {ps:?}, target {:?}, weight {:?}, code {code}", target.shape(), weight.shape()),
            ));
        }
        let plane = ps[1] * ps[2];
        let pv = self.value(pred).data();
        let mut total = 0.0;
        for (ch, (p, t)) in pv.chunks(plane).zip(target.data().chunks(plane)).enumerate() {
            let (a, k) = (ch / code, ch % code);
            let wrow = &weight.data()[a * plane..(a + 1) * plane];
            for i in 0..plane {
                if wrow[i] == 0.0 {
                    continue;
                }
                let e = if Some(k) == sin_index { (p[i] - t[i]).sin() } else { p[i] - t[i] };
                total += wrow[i] * smooth_l1(e);
            }
        }
        let op = Op::BoxRegressionLoss {
            target: target.clone(),
            weight: weight.clone(),
            code,
            sin_index,
        };
        Ok(self.push(Tensor::scalar(total), op, vec![pred]))
    }

    /// Sigmoid focal loss `Σ w · (-α_t (1-p_t)^γ ln p_t)` with `p` clamped to
    /// `[1e-7, 1-1e-7]`; `labels` are 1 for positives and 0 for negatives.
    pub fn focal_loss(&mut self, logits: Var, labels: &Tensor, weights: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        self.check_elementwise_targets("focal_loss", logits, labels, weights)?;
        let mut total = 0.0;
        for ((&z, &y), &w) in self.value(logits).data().iter().zip(labels.data()).zip(weights.data()) {
            if w == 0.0 {
                continue;
            }
            let (p, _) = clamped_sigmoid(z);
            let (pt, at) = if y > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            total += w * focal_term(pt, at, gamma).0;
        }
        let op = Op::FocalLoss {
            labels: labels.clone(),
            weights: weights.clone(),
            alpha,
            gamma,
        };
        Ok(self.push(Tensor::scalar(total), op, vec![logits]))
    }

    /// Binary cross-entropy on sigmoid probabilities, clamped as in
    /// [`Graph::focal_loss`].
    pub fn bce_loss(&mut self, logits: Var, targets: &Tensor, weights: &Tensor) -> Result<Var> {
        self.check_elementwise_targets("bce_loss", logits, targets, weights)?;
        let mut total = 0.0;
        for ((&z, &t), &w) in self.value(logits).data().iter().zip(targets.data()).zip(weights.data()) {
            if w == 0.0 {
                continue;
            }
            let (p, _) = clamped_sigmoid(z);
            total += w * (-t * p.ln() - (1.0 - t) * (1.0 - p).ln());
        }
        let op = Op::BceLoss {
            targets: targets.clone(),
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(total), op, vec![logits]))
    }

    fn check_elementwise_targets(&self, op: &'static str, x: Var, t: &Tensor, w: &Tensor) -> Result<()> {
        let s = self.shape(x);
        if t.shape() != s || w.shape() != s {
            return Err(Error::shape(
                op,
                format!("logits {s:?}, targets {:?}, weights {:?}", t.shape(), w.shape()),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for every
    /// differentiable leaf (inputs and parameters).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape(), data);
        let gd = g.data();
        let out = &node.value;
        let ins = &node.inputs;

        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear => {
                let (x, w) = (val(ins[0]), val(ins[1]));
                let (cout, cin) = (w.shape()[0], w.shape()[1]);
                let m = x.numel() / cin.max(1);
                let mut dx = None;
                if wants(0) {
                    let mut d = vec![0.0; x.numel()];
                    kernels::gemm(w.data(), Mat::dense(cout, cin).t(), gd, Mat::dense(cout, m), &mut d, Mat::dense(cin, m), 0.0);
                    dx = Some(like(ins[0], d)?);
                }
                let mut dw = vec![0.0; cout * cin];
                kernels::gemm(gd, Mat::dense(cout, m), x.data(), Mat::dense(cin, m).t(), &mut dw, Mat::dense(cout, cin), 0.0);
                let db: Vec<f64> = gd.chunks(m.max(1)).take(cout).map(|r| r.iter().sum()).collect();
                vec![dx, Some(like(ins[1], dw)?), Some(like(ins[2], db)?)]
            }
            Op::Gelu => {
                let x = val(ins[0]).data();
                let d = x.iter().zip(gd).map(|(&v, &gv)| gv * (gelu_cdf(v) + v * gelu_pdf(v))).collect();
                vec![Some(like(ins[0], d)?)]
            }
            Op::Sigmoid => {
                let d = out.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                vec![Some(like(ins[0], d)?)]
            }
            Op::Scale(s) => vec![Some(like(ins[0], gd.iter().map(|v| v * s).collect())?)],
            Op::LayerNorm { axis, xhat, inv_std } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let gamma = val(ins[1]).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let k = idx(j);
                            let dxh = gd[k] * gamma[j];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[k];
                            dgamma[j] += gd[k] * xhat[k];
                            dbeta[j] += gd[k];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            let k = idx(j);
                            dx[k] = is * (gd[k] * gamma[j] - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
                vec![Some(like(ins[0], dx)?), Some(like(ins[1], dgamma)?), Some(like(ins[2], dbeta)?)]
            }
            Op::Softmax { axis } => vec![Some(softmax_backward(out, gd, *axis, None)?)],
            Op::MaskedSoftmax { axis, mask } => vec![Some(softmax_backward(out, gd, *axis, Some(mask))?)],
            Op::Conv2d { geom, bias } | Op::Deconv2d { geom, bias } => {
                let (x, k) = (val(ins[0]), val(ins[1]));
                let (dx, dk) = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(x.data(), k.data(), gd, geom)
                } else {
                    kernels::deconv2d_backward(x.data(), k.data(), gd, geom)
                };
                let mut r = vec![wants(0).then(|| like(ins[0], dx)).transpose()?, Some(like(ins[1], dk)?)];
                if *bias {
                    let plane = geom.ho * geom.wo;
                    let db = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                    r.push(Some(like(ins[2], db)?));
                }
                r
            }
            Op::MaxOverLast { argmax } => {
                let xs = val(ins[0]).shape();
                let (v, n) = (xs[1], xs[2]);
                let mut dx = vec![0.0; val(ins[0]).numel()];
                for (cv, am) in argmax.iter().enumerate() {
                    if let Some(ni) = am {
                        dx[cv * n + ni] += gd[cv];
                    }
                }
                debug_assert_eq!(argmax.len(), xs[0] * v);
                vec![Some(like(ins[0], dx)?)]
            }
            Op::RepeatLast { n } => {
                let d = gd.chunks(*n).map(|c| c.iter().sum()).collect();
                vec![Some(like(ins[0], d)?)]
            }
            Op::NearestUpsample { factor } => {
                let xs = val(ins[0]).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[(ci * h + oy / factor) * w + ox / factor] += gd[(ci * ho + oy) * wo + ox];
                        }
                    }
                }
                vec![Some(like(ins[0], dx)?)]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut r = Vec::with_capacity(ins.len());
                for &v in ins {
                    let len = val(v).shape()[*axis];
                    let mut d = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    r.push(Some(like(v, d)?));
                }
                r
            }
            Op::Add => vec![Some(like(ins[0], gd.to_vec())?), Some(like(ins[1], gd.to_vec())?)],
            Op::Mul => {
                let (a, b) = (val(ins[0]).data(), val(ins[1]).data());
                let da = gd.iter().zip(b).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(a).map(|(g, x)| g * x).collect();
                vec![Some(like(ins[0], da)?), Some(like(ins[1], db)?)]
            }
            Op::MulBcast => {
                let (x, w) = (val(ins[0]).data(), val(ins[1]).data());
                let plane = w.len();
                let dx = gd.iter().enumerate().map(|(i, g)| g * w[i % plane]).collect();
                let mut dw = vec![0.0; plane];
                for (i, (g, xv)) in gd.iter().zip(x).enumerate() {
                    dw[i % plane] += g * xv;
                }
                vec![Some(like(ins[0], dx)?), Some(like(ins[1], dw)?)]
            }
            Op::Sum => vec![Some(Tensor::full(val(ins[0]).shape(), gd[0]))],
            Op::Reshape => vec![Some(like(ins[0], gd.to_vec())?)],
            Op::Slice { axis, start } => {
                let xs = val(ins[0]).shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; val(ins[0]).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(like(ins[0], dx)?)]
            }
            Op::ScatterVoxels { targets, depth, plane } => {
                let c = val(ins[0]).shape()[0];
                let v = targets.len();
                let mut dx = vec![0.0; c * v];
                for ci in 0..c {
                    for (vi, &cell) in targets.iter().enumerate() {
                        dx[ci * v + vi] = gd[ci * depth * plane + cell];
                    }
                }
                vec![Some(like(ins[0], dx)?)]
            }
            Op::GatherPoints { index } => {
                let xs = val(ins[0]).shape();
                let c = xs[0];
                let vn = xs[1] * xs[2];
                let mut dx = vec![0.0; c * vn];
                for ci in 0..c {
                    for (j, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            dx[ci * vn + s] += gd[ci * index.len() + j];
                        }
                    }
                }
                vec![Some(like(ins[0], dx)?)]
            }
            Op::Interleave2x2 => {
                let s = val(ins[0]).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut da = vec![0.0; c * h * w];
                let mut db = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let src = (ci * h + y) * w + x;
                            let top = (ci * 2 * h + 2 * y) * 2 * w + 2 * x;
                            let bottom = top + 2 * w;
                            da[src] = gd[top] + gd[top + 1];
                            db[src] = gd[bottom] + gd[bottom + 1];
                        }
                    }
                }
                vec![Some(like(ins[0], da)?), Some(like(ins[1], db)?)]
            }
            Op::BoxRegressionLoss {
                target,
                weight,
                code,
                sin_index,
            } => {
                let pred = val(ins[0]);
                let plane = pred.shape()[1] * pred.shape()[2];
                let mut d = vec![0.0; pred.numel()];
                for (ch, ((p, t), dch)) in pred
                    .data()
                    .chunks(plane)
                    .zip(target.data().chunks(plane))
                    .zip(d.chunks_mut(plane))
                    .enumerate()
                {
                    let (a, k) = (ch / code, ch % code);
                    let wrow = &weight.data()[a * plane..(a + 1) * plane];
                    for i in 0..plane {
                        if wrow[i] == 0.0 {
                            continue;
                        }
                        let diff = p[i] - t[i];
                        dch[i] = gd[0]
                            * wrow[i]
                            * if Some(k) == *sin_index {
                                smooth_l1_grad(diff.sin()) * diff.cos()
                            } else {
                                smooth_l1_grad(diff)
                            };
                    }
                }
                vec![Some(like(ins[0], d)?)]
            }
            Op::FocalLoss {
                labels,
                weights,
                alpha,
                gamma,
            } => {
                let z = val(ins[0]).data();
                let mut d = vec![0.0; z.len()];
                for (i, di) in d.iter_mut().enumerate() {
                    let w = weights.data()[i];
                    if w == 0.0 {
                        continue;
                    }
                    let (p, dp) = clamped_sigmoid(z[i]);
                    let positive = labels.data()[i] > 0.5;
                    let (pt, at, sign) = if positive { (p, *alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
                    *di = gd[0] * w * focal_term(pt, at, *gamma).1 * sign * dp;
                }
                vec![Some(like(ins[0], d)?)]
            }
            Op::BceLoss { targets, weights } => {
                let z = val(ins[0]).data();
                let mut d = vec![0.0; z.len()];
                for (i, di) in d.iter_mut().enumerate() {
                    let w = weights.data()[i];
                    if w == 0.0 {
                        continue;
                    }
                    let (p, dp) = clamped_sigmoid(z[i]);
                    let t = targets.data()[i];
                    // d/dp of -t ln p - (1-t) ln(1-p)
                    *di = gd[0] * w * (-t / p + (1.0 - t) / (1.0 - p)) * dp;
                }
                vec![Some(like(ins[0], d)?)]
            }
        })
    }
}

fn softmax_backward(y: &Tensor, gd: &[f64], axis: usize, mask: Option<&Vec<bool>>) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let yv = y.data();
    let mut dx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let live = |j: usize| mask.is_none_or(|m| m[idx(j)]);
            let dot: f64 = (0..n).filter(|&j| live(j)).map(|j| gd[idx(j)] * yv[idx(j)]).sum();
            for j in (0..n).filter(|&j| live(j)) {
                dx[idx(j)] = yv[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Gradients of a backward sweep, kept for differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every parameter touched by the forward pass,
    /// in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks `f` on parameters of the given shapes; the output is reduced
    /// with fixed random weights so every output element matters.
    fn check(shapes: &[(&str, &[usize])], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        for (n, s) in shapes {
            store.insert(*n, rand_tensor(&mut rng, s));
        }
        let probe = {
            let mut g = Graph::with_params(&store);
            let vars: Vec<Var> = shapes.iter().map(|(n, _)| g.param(n).unwrap()).collect();
            let y = f(&mut g, &vars).unwrap();
            g.shape(y).to_vec()
        };
        let w = rand_tensor(&mut rng, &probe);
        let report = grad_check(&store, 1e-6, |g| {
            let vars: Vec<Var> = shapes.iter().map(|(n, _)| g.param(n).unwrap()).collect();
            let y = f(g, &vars)?;
            let c = g.constant(w.clone());
            let m = g.mul(y, c)?;
            Ok(g.sum(m))
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn elementwise_ops() {
        assert!(check(&[("x", &[3, 4])], |g, v| Ok(g.gelu(v[0]))) < 1e-8);
        assert!(check(&[("x", &[3, 4])], |g, v| Ok(g.sigmoid(v[0]))) < 1e-8);
        assert!(check(&[("x", &[3, 4])], |g, v| Ok(g.scale(v[0], -2.5))) < 1e-8);
        assert!(check(&[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.add(v[0], v[1])) < 1e-8);
        assert!(check(&[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.mul(v[0], v[1])) < 1e-8);
        assert!(check(&[("x", &[3, 2, 2]), ("w", &[1, 2, 2])], |g, v| g.mul_bcast(v[0], v[1])) < 1e-8);
    }

    #[test]
    fn linear_and_norm() {
        let lin = check(&[("x", &[4, 3, 2]), ("w", &[5, 4]), ("b", &[5])], |g, v| g.linear(v[0], v[1], v[2]));
        assert!(lin < 1e-8, "{lin}");
        let ln = check(&[("x", &[4, 3, 2]), ("s", &[4]), ("b", &[4])], |g, v| g.layer_norm(v[0], v[1], v[2], 0));
        assert!(ln < 1e-6, "{ln}");
    }

    #[test]
    fn softmaxes() {
        assert!(check(&[("x", &[3, 4])], |g, v| g.softmax(v[0], 0)) < 1e-8);
        let mask = [true, false, true, true, true, false, false, true];
        let e = check(&[("x", &[1, 2, 4])], |g, v| g.masked_softmax(v[0], &mask, 2));
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn convolutions() {
        let c = check(&[("x", &[2, 5, 5]), ("k", &[3, 2, 3, 3]), ("b", &[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        assert!(c < 1e-8, "{c}");
        let d = check(&[("x", &[2, 3, 3]), ("k", &[3, 2, 3, 3]), ("b", &[3])], |g, v| {
            g.deconv2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        });
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn point_and_voxel_ops() {
        let mask = [true, true, false, true, false, false];
        assert!(check(&[("x", &[2, 3, 2])], |g, v| g.max_over_points(v[0], &mask)) < 1e-8);
        assert!(check(&[("x", &[2, 3, 1])], |g, v| g.repeat_last(v[0], 4)) < 1e-8);
        let coords = [[1, 0, 1], [0, 1, 0], [1, 1, 1]];
        assert!(check(&[("x", &[2, 3, 1])], |g, v| g.scatter_voxels(v[0], &coords, [2, 2, 2])) < 1e-8);
        let idx = [Some((0, 1)), None, Some((2, 0)), Some((0, 1))];
        assert!(check(&[("x", &[2, 3, 2])], |g, v| g.gather_points(v[0], &idx, 2, 2)) < 1e-8);
    }

    #[test]
    fn layout_ops() {
        assert!(check(&[("x", &[2, 2, 3])], |g, v| g.nearest_upsample(v[0], 2)) < 1e-8);
        assert!(check(&[("a", &[2, 2, 3]), ("b", &[1, 2, 3])], |g, v| g.concat(&[v[0], v[1]], 0)) < 1e-8);
        assert!(check(&[("a", &[2, 2, 3]), ("b", &[2, 1, 3])], |g, v| g.concat(&[v[0], v[1]], 1)) < 1e-8);
        assert!(check(&[("x", &[2, 3, 2])], |g, v| g.reshape(v[0], &[6, 2])) < 1e-8);
        assert!(check(&[("x", &[4, 3])], |g, v| g.slice(v[0], 0, 1, 2)) < 1e-8);
        assert!(check(&[("a", &[2, 2, 2]), ("b", &[2, 2, 2])], |g, v| g.interleave2x2(v[0], v[1])) < 1e-8);
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = rand_tensor(&mut rng, &[14, 2, 2]);
        let weight = Tensor::from_fn(&[2, 2, 2], |i| if i % 3 == 0 { 0.0 } else { 0.7 });
        let r = check(&[("p", &[14, 2, 2])], |g, v| {
            g.box_regression_loss(v[0], &target, &weight, 7, Some(6))
        });
        assert!(r < 1e-6, "{r}");
        let labels = Tensor::from_fn(&[2, 3], |i| (i % 2) as f64);
        let w = Tensor::from_fn(&[2, 3], |i| if i == 4 { 0.0 } else { 1.0 });
        assert!(check(&[("z", &[2, 3])], |g, v| g.focal_loss(v[0], &labels, &w, 0.25, 2.0)) < 1e-6);
        assert!(check(&[("z", &[2, 3])], |g, v| g.bce_loss(v[0], &labels, &w)) < 1e-6);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let mut g = Graph::with_params(&store);
        let a = g.param("x").unwrap();
        let b = g.param("x").unwrap();
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("x").unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn focal_reference_values() {
        let (l, _) = focal_term(0.5, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        let (l0, _) = focal_term(0.3, 0.25, 0.0);
        assert!((l0 + 0.25 * 0.3f64.ln()).abs() < 1e-15);
    }
}
