use std::sync::Arc;

use super::{check_shape, linear_forward, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::noise::{sample_raw, NoiseSpec};
use crate::transform::{check_dim, materialize_with_jacobian, params_per_octave};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: (usize, usize, usize),
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    BroadcastRows {
        x: Var,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Gram {
        x: Var,
        c: usize,
        hw: usize,
    },
    SqDist {
        a: Var,
        b: Var,
        mean: bool,
    },
    Noise {
        transforms: Var,
        dim: usize,
        coords: Arc<Vec<f64>>,
        grad_u: Vec<f64>,
    },
    Transforms {
        raw: Var,
        dim: usize,
        jac: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Single-owner recording of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so parents always precede children.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].tracked)
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `y = x w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(dim_err("linear", xs, ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err("linear bias", ws, self.shape(b)));
            }
        }
        let y = linear_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), n, i, o);
        let tracked = self.any_tracked(&[Some(x), Some(w), b]);
        let value = Tensor::from_parts(vec![n, o], y);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                dims: (n, i, o),
            },
            tracked,
        ))
    }

    /// Cross-correlation of `x: [c, h, w]` with `k: [o, c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] || stride == 0 {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        let (c, h, w, o, kh, kw) = (xs[0], xs[1], xs[2], ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err("conv2d output size", &xs, &ks));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err("conv2d bias", &ks, self.shape(b)));
            }
        }
        let cols = im2col(self.data(x), &geom);
        let p = geom.positions();
        let mut y = vec![T::zero(); o * p];
        if let Some(b) = b {
            for (row, &bv) in y.chunks_exact_mut(p).zip(self.data(b)) {
                row.fill(bv);
            }
        }
        T::gemm(
            o,
            geom.rows(),
            p,
            self.data(k),
            false,
            &cols,
            false,
            &mut y,
            b.is_some(),
        );
        let tracked = self.any_tracked(&[Some(x), Some(k), b]);
        let value = Tensor::from_parts(vec![o, geom.oh, geom.ow], y);
        let cols = if tracked { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols,
            },
            tracked,
        ))
    }

    fn pool_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(dim_err(op, s, &[0, 2, 2]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2x2 max pooling with stride 2 on `[c, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "max_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut y = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(vec![c, oh, ow], y);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, tracked))
    }

    /// 2x2 average pooling with stride 2 on `[c, h, w]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let quarter = T::from_f64(0.25);
        let mut y = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let s = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
                    y.push(s * quarter);
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(vec![c, oh, ow], y);
        Ok(self.push(value, Op::AvgPool2 { x }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Relu { x }, tracked)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::LeakyRelu { x, slope }, tracked)
    }

    /// Per-channel normalization of `[c, h, w]` to zero mean, unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("instance_norm", &s, &[0, 0, 0]));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        if hw < 2 {
            return Err(Error::Degenerate {
                op: "instance_norm",
                reason: format!("spatial size {}x{} has a single element", s[1], s[2]),
            });
        }
        let src = self.data(x);
        let n = T::from_f64(hw as f64);
        let eps = T::from_f64(eps);
        let mut xhat = Vec::with_capacity(c * hw);
        let mut inv_std = Vec::with_capacity(c);
        for ch in src.chunks_exact(hw) {
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(ch.iter().map(|&v| (v - mean) * is));
        }
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(s, xhat.clone());
        Ok(self.push(value, Op::InstanceNorm { x, xhat, inv_std }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), y);
        let tracked = self.any_tracked(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), y);
        let tracked = self.any_tracked(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Scale { x, c }, tracked)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Sum { x }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Column-wise concatenation of `[n, k_j]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(dim_err("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &k) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.data(p)[row * k..(row + 1) * k]);
            }
        }
        let tracked = self.any_tracked(&parts.iter().map(|&p| Some(p)).collect::<Vec<_>>());
        let value = Tensor::from_parts(vec![n, total], y);
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(value, Op::ConcatCols { parts }, tracked))
    }

    /// Repeats a `[k]` or `[1, k]` row `n` times into `[n, k]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        let k = match s {
            [k] | [1, k] => *k,
            _ => return Err(dim_err("broadcast_rows", s, &[1, 0])),
        };
        check_shape(&[n, k])?;
        let row = self.data(x).to_vec();
        let mut y = Vec::with_capacity(n * k);
        for _ in 0..n {
            y.extend_from_slice(&row);
        }
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(vec![n, k], y);
        Ok(self.push(value, Op::BroadcastRows { x }, tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut y = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c * rows + r] = src[r * cols + c];
            }
        }
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(vec![cols, rows], y);
        Ok(self.push(value, Op::Transpose { x, rows, cols }, tracked))
    }

    /// `y[c, ..] = x[c, ..] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if scale.len() != s[0] || shift.len() != s[0] {
            return Err(dim_err("channel_affine", &s, &[scale.len()]));
        }
        let per = self.value(x).len() / s[0];
        let scale: Vec<T> = scale.iter().map(|&v| T::from_f64(v)).collect();
        let shift: Vec<T> = shift.iter().map(|&v| T::from_f64(v)).collect();
        let y = self
            .data(x)
            .chunks_exact(per)
            .zip(scale.iter().zip(&shift))
            .flat_map(|(ch, (&a, &b))| ch.iter().map(move |&v| v * a + b))
            .collect();
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(s, y);
        Ok(self.push(value, Op::ChannelAffine { x, scale }, tracked))
    }

    /// Normalized Gram matrix `G = F F^T / (c h w)` of `[c, h, w]` features.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(dim_err("gram", s, &[0, 0, 0]));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let g = gram_values(self.data(x), c, hw);
        let tracked = self.nodes[x.0].tracked;
        let value = Tensor::from_parts(vec![c, c], g);
        Ok(self.push(value, Op::Gram { x, c, hw }, tracked))
    }

    /// `sum((a - b)^2)`, shape `[1]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dist(a, b, false)
    }

    /// `mean((a - b)^2)`, shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dist(a, b, true)
    }

    fn dist(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        self.same_shape("sq_dist", a, b)?;
        let mut s: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        if mean {
            s = s / T::from_f64(self.value(a).len() as f64);
        }
        let tracked = self.any_tracked(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::scalar(s), Op::SqDist { a, b, mean }, tracked))
    }

    /// Multi-octave noise at constant positions.
    ///
    /// `coords` holds `n` points of `dim` coordinates; `transforms` is `[m, dim, dim]`.
    /// Output is `[n, m]` with column `i` read from octave `i + 1`.
    pub fn noise_stack(
        &mut self,
        coords: Arc<Vec<f64>>,
        dim: usize,
        transforms: Var,
        global_seed: u64,
    ) -> Result<Var> {
        check_dim(dim)?;
        let ts = self.shape(transforms).to_vec();
        if ts.len() != 3 || ts[1] != dim || ts[2] != dim || !coords.len().is_multiple_of(dim) {
            return Err(dim_err("noise_stack", &ts, &[0, dim, dim]));
        }
        let (n, m, dd) = (coords.len() / dim, ts[0], dim * dim);
        check_shape(&[n, m])?;
        let tmat: Vec<f64> = self.data(transforms).iter().map(|v| v.as_f64()).collect();
        let tracked = self.nodes[transforms.0].tracked;
        let specs: Vec<NoiseSpec> = (0..m)
            .map(|i| NoiseSpec {
                global_seed,
                octave: i as u32 + 1,
                dim,
            })
            .collect();
        let mut y = Vec::with_capacity(n * m);
        let mut grad_u = if tracked {
            Vec::with_capacity(n * m * dim)
        } else {
            Vec::new()
        };
        for x in coords.chunks_exact(dim) {
            for (i, spec) in specs.iter().enumerate() {
                let (v, g) = sample_raw(x, &tmat[i * dd..(i + 1) * dd], spec)?;
                y.push(T::from_f64(v));
                if tracked {
                    grad_u.extend_from_slice(&g[..dim]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, m], y);
        Ok(self.push(
            value,
            Op::Noise {
                transforms,
                dim,
                coords,
                grad_u,
            },
            tracked,
        ))
    }

    /// Rotation times exponentiated scale, from `[m, p]` raw parameters to `[m, dim, dim]`.
    pub fn transforms(&mut self, raw: Var, dim: usize) -> Result<Var> {
        check_dim(dim)?;
        let p = params_per_octave(dim);
        let s = self.shape(raw).to_vec();
        if s.len() != 2 || s[1] != p {
            return Err(dim_err("transforms", &s, &[0, p]));
        }
        let raw64: Vec<f64> = self.data(raw).iter().map(|v| v.as_f64()).collect();
        let mut mats = Vec::with_capacity(s[0] * dim * dim);
        let mut jac = Vec::with_capacity(s[0] * p * dim * dim);
        for r in raw64.chunks_exact(p) {
            let (m, j) = materialize_with_jacobian(r, dim);
            mats.extend(m.into_iter().map(T::from_f64));
            jac.extend(j);
        }
        let tracked = self.nodes[raw.0].tracked;
        let value = Tensor::from_parts(vec![s[0], dim, dim], mats);
        Ok(self.push(value, Op::Transforms { raw, dim, jac }, tracked))
    }

    /// Propagates `d loss / d node` to every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Err(Error::Contract(
                "loss does not depend on any parameter".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.tracked && matches!(node.op, Op::Leaf))
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Accumulates into the gradient buffer of `v` if it is tracked.
    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, dims } => {
                let (n, i, o) = *dims;
                self.acc(grads, *x, |dx| {
                    T::gemm(n, o, i, g, false, self.data(*w), true, dx, true)
                });
                self.acc(grads, *w, |dw| {
                    T::gemm(i, n, o, self.data(*x), true, g, false, dw, true)
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for row in g.chunks_exact(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols,
            } => {
                let (o, r, p) = (geom.o, geom.rows(), geom.positions());
                self.acc(grads, *k, |dk| {
                    T::gemm(o, p, r, g, false, cols, true, dk, true)
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks_exact(p)) {
                            *d = *d + row.iter().copied().sum();
                        }
                    });
                }
                if self.nodes[x.0].tracked {
                    let mut dcols = vec![T::zero(); r * p];
                    T::gemm(r, o, p, self.data(*k), true, g, false, &mut dcols, false);
                    self.acc(grads, *x, |dx| col2im(&dcols, geom, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc(grads, *x, |dx| {
                    for (&src, &v) in argmax.iter().zip(g) {
                        dx[src] = dx[src] + v;
                    }
                });
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                self.acc(grads, *x, |dx| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = g[(ch * oh + oy) * ow + ox] * quarter;
                                let base = ch * h * w + 2 * oy * w + 2 * ox;
                                for off in [0, 1, w, w + 1] {
                                    dx[base + off] = dx[base + off] + v;
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => {
                self.acc(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(self.data(*x)).zip(g) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                self.acc(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(self.data(*x)).zip(g) {
                        *d = *d + if xv > T::zero() { gv } else { gv * *slope };
                    }
                });
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let hw = xhat.len() / inv_std.len();
                let n = T::from_f64(hw as f64);
                self.acc(grads, *x, |dx| {
                    for (((dch, gch), xch), &is) in dx
                        .chunks_exact_mut(hw)
                        .zip(g.chunks_exact(hw))
                        .zip(xhat.chunks_exact(hw))
                        .zip(inv_std)
                    {
                        let sum_g: T = gch.iter().copied().sum();
                        let sum_gx: T = gch.iter().zip(xch).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &xh) in dch.iter_mut().zip(gch).zip(xch) {
                            *d = *d + is * (gv - sum_g / n - xh * sum_gx / n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.acc(grads, *v, |d| add_into(d, g));
                }
            }
            Op::Mul { a, b } => {
                self.acc(grads, *a, |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(self.data(*b)) {
                        *d = *d + gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(self.data(*a)) {
                        *d = *d + gv * av;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, |d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d = *d + gv * *c;
                    }
                });
            }
            Op::Sum { x } => {
                self.acc(grads, *x, |d| {
                    for d in d.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::Reshape { x } => self.acc(grads, *x, |d| add_into(d, g)),
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, k) in parts {
                    self.acc(grads, p, |d| {
                        for (drow, grow) in d.chunks_exact_mut(k).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[offset..offset + k]);
                        }
                    });
                    offset += k;
                }
            }
            Op::BroadcastRows { x } => {
                self.acc(grads, *x, |d| {
                    let k = d.len();
                    for row in g.chunks_exact(k) {
                        add_into(d, row);
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                self.acc(grads, *x, |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[r * cols + c] = d[r * cols + c] + g[c * rows + r];
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale } => {
                let per = g.len() / scale.len();
                self.acc(grads, *x, |d| {
                    for ((dch, gch), &a) in
                        d.chunks_exact_mut(per).zip(g.chunks_exact(per)).zip(scale)
                    {
                        for (d, &gv) in dch.iter_mut().zip(gch) {
                            *d = *d + gv * a;
                        }
                    }
                });
            }
            Op::Gram { x, c, hw } => {
                let (c, hw) = (*c, *hw);
                let norm = T::from_f64(1.0 / (c * hw) as f64);
                let mut sym = vec![T::zero(); c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (g[i * c + j] + g[j * c + i]) * norm;
                    }
                }
                self.acc(grads, *x, |dx| {
                    T::gemm(c, c, hw, &sym, false, self.data(*x), false, dx, true)
                });
            }
            Op::SqDist { a, b, mean } => {
                let mut k = T::from_f64(2.0) * g[0];
                if *mean {
                    k = k / T::from_f64(self.value(*a).len() as f64);
                }
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(ad).zip(bd) {
                        *d = *d + k * (p - q);
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &p), &q) in d.iter_mut().zip(ad).zip(bd) {
                        *d = *d - k * (p - q);
                    }
                });
            }
            Op::Noise {
                transforms,
                dim,
                coords,
                grad_u,
            } => {
                let dim = *dim;
                let m = self.shape(*transforms)[0];
                let dd = dim * dim;
                let mut dt = vec![0.0f64; m * dd];
                for (p, x) in coords.chunks_exact(dim).enumerate() {
                    for i in 0..m {
                        let gv = g[p * m + i].as_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        let freq = (1u64 << i.min(62)) as f64;
                        let gu = &grad_u[(p * m + i) * dim..(p * m + i + 1) * dim];
                        for r in 0..dim {
                            let s = gv * gu[r] * freq;
                            for k in 0..dim {
                                dt[i * dd + r * dim + k] += s * x[k];
                            }
                        }
                    }
                }
                self.acc(grads, *transforms, |d| {
                    for (d, v) in d.iter_mut().zip(dt) {
                        *d = *d + T::from_f64(v);
                    }
                });
            }
            Op::Transforms { raw, dim, jac } => {
                let dd = dim * dim;
                let p = params_per_octave(*dim);
                self.acc(grads, *raw, |d| {
                    for (oct, (dr, gm)) in d.chunks_exact_mut(p).zip(g.chunks_exact(dd)).enumerate()
                    {
                        for (k, dk) in dr.iter_mut().enumerate() {
                            let j = &jac[(oct * p + k) * dd..(oct * p + k + 1) * dd];
                            let s: f64 = j.iter().zip(gm).map(|(&a, &b)| a * b.as_f64()).sum();
                            *dk = *dk + T::from_f64(s);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &v) in d.iter_mut().zip(g) {
        *d = *d + v;
    }
}

pub(crate) fn gram_values<T: Scalar>(f: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c * c];
    T::gemm(c, hw, c, f, false, f, true, &mut g, false);
    let norm = T::from_f64(1.0 / (c * hw) as f64);
    for v in &mut g {
        *v = *v * norm;
    }
    // gemm does not guarantee bitwise symmetry
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i];
        }
    }
    g
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.rows() * p];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let w = tape.constant(Tensor::zeros(&[4, 5]).unwrap());
        let msg = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    /// Six nested loops, no im2col.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 4, 4], 3.0).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0).unwrap());
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 6.0));

        let c = 0.7;
        let x = tape.constant(Tensor::full(&[1, 5, 5], c).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0).unwrap());
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        let out = tape.value(y).data();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((out[yy * 5 + xx] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (stride, pad, kk, hw) in [(1, 1, 3, 7), (2, 1, 4, 8), (1, 0, 3, 5), (2, 1, 4, 9)] {
            let x = Tensor::<f64>::uniform(&[3, hw, hw + 1], 1.0, &mut rng).unwrap();
            let k = Tensor::<f64>::uniform(&[4, 3, kk, kk], 1.0, &mut rng).unwrap();
            let want = naive_conv(&x, &k, stride, pad);
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x), tape.constant(k));
            let y = tape.conv2d(xv, kv, None, stride, pad).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]).unwrap());
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let l = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = Tensor::uniform(&[3, 6, 5], 4.0, &mut rng).unwrap();
        let x = tape.constant(x.map(|v| v + 2.0));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        for ch in tape.value(y).data().chunks_exact(30) {
            let mean = ch.iter().sum::<f64>() / 30.0;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let single = tape.constant(Tensor::zeros(&[2, 1, 1]).unwrap());
        assert!(matches!(
            tape.instance_norm(single, 1e-5),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn gram_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 7], 1.0).unwrap());
        let g = tape.gram(x).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0]);

        // channel 0 lives on the left half, channel 1 on the right half
        let mut data = vec![0.0; 2 * 2 * 4];
        for y in 0..2 {
            data[y * 4] = 1.5;
            data[y * 4 + 1] = -0.5;
            data[8 + y * 4 + 2] = 2.0;
            data[8 + y * 4 + 3] = 0.25;
        }
        let x = tape.constant(t(&[2, 2, 4], &data));
        let g = tape.gram(x).unwrap();
        assert_eq!(tape.value(g).data()[1], 0.0);
        assert_eq!(tape.value(g).data()[2], 0.0);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (5, 4, 6);
        let f = Tensor::<f64>::uniform(&[c, h, w], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let g = tape.gram(x).unwrap();
        let hw = h * w;
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += f.data()[i * hw + p] * f.data()[j * hw + p];
                }
                acc /= (c * hw) as f64;
                assert!((tape.value(g).data()[i * c + j] - acc).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(seed in any::<u64>(), c in 1usize..5, hw in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f64>::uniform(&[c, 1, hw], 3.0, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(f);
            let g = tape.gram(x).unwrap();
            let g = tape.value(g).data().to_vec();
            for i in 0..c {
                for j in 0..c {
                    prop_assert_eq!(g[i * c + j], g[j * c + i]);
                }
            }
            // quadratic form over random probes stands in for the minimum eigenvalue
            for _ in 0..32 {
                let v: Vec<f64> = (0..c).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
                let norm2: f64 = v.iter().map(|a| a * a).sum();
                let q: f64 = (0..c).flat_map(|i| (0..c).map(move |j| (i, j)))
                    .map(|(i, j)| v[i] * g[i * c + j] * v[j]).sum();
                prop_assert!(q >= -1e-8 * norm2);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>()) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut tape = Tape::<f32>::new();
                let x = tape.constant(Tensor::uniform(&[2, 6, 6], 1.0, &mut rng).unwrap());
                let k = tape.constant(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng).unwrap());
                let y = tape.conv2d(x, k, None, 1, 1).unwrap();
                let y = tape.instance_norm(y, 1e-5).unwrap();
                let y = tape.leaky_relu(y, 0.2);
                let g = tape.gram(y).unwrap();
                tape.value(g).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn linear_chain_gradient_is_outer_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let w = tape.param(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.shape(), &[3, 2]);
        assert_eq!(gw.data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));

        tape.reset();
        assert!(tape.is_empty());
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c);
        assert!(tape.backward(s).is_err(), "untracked loss");
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1], &[3.0]));
        let unused = tape.param(t(&[1], &[4.0]));
        let loss = tape.scale(a, 2.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0]);
        assert!(grads.get(unused).is_none());
    }
}
