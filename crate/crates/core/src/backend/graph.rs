//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed from their [`ParamStore`] rather than copied; stores marked
//! frozen contribute constants that never receive gradients.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatView};
use super::param::{ParamId, ParamStore};
use super::tensor::{Element, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        /// im2col of the input; empty for pointwise convolutions.
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddChannelBias(Var, Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Upsample2x(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    ChannelUnitNorm {
        x: Var,
        inv_norm: Vec<T>,
    },
    SpatialMean(Var),
}

struct Node<'p, T: Element> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of operations for one forward pass.
pub struct Graph<'p, T: Element = f32> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<(usize, ParamId), Var>,
    frozen: Vec<usize>,
}

fn store_key<T: Element>(store: &ParamStore<T>) -> usize {
    store as *const ParamStore<T> as usize
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters from `store` enter this graph as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        let key = store_key(store);
        if !self.frozen.contains(&key) {
            self.frozen.push(key);
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        // Ops whose inputs are all constants are recorded as leaves so their
        // saved buffers are dropped.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let ng = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(t), op, ng)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A free input whose gradient is requested from [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrows a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        let key = (store_key(store), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&key.0);
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a value (scalars are shape `[1]`).
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- convolution and normalization -------------------------------------------------

    /// Cross-correlation of `x[cin,h,w]` with `w[cout,cin,k,k]` plus optional bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let geom = {
            let ws = self.shape(w);
            if ws.len() != 4 {
                return Err(contract!("conv weight must be rank 4, got {ws:?}"));
            }
            if ws[1] != cin {
                return Err(contract!(
                    "conv input channels: weight expects {}, input has {cin}",
                    ws[1]
                ));
            }
            if ws[2] != ws[3] || ws[2].is_multiple_of(2) {
                return Err(contract!("conv kernel must be square and odd, got {ws:?}"));
            }
            if !(1..=2).contains(&stride) {
                return Err(contract!("conv stride must be 1 or 2, got {stride}"));
            }
            let k = ws[2];
            if h + 2 * pad < k || wd + 2 * pad < k {
                return Err(contract!(
                    "conv kernel height/width {k} exceeds padded input {h}x{wd}"
                ));
            }
            ConvGeom {
                cin,
                h,
                w: wd,
                k,
                stride,
                pad,
                oh: (h + 2 * pad - k) / stride + 1,
                ow: (wd + 2 * pad - k) / stride + 1,
            }
        };
        let cout = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(contract!(
                    "conv bias length: expected [{cout}], got {:?}",
                    self.shape(b)
                ));
            }
        }
        let n = geom.out_len();
        let kk = geom.patch_len();
        let mut out = vec![T::zero(); cout * n];
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); kk * n];
            kernels::im2col(self.value(x).data(), &geom, &mut cols);
            cols
        };
        {
            let col_view = if geom.is_pointwise() {
                MatView::row_major(self.value(x).data(), kk, n)
            } else {
                MatView::row_major(&cols, kk, n)
            };
            let wv = MatView::row_major(self.value(w).data(), cout, kk);
            kernels::gemm(wv, col_view, T::zero(), &mut out, n as isize, 1);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, row) in out.chunks_mut(n).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let t = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.owned(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Group normalization over `x[c, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(contract!("group_norm needs rank >= 2, got {xs:?}"));
        }
        let c = xs[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(crate::error::Error::Config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(contract!("group_norm affine params must have shape [{c}]"));
        }
        let plane: usize = xs[1..].iter().product();
        let gsize = (c / groups) * plane;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); groups];
        let nf = T::of(gsize as f64);
        for g in 0..groups {
            let s = &xd[g * gsize..(g + 1) * gsize];
            let mean = s.iter().copied().sum::<T>() / nf;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd[g] = r;
            for i in g * gsize..(g + 1) * gsize {
                let xh = (xd[i] - mean) * r;
                let ch = i / plane;
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.owned(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- elementwise -------------------------------------------------------------------

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.owned(t, Op::Silu(x), &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.owned(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x).map(|v| v * s);
        self.owned(t, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x).map(|v| v + s);
        self.owned(t, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.owned(t, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.owned(t, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.owned(t, Op::Square(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::softplus);
        self.owned(t, Op::Softplus(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.owned(t, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- linear algebra and shape ------------------------------------------------------

    /// Matrix product of rank-2 values, optionally transposing either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a)?;
        let (br, bc) = self.mat_dims(b)?;
        let av = MatView::maybe_t(self.value(a).data(), ar, ac, ta);
        let bv = MatView::maybe_t(self.value(b).data(), br, bc, tb);
        if av.cols != bv.rows {
            return Err(contract!(
                "matmul inner dimension: {} vs {}",
                av.cols,
                bv.rows
            ));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(av, bv, T::zero(), &mut out, n as isize, 1);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.owned(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(contract!("expected a matrix, got shape {s:?}")),
        }
    }

    /// Adds `b[c]` to every element of channel `c` of `x[c, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(contract!(
                "channel bias: expected [{c}], got {:?}",
                self.shape(b)
            ));
        }
        let mut t = self.value(x).clone();
        let plane = t.len() / c;
        let bias = self.value(b).data().to_vec();
        for (ch, row) in t.data_mut().chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = *v + bias[ch]);
        }
        Ok(self.owned(t, Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.owned(t, Op::Reshape(x), &[x]))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(x)?;
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Ok(self.owned(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Nearest-neighbour x2 upsampling of `x[c,h,w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let drow = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let t = Tensor::new(&[c, h2, w2], out)?;
        Ok(self.owned(t, Op::Upsample2x(x), &[x]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).channel_slice(start, len)?;
        Ok(self.owned(t, Op::SliceChannels { x, start }, &[x]))
    }

    // ---- reductions --------------------------------------------------------------------

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.owned(t, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.owned(t, Op::Sum(x), &[x])
    }

    /// Divides each spatial position of `x[c,h,w]` by its channel-vector norm.
    pub fn channel_unit_norm(&mut self, x: Var) -> Result<Var> {
        const EPS: f64 = 1e-10;
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let mut inv_norm = vec![T::zero(); plane];
        for (p, inv) in inv_norm.iter_mut().enumerate() {
            let s: T = (0..c).map(|ch| xd[ch * plane + p] * xd[ch * plane + p]).sum();
            *inv = T::one() / (s + T::of(EPS)).sqrt();
        }
        let out = Tensor::from_fn(&[c, h, w], |i| xd[i] * inv_norm[i % plane]);
        Ok(self.owned(out, Op::ChannelUnitNorm { x, inv_norm }, &[x]))
    }

    /// Mean over the spatial axes of `x[c,h,w]`, giving `[c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let out = Tensor::from_fn(&[c], |ch| {
            xd[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() / T::of(plane as f64)
        });
        Ok(self.owned(out, Op::SpatialMean(x), &[x]))
    }

    // ---- backward ----------------------------------------------------------------------

    /// Reverse pass from `loss` (any shape) seeded with `seed` everywhere.
    pub fn backward(&self, loss: Var, seed: f64) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::of(seed)));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'p, T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let cout = self.shape(*w)[0];
                let n = geom.out_len();
                let kk = geom.patch_len();
                let gv = MatView::row_major(gy.data(), cout, n);
                let col_view = if geom.is_pointwise() {
                    MatView::row_major(val(*x).data(), kk, n)
                } else {
                    MatView::row_major(cols, kk, n)
                };
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); cout * kk];
                    kernels::gemm(gv, col_view.t(), T::zero(), &mut dw, kk as isize, 1);
                    acc(*w, Tensor::new(self.shape(*w), dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<T> = gy
                            .data()
                            .chunks(n)
                            .map(|r| r.iter().copied().sum())
                            .collect();
                        acc(*b, Tensor::new(&[cout], db).expect("shape"));
                    }
                }
                if self.wants(*x) {
                    let wv = MatView::row_major(val(*w).data(), cout, kk);
                    let mut dcols = vec![T::zero(); kk * n];
                    kernels::gemm(wv.t(), gv, T::zero(), &mut dcols, n as isize, 1);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); geom.cin * geom.h * geom.w];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    acc(*x, Tensor::new(self.shape(*x), dx).expect("shape"));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = self.shape(*x)[0];
                let plane = xhat.len() / c;
                let gsize = xhat.len() / groups;
                let gd = gy.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        for i in ch * plane..(ch + 1) * plane {
                            dg[ch] = dg[ch] + gd[i] * xhat[i];
                            db[ch] = db[ch] + gd[i];
                        }
                    }
                    acc(*gamma, Tensor::new(&[c], dg).expect("shape"));
                    acc(*beta, Tensor::new(&[c], db).expect("shape"));
                }
                if self.wants(*x) {
                    let gam = val(*gamma).data();
                    let nf = T::of(gsize as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for g in 0..*groups {
                        let range = g * gsize..(g + 1) * gsize;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in range.clone() {
                            let dxh = gd[i] * gam[i / plane];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[i];
                        }
                        for i in range {
                            let dxh = gd[i] * gam[i / plane];
                            dx[i] = rstd[g] * (dxh - s1 / nf - xhat[i] * s2 / nf);
                        }
                    }
                    acc(*x, Tensor::new(self.shape(*x), dx).expect("shape"));
                }
            }
            Op::Silu(x) => {
                let g = val(*x)
                    .zip_map(gy, |v, g| {
                        let s = kernels::sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .expect("shape");
                acc(*x, g);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.zip_map(val(*b), |g, v| g * v).expect("shape"));
                }
                if self.wants(*b) {
                    acc(*b, gy.zip_map(val(*a), |g, v| g * v).expect("shape"));
                }
            }
            Op::Scale(x, s) => acc(*x, gy.map(|g| g * *s)),
            Op::AddScalar(x) => acc(*x, gy.clone()),
            Op::Exp(x) => acc(*x, gy.zip_map(y, |g, v| g * v).expect("shape")),
            Op::Abs(x) => acc(
                *x,
                gy.zip_map(val(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .expect("shape"),
            ),
            Op::Square(x) => acc(
                *x,
                gy.zip_map(val(*x), |g, v| g * (v + v)).expect("shape"),
            ),
            Op::Softplus(x) => acc(
                *x,
                gy.zip_map(val(*x), |g, v| g * kernels::sigmoid(v))
                    .expect("shape"),
            ),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                gy.zip_map(val(*x), |g, v| {
                    if v < *lo || v > *hi {
                        T::zero()
                    } else {
                        g
                    }
                })
                .expect("shape"),
            ),
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.mat_dims(*a).expect("matrix");
                let (br, bc) = self.mat_dims(*b).expect("matrix");
                let av = MatView::maybe_t(val(*a).data(), ar, ac, *ta);
                let bv = MatView::maybe_t(val(*b).data(), br, bc, *tb);
                let gv = MatView::row_major(gy.data(), av.rows, bv.cols);
                if self.wants(*a) {
                    // dA = dC * B^T, written back in a's storage layout.
                    let mut da = vec![T::zero(); ar * ac];
                    let (rs, cs) = if *ta { (1, ac as isize) } else { (ac as isize, 1) };
                    kernels::gemm(gv, bv.t(), T::zero(), &mut da, rs, cs);
                    acc(*a, Tensor::new(&[ar, ac], da).expect("shape"));
                }
                if self.wants(*b) {
                    // dB = A^T * dC
                    let mut db = vec![T::zero(); br * bc];
                    let (rs, cs) = if *tb { (1, bc as isize) } else { (bc as isize, 1) };
                    kernels::gemm(av.t(), gv, T::zero(), &mut db, rs, cs);
                    acc(*b, Tensor::new(&[br, bc], db).expect("shape"));
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, gy.clone());
                if self.wants(*b) {
                    let c = self.shape(*b)[0];
                    let plane = gy.len() / c;
                    let db: Vec<T> = gy
                        .data()
                        .chunks(plane)
                        .map(|r| r.iter().copied().sum())
                        .collect();
                    acc(*b, Tensor::new(&[c], db).expect("shape"));
                }
            }
            Op::Reshape(x) => acc(*x, gy.clone().reshape(self.shape(*x)).expect("shape")),
            Op::SoftmaxRows(x) => {
                let n = y.shape()[1];
                let mut dx = gy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (h2, w2) = (2 * h, 2 * w);
                let g = gy.data();
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut dx[(ch * h + yy / 2) * w + xx / 2];
                            *d = *d + g[(ch * h2 + yy) * w2 + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(&[c, h, w], dx).expect("shape"));
            }
            Op::SliceChannels { x, start } => {
                let (_, h, w) = self.value(*x).dims3().expect("rank 3");
                let mut dx = Tensor::zeros(self.shape(*x));
                let off = start * h * w;
                dx.data_mut()[off..off + gy.len()].copy_from_slice(gy.data());
                acc(*x, dx);
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, Tensor::full(self.shape(*x), gy.data()[0] / n));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gy.data()[0])),
            Op::ChannelUnitNorm { x, inv_norm } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let plane = h * w;
                let xd = val(*x).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); c * plane];
                for p in 0..plane {
                    let inv = inv_norm[p];
                    let dot: T = (0..c).map(|ch| g[ch * plane + p] * xd[ch * plane + p]).sum();
                    let inv3 = inv * inv * inv;
                    for ch in 0..c {
                        let i = ch * plane + p;
                        dx[i] = g[i] * inv - xd[i] * dot * inv3;
                    }
                }
                acc(*x, Tensor::new(&[c, h, w], dx).expect("shape"));
            }
            Op::SpatialMean(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let plane = h * w;
                let inv = T::of(1.0 / plane as f64);
                let g = gy.data();
                let dx = Tensor::from_fn(&[c, h, w], |i| g[i / plane] * inv);
                acc(*x, dx);
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient reaching `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter `graph` borrowed from `store`.
    pub fn param_grads(&self, graph: &Graph<'_, T>, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let key = store_key(store);
        let mut out: Vec<(ParamId, Tensor<T>)> = graph
            .params
            .iter()
            .filter(|((k, _), _)| *k == key)
            .filter_map(|((_, id), v)| self.get(*v).map(|g| (*id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
