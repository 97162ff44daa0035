//! Parameterized layers composed from graph operations.

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::{Element, Tensor};
use crate::error::Result;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in, 1.0, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, 1.0, rng);
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Same layer with weights and bias set to zero.
    pub fn zeroed<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm {
            gamma,
            beta,
            groups: groups_for(channels, groups),
        }
    }

    pub fn forward<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, self.groups, gamma, beta, NORM_EPS)
    }
}

/// Largest divisor of `channels` not exceeding the requested group count.
pub fn groups_for(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels).max(1))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Pre-activation residual block: `skip(x) + conv(silu(norm(conv(silu(norm(x))))))`.
#[derive(Debug, Clone)]
pub struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResnetBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ResnetBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Single-head self-attention over all spatial positions, with residual.
///
/// Projections are `c x c` matrices, so the layer accepts any spatial size.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    norm: Option<GroupNorm>,
    q: (ParamId, ParamId),
    // Key bias is omitted: softmax is invariant to the per-row shift it adds.
    k: ParamId,
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    channels: usize,
}

impl AttentionLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        norm_groups: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut proj = |p: &str| {
            (
                store.add_uniform(format!("{name}.{p}.weight"), &[channels, channels], channels, 1.0, rng),
                store.add_uniform(format!("{name}.{p}.bias"), &[channels], channels, 1.0, rng),
            )
        };
        let (q, v, out) = (proj("q"), proj("v"), proj("out"));
        let k = store.add_uniform(format!("{name}.k.weight"), &[channels, channels], channels, 1.0, rng);
        let norm = norm_groups.map(|gr| GroupNorm::new(store, &format!("{name}.norm"), channels, gr));
        AttentionLayer {
            norm,
            q,
            k,
            v,
            out,
            channels,
        }
    }

    fn linear<'p, T: Element>(
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        (w, b): (ParamId, ParamId),
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(w, x, false, false)?;
        g.add_channel_bias(y, b)
    }

    /// Returns `(output, attention weights [hw, hw])`.
    pub fn forward_with_weights<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.channels {
            return Err(crate::error::contract!(
                "attention channels: layer width {}, input has {c}",
                self.channels
            ));
        }
        let n = h * w;
        let normed = match &self.norm {
            Some(nm) => nm.forward(g, store, x)?,
            None => x,
        };
        let flat = g.reshape(normed, &[c, n])?;
        let q = Self::linear(g, store, self.q, flat)?;
        let kw = g.param(store, self.k);
        let k = g.matmul(kw, flat, false, false)?;
        let v = Self::linear(g, store, self.v, flat)?;
        let scores = g.matmul(q, k, true, false)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_rows(scores)?;
        let mixed = g.matmul(v, attn, false, true)?;
        let y = Self::linear(g, store, self.out, mixed)?;
        let y = g.reshape(y, &[c, h, w])?;
        Ok((g.add(x, y)?, attn))
    }

    pub fn forward<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }
}

/// Stride-2 3x3 convolution halving resolution.
pub fn downsample<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Conv2d {
    Conv2d::new(store, name, cin, cout, 3, 2, rng)
}

/// Nearest x2 upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Upsample {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, rng),
        }
    }

    pub fn forward<'p, T: Element>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let u = g.upsample2x(x)?;
        self.conv.forward(g, store, u)
    }
}
