//! Training objective: L1 reconstruction, Gaussian KL, feature-space
//! perceptual distance and a patch-discriminator GAN term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::nn::Conv2d;
use crate::backend::{Element, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    /// KL weight.
    pub beta: f64,
    /// Perceptual weight.
    pub gamma: f64,
    /// GAN weight.
    pub delta: f64,
    /// Weight of the pooled-feature term inside the perceptual loss.
    pub feature_proxy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            beta: 1e-6,
            gamma: 1.0,
            delta: 0.5,
            feature_proxy: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.beta, self.gamma, self.delta, self.feature_proxy];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Maps `[0,1]` pixels to `[-1,1]`.
fn centered<T: Element>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let s = g.scale(x, 2.0);
    g.add_scalar(s, -1.0)
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

/// Fixed, randomly initialized three-level convolutional feature pyramid.
/// Its parameters are never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Element = f32> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    pub seed: u64,
}

impl<T: Element> FeatureExtractor<T> {
    pub const CHANNELS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in Self::CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let fan_in = cin * 9;
            let weight = store.add_uniform(format!("feat{i}.weight"), &[cout, cin, 3, 3], fan_in, 3f64.sqrt(), &mut rng);
            let bias = store.add(format!("feat{i}.bias"), Tensor::zeros(&[cout]));
            convs.push(Conv2d {
                weight,
                bias,
                stride,
                pad: 1,
            });
            cin = cout;
        }
        FeatureExtractor { store, convs, seed }
    }

    /// Activations of every pyramid level for an image in `[0,1]`.
    pub fn features<'p>(&'p self, g: &mut Graph<'p, T>, x: Var) -> Result<Vec<Var>> {
        g.freeze(&self.store);
        let mut h = centered(g, x);
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let y = c.forward(g, &self.store, h)?;
            h = g.silu(y);
            out.push(h);
        }
        Ok(out)
    }
}

/// Mean over levels of the spatially averaged squared distance between
/// channel-unit-normalized feature maps.
pub fn lpips_graph<'p, T: Element>(
    g: &mut Graph<'p, T>,
    fx: &[Var],
    fy: &[Var],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&a, &b) in fx.iter().zip(fy) {
        let c = g.shape(a)[0];
        let na = g.channel_unit_norm(a)?;
        let nb = g.channel_unit_norm(b)?;
        let d = g.sub(na, nb)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        let level = g.scale(m, c as f64);
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    let t = total.ok_or_else(|| Error::Contract("empty feature pyramid".into()))?;
    Ok(g.scale(t, 1.0 / fx.len() as f64))
}

/// Squared distance between spatially pooled top-level features.
pub fn pooled_feature_graph<'p, T: Element>(g: &mut Graph<'p, T>, top_x: Var, top_y: Var) -> Result<Var> {
    let px = g.spatial_mean(top_x)?;
    let py = g.spatial_mean(top_y)?;
    let d = g.sub(px, py)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Perceptual loss: feature-pyramid distance plus the weighted pooled term.
pub fn perceptual_graph<'p, T: Element>(
    g: &mut Graph<'p, T>,
    extractor: &'p FeatureExtractor<T>,
    x: Var,
    xhat: Var,
    feature_proxy: f64,
) -> Result<Var> {
    let fx = extractor.features(g, x)?;
    let fy = extractor.features(g, xhat)?;
    let lp = lpips_graph(g, &fx, &fy)?;
    if feature_proxy == 0.0 {
        return Ok(lp);
    }
    let pooled = pooled_feature_graph(g, *fx.last().expect("levels"), *fy.last().expect("levels"))?;
    let pooled = g.scale(pooled, feature_proxy);
    g.add(lp, pooled)
}

/// Four stride-2 convolutions producing a grid of per-patch logits.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Element = f32> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Element> Discriminator<T> {
    pub const CHANNELS: [usize; 4] = [16, 32, 64, 1];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = Self::CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(&mut store, &format!("disc{i}"), cin, cout, 3, 2, &mut rng);
                cin = cout;
                c
            })
            .collect();
        Discriminator { store, convs }
    }

    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(0);
        for (p, q) in d.store.iter().zip(store.iter()) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(Error::Contract(format!("discriminator parameter {} mismatch", p.name)));
            }
        }
        if d.store.len() != store.len() {
            return Err(Error::Contract("discriminator parameter count mismatch".into()));
        }
        d.store = store;
        Ok(d)
    }

    /// Patch logits `[1, h', w']`.
    pub fn logits<'p>(&'p self, g: &mut Graph<'p, T>, x: Var) -> Result<Var> {
        let mut h = centered(g, x);
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, &self.store, h)?;
            if i < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// `softplus` form of the original GAN objective.
    #[default]
    NonSaturating,
    Hinge,
}

fn relu<T: Element>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let a = g.abs(x);
    let s = g.add(a, x)?;
    Ok(g.scale(s, 0.5))
}

/// Discriminator loss; `fake` should be a constant (detached) node.
pub fn gan_d_loss<'p, T: Element>(
    g: &mut Graph<'p, T>,
    d: &'p Discriminator<T>,
    real: Var,
    fake: Var,
    kind: GanLoss,
) -> Result<Var> {
    let lr = d.logits(g, real)?;
    let lf = d.logits(g, fake)?;
    let (a, b) = match kind {
        GanLoss::NonSaturating => {
            let n = g.neg(lr);
            (g.softplus(n), g.softplus(lf))
        }
        GanLoss::Hinge => {
            let n = g.neg(lr);
            let one_minus = g.add_scalar(n, 1.0);
            let one_plus = g.add_scalar(lf, 1.0);
            (relu(g, one_minus)?, relu(g, one_plus)?)
        }
    };
    let ma = g.mean(a);
    let mb = g.mean(b);
    g.add(ma, mb)
}

/// Generator-side GAN loss on reconstructions.
pub fn gan_g_loss<'p, T: Element>(
    g: &mut Graph<'p, T>,
    d: &'p Discriminator<T>,
    fake: Var,
    kind: GanLoss,
) -> Result<Var> {
    let lf = d.logits(g, fake)?;
    Ok(match kind {
        GanLoss::NonSaturating => {
            let n = g.neg(lf);
            let s = g.softplus(n);
            g.mean(s)
        }
        GanLoss::Hinge => {
            let m = g.mean(lf);
            g.neg(m)
        }
    })
}

/// Mean absolute difference.
pub fn recon_l1<T: Element>(g: &mut Graph<'_, T>, x: Var, xhat: Var) -> Result<Var> {
    let d = g.sub(xhat, x)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)`: per-element KL to N(0, I).
pub fn kl_gauss<T: Element>(g: &mut Graph<'_, T>, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let s = g.add(m2, ev)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0);
    let m = g.mean(s);
    Ok(g.scale(m, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Discriminator,
}

/// Shared context for evaluating the objective.
#[derive(Clone, Copy)]
pub struct Objective<'a, T: Element> {
    pub weights: LossWeights,
    pub extractor: &'a FeatureExtractor<T>,
    pub discriminator: Option<&'a Discriminator<T>>,
    pub gan: GanLoss,
}

/// Graph nodes of the generator objective's terms.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub l1: Var,
    pub kl: Var,
    pub perceptual: Var,
    /// Present when a discriminator is supplied; detached when `delta` is 0.
    pub gan: Option<Var>,
    pub total: Var,
}

impl<'a, T: Element> Objective<'a, T> {
    /// `recon*L1 + beta*KL + gamma*perceptual + delta*GAN`. The GAN term is
    /// evaluated on a detached copy of `recon` when `delta` is zero, so no
    /// gradient reaches the generator through it.
    pub fn generator<'p>(
        &self,
        g: &mut Graph<'p, T>,
        x: Var,
        recon: Var,
        mu: Var,
        logvar: Var,
    ) -> Result<GeneratorTerms>
    where
        'a: 'p,
    {
        let w = self.weights;
        let l1 = recon_l1(g, x, recon)?;
        let kl = kl_gauss(g, mu, logvar)?;
        let perceptual = perceptual_graph(g, self.extractor, x, recon, w.feature_proxy)?;
        let mut total = g.scale(l1, w.recon);
        for (term, wt) in [(kl, w.beta), (perceptual, w.gamma)] {
            if wt != 0.0 {
                let s = g.scale(term, wt);
                total = g.add(total, s)?;
            }
        }
        let gan = match self.discriminator {
            Some(d) => {
                g.freeze(&d.store);
                let fake = if w.delta == 0.0 {
                    let detached = g.value(recon).clone();
                    g.constant(detached)
                } else {
                    recon
                };
                let gl = gan_g_loss(g, d, fake, self.gan)?;
                if w.delta != 0.0 {
                    let s = g.scale(gl, w.delta);
                    total = g.add(total, s)?;
                }
                Some(gl)
            }
            None => None,
        };
        Ok(GeneratorTerms {
            l1,
            kl,
            perceptual,
            gan,
            total,
        })
    }

    /// Discriminator loss on a real image and a detached reconstruction.
    pub fn discriminator<'p>(&self, g: &mut Graph<'p, T>, real: Var, fake: Var) -> Result<Var>
    where
        'a: 'p,
    {
        let d = self
            .discriminator
            .ok_or_else(|| Error::Config("discriminator phase without a discriminator".into()))?;
        gan_d_loss(g, d, real, fake, self.gan)
    }

    /// Scalar objective of the requested phase.
    pub fn total<'p>(
        &self,
        g: &mut Graph<'p, T>,
        x: Var,
        recon: Var,
        mu: Var,
        logvar: Var,
        phase: Phase,
    ) -> Result<Var>
    where
        'a: 'p,
    {
        match phase {
            Phase::Generator => Ok(self.generator(g, x, recon, mu, logvar)?.total),
            Phase::Discriminator => {
                let detached = g.value(recon).clone();
                let fake = g.constant(detached);
                self.discriminator(g, x, fake)
            }
        }
    }
}
