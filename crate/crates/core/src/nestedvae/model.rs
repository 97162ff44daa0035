use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::NestedVaeConfig;
use crate::backend::nn::{downsample, AttentionLayer, Conv2d, GroupNorm, ResnetBlock, Upsample};
use crate::backend::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract, Error, Result};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Posterior parameters at one ratio, each `[c, r/f, r/f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<T: Element = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub ratio: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample<T: Element = f32> {
    pub z: Tensor<T>,
    pub ratio: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Element = f32> {
    pub recon: Tensor<T>,
    pub dist: LatentDistribution<T>,
    pub z: LatentSample<T>,
}

/// Graph nodes of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Standard normal noise of the given shape from a seeded generator.
pub fn gaussian_noise<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(v)
    })
}

/// `z = mu + exp(logvar / 2) * eps` with `eps` drawn from `seed`.
pub fn reparameterize<T: Element>(dist: &LatentDistribution<T>, seed: u64) -> LatentSample<T> {
    let eps: Tensor<T> = gaussian_noise(dist.mu.shape(), seed);
    let d = dist.mu.data();
    let lv = dist.logvar.data();
    let z = Tensor::from_fn(dist.mu.shape(), |i| {
        d[i] + (lv[i] * T::of(0.5)).exp() * eps.data()[i]
    });
    LatentSample { z, ratio: dist.ratio }
}

#[derive(Debug, Clone)]
struct MiddleBlock {
    units: Vec<(ResnetBlock, AttentionLayer)>,
}

impl MiddleBlock {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, ch: usize, units: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        MiddleBlock {
            units: (0..units)
                .map(|u| {
                    (
                        ResnetBlock::new(store, &format!("{name}.{u}.res"), ch, ch, groups, rng),
                        AttentionLayer::new(store, &format!("{name}.{u}.attn"), ch, Some(groups), rng),
                    )
                })
                .collect(),
        }
    }

    fn forward<'p, T: Element>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, mut h: Var) -> Result<Var> {
        for (res, attn) in &self.units {
            h = res.forward(g, store, h)?;
            h = attn.forward(g, store, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Option<Conv2d>,
    res: ResnetBlock,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    res: ResnetBlock,
    up: Option<Upsample>,
}

/// One parameter set serving three compression ratios.
#[derive(Debug, Clone)]
pub struct NestedVae<T: Element = f32> {
    pub config: NestedVaeConfig,
    pub store: ParamStore<T>,
    enc_in: Conv2d,
    enc_blocks: Vec<EncoderBlock>,
    enc_adapters: [ResnetBlock; 3],
    enc_mid: MiddleBlock,
    enc_head_norm: GroupNorm,
    enc_head: Conv2d,
    dec_in: Conv2d,
    dec_mid: MiddleBlock,
    dec_adapters: [ResnetBlock; 3],
    dec_blocks: Vec<DecoderBlock>,
    dec_out_norm: GroupNorm,
    dec_out: Conv2d,
}

impl<T: Element> NestedVae<T> {
    pub fn new(config: NestedVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ch = &config.block_out_channels;
        let groups = config.norm_groups;
        let mid = config.mid_channels();
        let c = config.latent_channels;
        let l = config.num_blocks();

        let enc_in = Conv2d::new(&mut s, "enc.conv_in", config.in_channels, ch[0], 3, 1, &mut rng);
        let mut enc_blocks = Vec::with_capacity(l);
        let mut prev = ch[0];
        for (k, &cout) in ch.iter().enumerate() {
            let (down, cin) = if config.block_downsamples(k) {
                (Some(downsample(&mut s, &format!("enc.block{k}.down"), prev, cout, &mut rng)), cout)
            } else {
                (None, prev)
            };
            let res = ResnetBlock::new(&mut s, &format!("enc.block{k}.res"), cin, cout, groups, &mut rng);
            enc_blocks.push(EncoderBlock { down, res });
            prev = cout;
        }
        let taps = config.ratios.as_array().map(|f| config.tap_block(f).expect("validated"));
        let enc_adapters = [0, 1, 2].map(|n| {
            ResnetBlock::new(&mut s, &format!("enc.adapter{n}"), ch[taps[n]], mid, groups, &mut rng)
        });
        let enc_mid = MiddleBlock::new(&mut s, "enc.mid", mid, config.middle_block_units, groups, &mut rng);
        let enc_head_norm = GroupNorm::new(&mut s, "enc.head.norm", mid, groups);
        let enc_head = Conv2d::new(&mut s, "enc.head.conv", mid, 2 * c, 3, 1, &mut rng);
        // Log-variance half of the head starts with zero bias.
        {
            let b = s.get_mut(enc_head.bias);
            b.value.data_mut()[c..].iter_mut().for_each(|v| *v = T::zero());
        }

        let dec_in = Conv2d::new(&mut s, "dec.conv_in", c, mid, 3, 1, &mut rng);
        let dec_mid = MiddleBlock::new(&mut s, "dec.mid", mid, config.middle_block_units, groups, &mut rng);
        let dec_adapters = [0, 1, 2].map(|n| {
            ResnetBlock::new(&mut s, &format!("dec.adapter{n}"), mid, ch[taps[n]], groups, &mut rng)
        });
        let mut dec_blocks = Vec::with_capacity(l);
        for j in 0..l {
            let k = l - 1 - j;
            // Input width is whatever the previous decoder block emitted.
            let cin = if k + 1 < l && !config.block_downsamples(k + 1) { ch[k + 1] } else { ch[k] };
            let res = ResnetBlock::new(&mut s, &format!("dec.up{j}.res"), cin, ch[k], groups, &mut rng);
            let up = config.block_downsamples(k).then(|| {
                let cout = ch[k.saturating_sub(1)];
                Upsample::new(&mut s, &format!("dec.up{j}.up"), ch[k], cout, &mut rng)
            });
            dec_blocks.push(DecoderBlock { res, up });
        }
        let dec_out_norm = GroupNorm::new(&mut s, "dec.out.norm", ch[0], groups);
        let dec_out = Conv2d::zeroed(&mut s, "dec.out.conv", ch[0], config.in_channels, 3);

        Ok(NestedVae {
            config,
            store: s,
            enc_in,
            enc_blocks,
            enc_adapters,
            enc_mid,
            enc_head_norm,
            enc_head,
            dec_in,
            dec_mid,
            dec_adapters,
            dec_blocks,
            dec_out_norm,
            dec_out,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> NestedVae<U> {
        NestedVae {
            config: self.config.clone(),
            store: self.store.cast(),
            enc_in: self.enc_in.clone(),
            enc_blocks: self.enc_blocks.clone(),
            enc_adapters: self.enc_adapters.clone(),
            enc_mid: self.enc_mid.clone(),
            enc_head_norm: self.enc_head_norm.clone(),
            enc_head: self.enc_head.clone(),
            dec_in: self.dec_in.clone(),
            dec_mid: self.dec_mid.clone(),
            dec_adapters: self.dec_adapters.clone(),
            dec_blocks: self.dec_blocks.clone(),
            dec_out_norm: self.dec_out_norm.clone(),
            dec_out: self.dec_out.clone(),
        }
    }

    /// Parameters belonging to ratio `ratio`'s encoder and decoder adapters.
    pub fn adapter_params(&self, ratio: u32) -> Result<Vec<ParamId>> {
        let n = self.config.ratios.index_of(ratio)?;
        let prefixes = [format!("enc.adapter{n}."), format!("dec.adapter{n}.")];
        Ok((0..self.store.len())
            .map(ParamId)
            .filter(|&id| prefixes.iter().any(|p| self.store.get(id).name.starts_with(p)))
            .collect())
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.resolution;
        if shape != [self.config.in_channels, r, r] {
            return Err(contract!("image shape {shape:?}, model expects [3, {r}, {r}]"));
        }
        Ok(())
    }

    /// Encoder activations through the tap for `ratio`: stem, then each block.
    pub fn encoder_trunk<'p>(&'p self, g: &mut Graph<'p, T>, x: Var, ratio: u32) -> Result<Vec<Var>> {
        let tap = self.config.tap_block(ratio)?;
        self.check_image(g.shape(x))?;
        let s = &self.store;
        let scaled = g.scale(x, 2.0);
        let scaled = g.add_scalar(scaled, -1.0);
        let mut h = self.enc_in.forward(g, s, scaled)?;
        let mut acts = vec![h];
        for b in &self.enc_blocks[..=tap] {
            if let Some(d) = &b.down {
                h = d.forward(g, s, h)?;
            }
            h = b.res.forward(g, s, h)?;
            acts.push(h);
        }
        Ok(acts)
    }

    /// `(mu, logvar)` nodes for an image node in `[0,1]`.
    pub fn encode_graph<'p>(&'p self, g: &mut Graph<'p, T>, x: Var, ratio: u32) -> Result<(Var, Var)> {
        let n = self.config.ratios.index_of(ratio)?;
        let s = &self.store;
        let tap = *self.encoder_trunk(g, x, ratio)?.last().expect("stem");
        let h = self.enc_adapters[n].forward(g, s, tap)?;
        let h = self.enc_mid.forward(g, s, h)?;
        let h = self.enc_head_norm.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.enc_head.forward(g, s, h)?;
        let c = self.config.latent_channels;
        let mu = g.slice_channels(h, 0, c)?;
        let lv = g.slice_channels(h, c, c)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    /// Image node in `[0,1]` from a latent node at `ratio`.
    pub fn decode_graph<'p>(&'p self, g: &mut Graph<'p, T>, z: Var, ratio: u32) -> Result<Var> {
        let n = self.config.ratios.index_of(ratio)?;
        let side = self.config.latent_side(ratio);
        let want = [self.config.latent_channels, side, side];
        if g.shape(z) != want {
            return Err(contract!("latent shape {:?} does not match ratio {ratio}: expected {want:?}", g.shape(z)));
        }
        let s = &self.store;
        let h = self.dec_in.forward(g, s, z)?;
        let h = self.dec_mid.forward(g, s, h)?;
        let mut h = self.dec_adapters[n].forward(g, s, h)?;
        let first = self.config.num_blocks() - 1 - self.config.tap_block(ratio)?;
        for b in &self.dec_blocks[first..] {
            h = b.res.forward(g, s, h)?;
            if let Some(u) = &b.up {
                h = u.forward(g, s, h)?;
            }
        }
        let h = self.dec_out_norm.forward(g, s, h)?;
        let h = g.silu(h);
        let y = self.dec_out.forward(g, s, h)?;
        let y = g.add_scalar(y, 1.0);
        Ok(g.scale(y, 0.5))
    }

    /// Encode, reparameterize with the given noise, decode.
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p, T>, x: Var, ratio: u32, eps: Tensor<T>) -> Result<ForwardVars> {
        let (mu, logvar) = self.encode_graph(g, x, ratio)?;
        if eps.shape() != g.shape(mu) {
            return Err(contract!("noise shape {:?} does not match latent {:?}", eps.shape(), g.shape(mu)));
        }
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps);
        let noise = g.mul(std, e)?;
        let z = g.add(mu, noise)?;
        let recon = self.decode_graph(g, z, ratio)?;
        Ok(ForwardVars { recon, mu, logvar, z })
    }

    fn inference_graph(&self) -> Graph<'_, T> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        g
    }

    pub fn encode(&self, image: &Tensor<T>, ratio: u32) -> Result<LatentDistribution<T>> {
        let mut g = self.inference_graph();
        let x = g.constant(image.clone());
        let (mu, lv) = self.encode_graph(&mut g, x, ratio)?;
        Ok(LatentDistribution {
            mu: g.value(mu).clone(),
            logvar: g.value(lv).clone(),
            ratio,
        })
    }

    pub fn decode(&self, z: &LatentSample<T>) -> Result<Tensor<T>> {
        let mut g = self.inference_graph();
        let zv = g.constant(z.z.clone());
        let y = self.decode_graph(&mut g, zv, z.ratio)?;
        Ok(g.value(y).clone())
    }

    pub fn forward(&self, image: &Tensor<T>, ratio: u32, seed: u64) -> Result<ForwardOutput<T>> {
        let dist = self.encode(image, ratio)?;
        let z = reparameterize(&dist, seed);
        let recon = self.decode(&z)?;
        Ok(ForwardOutput { recon, dist, z })
    }

    /// Encoder trunk activations (stem and blocks through the tap).
    pub fn encoder_activations(&self, image: &Tensor<T>, ratio: u32) -> Result<Vec<Tensor<T>>> {
        let mut g = self.inference_graph();
        let x = g.constant(image.clone());
        let acts = self.encoder_trunk(&mut g, x, ratio)?;
        Ok(acts.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Replaces all parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                self.store.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, t) in params {
            if !seen.insert(name.as_str()) {
                return Err(contract!("tensor {name:?} appears twice"));
            }
            let id = self
                .store
                .find(name)
                .ok_or_else(|| contract!("unexpected tensor {name:?} in checkpoint"))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(contract!("tensor {name}: shape {:?}, expected {:?}", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
