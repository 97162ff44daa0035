//! Finite-difference checks of each objective term and the full objective.

use adaptok::backend::{gradient_check, Coverage, Graph, ParamId, ParamStore, Tensor, Var};
use adaptok::losses::{
    gan_d_loss, gan_g_loss, kl_gauss, perceptual_graph, recon_l1, Discriminator, FeatureExtractor, GanLoss,
    LossWeights, Objective,
};
use adaptok::nestedvae::{gaussian_noise, NestedVae, NestedVaeConfig};
use adaptok::Result;

pub const H: f64 = 1e-5;

fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
    gaussian_noise::<f64>(shape, seed).map(|v| (0.5 + 0.2 * v).clamp(0.02, 0.98))
}

/// Checks `loss(g, x)` with respect to a single free tensor.
fn check_input<F>(init: Tensor<f64>, loss: F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", init);
    let r = gradient_check(&mut store, H, Coverage::All, |s, want| {
        let mut g = Graph::new();
        let x = g.param(s, id);
        let l = loss(&mut g, x)?;
        let grads = if want { g.backward(l, 1.0).param_grads(&g, s) } else { vec![] };
        Ok((g.scalar(l), grads))
    })?;
    Ok(r.max_rel_error)
}

pub fn recon_l1_error() -> Result<f64> {
    let x = image(&[3, 4, 4], 1);
    check_input(image(&[3, 4, 4], 2), move |g, xhat| {
        let c = g.constant(x.clone());
        recon_l1(g, c, xhat)
    })
}

pub fn kl_error() -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let mu = store.add("mu", gaussian_noise(&[2, 3, 3], 3));
    let lv = store.add("logvar", gaussian_noise::<f64>(&[2, 3, 3], 4).map(|v| 0.5 * v));
    let r = gradient_check(&mut store, H, Coverage::All, |s, want| {
        let mut g = Graph::new();
        let (m, l) = (g.param(s, mu), g.param(s, lv));
        let k = kl_gauss(&mut g, m, l)?;
        let grads = if want { g.backward(k, 1.0).param_grads(&g, s) } else { vec![] };
        Ok((g.scalar(k), grads))
    })?;
    Ok(r.max_rel_error)
}

pub fn perceptual_error() -> Result<f64> {
    let ext = FeatureExtractor::<f64>::new(11);
    let x = image(&[3, 8, 8], 5);
    check_input(image(&[3, 8, 8], 6), move |g, xhat| {
        // Extractor is rebuilt per closure call so its borrow matches the graph.
        let ext: &'static FeatureExtractor<f64> = Box::leak(Box::new(ext.clone()));
        let c = g.constant(x.clone());
        perceptual_graph(g, ext, c, xhat, 0.2)
    })
}

pub fn gan_g_error() -> Result<f64> {
    let d: &'static Discriminator<f64> = Box::leak(Box::new(Discriminator::new(12)));
    check_input(image(&[3, 8, 8], 7), move |g, fake| {
        g.freeze(&d.store);
        gan_g_loss(g, d, fake, GanLoss::NonSaturating)
    })
}

pub fn gan_d_error() -> Result<f64> {
    let mut d = Discriminator::<f64>::new(13);
    let real = image(&[3, 8, 8], 8);
    let fake = image(&[3, 8, 8], 9);
    let shell = d.clone();
    let r = gradient_check(&mut d.store, H, Coverage::All, |s, want| {
        let mut disc = shell.clone();
        disc.store = s.clone();
        let mut g = Graph::new();
        let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
        let l = gan_d_loss(&mut g, &disc, rv, fv, GanLoss::NonSaturating)?;
        let grads = if want { g.backward(l, 1.0).param_grads(&g, &disc.store) } else { vec![] };
        Ok((g.scalar(l), grads))
    })?;
    Ok(r.max_rel_error)
}

/// Smallest model with a non-zero output head so every parameter gets gradient.
pub fn smallest_model() -> NestedVae<f64> {
    let mut m = NestedVae::<f64>::new(NestedVaeConfig::smallest(), 21).unwrap();
    let id = m.store.find("dec.out.conv.weight").unwrap();
    let p = m.store.get_mut(id);
    let n = p.value.len();
    p.value = gaussian_noise::<f64>(&[n], 22).map(|v| 0.3 * v).reshape(p.value.shape()).unwrap();
    m
}

/// Full generator objective (all four terms) for one ratio, over every model
/// parameter (`per_param` elements each).
pub fn full_objective_error(ratio: u32, per_param: usize) -> Result<f64> {
    let mut model = smallest_model();
    let ext = FeatureExtractor::<f64>::new(31);
    let disc = Discriminator::<f64>::new(32);
    let x = image(&[3, 8, 8], 33);
    let side = 8 / ratio as usize;
    let eps = gaussian_noise::<f64>(&[2, side, side], 34);
    let shell = model.clone();
    let r = gradient_check(&mut model.store, H, Coverage::PerParam(per_param), |s, want| {
        let mut m = shell.clone();
        m.store = s.clone();
        let obj = Objective {
            weights: LossWeights {
                beta: 0.1,
                ..LossWeights::default()
            },
            extractor: &ext,
            discriminator: Some(&disc),
            gan: GanLoss::NonSaturating,
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = m.forward_graph(&mut g, xv, ratio, eps.clone())?;
        let t = obj.generator(&mut g, xv, f.recon, f.mu, f.logvar)?;
        let grads = if want { g.backward(t.total, 1.0).param_grads(&g, &m.store) } else { vec![] };
        Ok((g.scalar(t.total), grads))
    })?;
    Ok(r.max_rel_error)
}

/// Gradient of L1(x, decode(z)) with respect to `z`.
pub fn decode_latent_error(ratio: u32) -> Result<f64> {
    let model: &'static NestedVae<f64> = Box::leak(Box::new(smallest_model()));
    let side = 8 / ratio as usize;
    let x = image(&[3, 8, 8], 41);
    check_input(gaussian_noise(&[2, side, side], 42), move |g, z| {
        g.freeze(&model.store);
        let y = model.decode_graph(g, z, ratio)?;
        let c = g.constant(x.clone());
        recon_l1(g, c, y)
    })
}

pub fn param_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    (0..store.len()).map(ParamId).collect()
}
