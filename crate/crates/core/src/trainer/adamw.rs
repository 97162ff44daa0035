use serde::{Deserialize, Serialize};

use crate::backend::{Element, ParamStore, Tensor};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::nestedvae::{decode_tensor_block, encode_tensor_block};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub skipped: u64,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
            skipped: 0,
        }
    }

    /// One decoupled-weight-decay Adam update from the gradients in `store`.
    /// Returns `false` (and counts a skip) if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, hp: &AdamHyper) -> bool {
        if store.iter().any(|p| !p.grad.all_finite()) {
            self.skipped += 1;
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j].f64();
                let mj = hp.beta1 * m[j].f64() + (1.0 - hp.beta1) * gj;
                let vj = hp.beta2 * v[j].f64() + (1.0 - hp.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let theta = w.f64();
                *w = T::of(theta - lr * mhat / (vhat.sqrt() + hp.eps) - lr * hp.weight_decay * theta);
            }
        }
        true
    }
}

impl AdamW<f32> {
    pub fn to_bytes(&self, store: &ParamStore<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.skipped.to_le_bytes());
        let named: Vec<(String, Tensor<f32>)> = store
            .iter()
            .zip(&self.m)
            .map(|(p, m)| (format!("m:{}", p.name), m.clone()))
            .chain(store.iter().zip(&self.v).map(|(p, v)| (format!("v:{}", p.name), v.clone())))
            .collect();
        out.extend(encode_tensor_block(&named));
        out
    }

    pub fn from_bytes(bytes: &[u8], store: &ParamStore<f32>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let t = r.u64("optimizer step")?;
        let skipped = r.u64("optimizer skips")?;
        let rest = r.take(r.remaining(), "optimizer moments")?;
        let tensors = decode_tensor_block(rest)?;
        let n = store.len();
        if tensors.len() != 2 * n {
            return Err(Error::Parse(format!("optimizer state has {} tensors, expected {}", tensors.len(), 2 * n)));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, p) in store.iter().enumerate() {
            for (prefix, (name, t), out) in [("m", &tensors[i], &mut m), ("v", &tensors[n + i], &mut v)] {
                if *name != format!("{prefix}:{}", p.name) || t.shape() != p.value.shape() {
                    return Err(Error::Parse(format!("optimizer tensor {name} does not match parameter {}", p.name)));
                }
                out.push(t.clone());
            }
        }
        Ok(AdamW { m, v, t, skipped })
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping was needed).
pub fn clip_global_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = store.grad_sq_norm().sqrt();
    if !norm.is_finite() || norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.scale_in_place(T::of(factor));
    }
    Ok(factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(wd: f64) -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn scalar_store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(theta));
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn closed_form_first_step() {
        let mut s = scalar_store(1.0, 2.0);
        let mut opt = AdamW::new(&s);
        assert!(opt.step(&mut s, 0.1, &hp(0.0)));
        let th = s.iter().next().unwrap().value.data()[0];
        assert!((th - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn pure_decay() {
        let mut s = scalar_store(1.0, 0.0);
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, 0.1, &hp(0.1));
        assert!((s.iter().next().unwrap().value.data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(&s);
        assert!(!opt.step(&mut s, 0.1, &hp(0.0)));
        assert_eq!((opt.t, opt.skipped), (0, 1));
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2]));
        s.get_mut(a).grad = Tensor::new(&[2], vec![6.0, 8.0]).unwrap();
        assert_eq!(clip_global_norm(&mut s, 5.0).unwrap(), 0.5);
        assert!((s.grad_sq_norm().sqrt() - 5.0).abs() < 1e-6);
        assert_eq!(clip_global_norm(&mut s, 5.0).unwrap(), 1.0);
        assert!(clip_global_norm(&mut s, 0.0).is_err());
    }

    #[test]
    fn state_roundtrip() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::full(&[3], 1.0));
        s.get_mut(id).grad = Tensor::full(&[3], 0.5);
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, 0.01, &hp(0.1));
        let bytes = opt.to_bytes(&s);
        assert_eq!(AdamW::from_bytes(&bytes, &s).unwrap(), opt);
        assert!(AdamW::from_bytes(&bytes[..bytes.len() - 1], &s).is_err());
    }
}
