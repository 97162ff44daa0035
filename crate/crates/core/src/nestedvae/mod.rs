//! A single autoencoder with encoder taps at three downsampling depths.
//!
//! Each tap passes through its own channel-matching ResNet adapter into one
//! shared attention middle block and a shared mean/log-variance head. The
//! decoder mirrors this: shared input conv and middle block, a per-ratio
//! adapter, then only the upsampling blocks below that ratio's depth.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{decode_tensor_block, encode_tensor_block, Checkpoint, NamedTensors, Section};
pub use config::NestedVaeConfig;
pub use model::{
    gaussian_noise, reparameterize, ForwardOutput, ForwardVars, LatentDistribution, LatentSample, NestedVae,
    LOGVAR_MAX, LOGVAR_MIN,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tensor;
    use crate::calibration::RatioSet;

    fn image(r: usize, seed: u64) -> Tensor<f32> {
        gaussian_noise::<f32>(&[3, r, r], seed).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn desk_shapes() {
        let m = NestedVae::<f32>::new(NestedVaeConfig::desk(), 1).unwrap();
        let x = image(64, 2);
        for (f, side) in [(4, 16), (8, 8), (16, 4)] {
            let d = m.encode(&x, f).unwrap();
            assert_eq!(d.mu.shape(), &[4, side, side]);
            assert_eq!(d.logvar.shape(), &[4, side, side]);
            let y = m.decode(&reparameterize(&d, 3)).unwrap();
            assert_eq!(y.shape(), &[3, 64, 64]);
        }
        assert!(m.encode(&x, 32).is_err());
        assert!(m.encode(&image(32, 1), 8).is_err());
    }

    #[test]
    fn deeper_config_shapes() {
        let mut c = NestedVaeConfig::compact(32, 2, RatioSet::new(2, 4, 8).unwrap());
        c.block_out_channels = vec![4, 8, 8, 12, 16];
        let m = NestedVae::<f32>::new(c, 1).unwrap();
        for f in [2, 4, 8] {
            let d = m.encode(&image(32, 1), f).unwrap();
            assert_eq!(d.mu.shape(), &[2, 32 / f as usize, 32 / f as usize]);
            assert_eq!(m.decode(&reparameterize(&d, 0)).unwrap().shape(), &[3, 32, 32]);
        }
    }

    #[test]
    fn zero_head_outputs_mid_gray() {
        let m = NestedVae::<f32>::new(NestedVaeConfig::compact(16, 2, RatioSet::new(2, 4, 8).unwrap()), 1).unwrap();
        let out = m.forward(&image(16, 3), 4, 9).unwrap();
        assert!(out.recon.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reparameterize_degenerate_and_seeded() {
        let mu = Tensor::from_fn(&[2, 3, 3], |i| i as f32 * 0.1);
        let d = LatentDistribution {
            mu: mu.clone(),
            logvar: Tensor::full(&[2, 3, 3], LOGVAR_MIN as f32),
            ratio: 4,
        };
        assert!(reparameterize(&d, 1).z.max_abs_diff(&mu) < 1e-6);
        let d = LatentDistribution {
            logvar: Tensor::zeros(&[2, 3, 3]),
            ..d
        };
        assert_eq!(reparameterize(&d, 5), reparameterize(&d, 5));
        assert_ne!(reparameterize(&d, 5), reparameterize(&d, 6));
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let m = NestedVae::<f32>::new(NestedVaeConfig::smallest(), 1).unwrap();
        let z = LatentSample {
            z: Tensor::zeros(&[2, 2, 2]),
            ratio: 2,
        };
        assert!(m.decode(&z).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = NestedVae::<f32>::new(NestedVaeConfig::smallest(), 4).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.sections.push(Section {
            tag: *b"TEST",
            payload: vec![1, 2, 3],
        });
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.into_model().unwrap();
        assert!(m2.store.values_identical(&m.store));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut wrong = ck.clone();
        wrong.params.pop();
        assert!(wrong.into_model().is_err());
        let mut wrong = ck;
        let shape = wrong.params[0].1.shape().to_vec();
        wrong.params[0].1 = Tensor::zeros(&[shape.iter().product::<usize>()]);
        assert!(wrong.into_model().is_err());
    }
}
