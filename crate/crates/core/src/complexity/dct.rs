//! Quantized 8x8 block-DCT coefficient count, a size proxy for baseline JPEG.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::backend::Tensor;
use crate::error::{contract, Result};

/// Standard JPEG luminance quantization table (quality 50), row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled to `quality` (1..=100) with the IJG rule.
pub fn scaled_quant_table(quality: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(contract!("JPEG quality {quality} outside 1..=100"));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &base) in out.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// `cos((2x+1) u pi / 16)` scaled by the orthonormal DCT factor, `[u][x]`.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Level-shifted luma plane (`[0,255] - 128`), edge-padded to multiples of 8.
pub fn luma_plane(image: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(contract!("expected 1 or 3 channels, got {c}"));
    }
    if h == 0 || w == 0 {
        return Err(contract!("empty image"));
    }
    let d = image.data();
    let px = |y: usize, x: usize| -> f64 {
        let i = y * w + x;
        let v = if c == 3 {
            0.299 * d[i] as f64 + 0.587 * d[h * w + i] as f64 + 0.114 * d[2 * h * w + i] as f64
        } else {
            d[i] as f64
        };
        v * 255.0 - 128.0
    };
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut plane = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            plane[y * pw + x] = px(y.min(h - 1), x.min(w - 1));
        }
    }
    Ok((plane, ph, pw))
}

/// Number of nonzero quantized DCT coefficients over all 8x8 luma blocks.
pub fn dct_complexity(image: &Tensor<f32>, quality: u8) -> Result<u64> {
    let table = scaled_quant_table(quality)?;
    let (plane, ph, pw) = luma_plane(image)?;
    let b = basis();
    let mut count = 0u64;
    let mut tmp = [[0.0f64; 8]; 8];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            // rows: tmp[y][u] = sum_x f(y,x) b[u][x]
            for (y, trow) in tmp.iter_mut().enumerate() {
                let src = &plane[(by + y) * pw + bx..(by + y) * pw + bx + 8];
                for (u, t) in trow.iter_mut().enumerate() {
                    *t = (0..8).map(|x| src[x] * b[u][x]).sum();
                }
            }
            for v in 0..8 {
                for u in 0..8 {
                    let coeff: f64 = (0..8).map(|y| tmp[y][u] * b[v][y]).sum();
                    if (coeff / table[v * 8 + u] as f64).round() != 0.0 {
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct per-block DCT from the textbook definition.
    fn oracle(image: &Tensor<f32>, quality: u8) -> u64 {
        let (plane, ph, pw) = luma_plane(image).unwrap();
        let table = scaled_quant_table(quality).unwrap();
        let c = |k: usize| if k == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        let mut n = 0;
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                for v in 0..8 {
                    for u in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += plane[(by + y) * pw + bx + x]
                                    * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
                                    * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos();
                            }
                        }
                        let f = 0.25 * c(u) * c(v) * s;
                        if (f / table[v * 8 + u] as f64).round() != 0.0 {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = Tensor::full(&[3, 32, 24], 0.9f32);
        assert_eq!(dct_complexity(&img, 75).unwrap(), 4 * 3);
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = Tensor::<f32>::full(&[3, 0, 8], 0.0);
        assert!(dct_complexity(&img, 75).is_err());
    }

    #[test]
    fn checkerboard_exceeds_constant() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i % 32 + (i / 32) % 32) % 2) as f32);
        let flat = Tensor::full(&[3, 32, 32], 0.9f32);
        assert!(dct_complexity(&img, 50).unwrap() > dct_complexity(&flat, 50).unwrap());
    }

    #[test]
    fn random_image_matches_direct_dct() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let img = Tensor::from_fn(&[3, 64, 64], |_| rng.random::<f32>());
        assert_eq!(dct_complexity(&img, 75).unwrap(), oracle(&img, 75));
        let odd = Tensor::from_fn(&[3, 13, 21], |_| rng.random::<f32>());
        assert_eq!(dct_complexity(&odd, 30).unwrap(), oracle(&odd, 30));
    }

    #[test]
    fn count_grows_with_quality() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i as f32 * 0.05).sin() * 0.3 + 0.5 + rng.random::<f32>() * 0.1);
        let counts: Vec<u64> = (1..=100).map(|q| dct_complexity(&img, q).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert!(dct_complexity(&img, 0).is_err());
        assert!(dct_complexity(&img, 101).is_err());
    }
}
