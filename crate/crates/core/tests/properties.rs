mod common;

use std::collections::BTreeMap;

use adaptok::calibration::{
    average_compression, calibrate_thresholds, exact_agreement, max_acceptable_ratio, pearson_r, RatioDistribution,
    RatioSet, ScoreHistogram,
};
use adaptok::latentio::{decode_latents, encode_latents, LatentPayload, LatentRecord};
use adaptok::backend::Tensor;
use common::oracles;
use proptest::prelude::*;

fn set_strategy() -> impl Strategy<Value = [u32; 3]> {
    prop::sample::select(vec![[2, 4, 8], [4, 8, 16], [8, 16, 32]])
}

proptest! {
    #[test]
    fn calibration_matches_exhaustive_scan(
        counts in prop::array::uniform9(0u64..40),
        set in set_strategy(),
        t in 0.0f64..1.0,
        tol in 0.0f64..0.15,
    ) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let target = set[0] as f64 + t * (set[2] - set[0]) as f64;
        let rs = RatioSet::new(set[0], set[1], set[2]).unwrap();
        let got: Vec<(i64, i64)> = calibrate_thresholds(&ScoreHistogram { counts }, rs, target, tol)
            .unwrap()
            .ranked
            .iter()
            .map(|c| (c.thresholds.a, c.thresholds.b))
            .collect();
        prop_assert_eq!(got, oracles::calibrate(counts, set, target, tol));
    }

    #[test]
    fn average_compression_lies_between_extremes(w in prop::array::uniform3(0.0f64..1.0), set in set_strategy()) {
        let s: f64 = w.iter().sum();
        prop_assume!(s > 1e-6);
        let p = w.map(|v| v / s);
        let d = RatioDistribution::new(p[0], p[1], p[2]).unwrap();
        let v = average_compression(d, RatioSet::new(set[0], set[1], set[2]).unwrap());
        prop_assert!(v >= set[0] as f64 - 1e-9 && v <= set[2] as f64 + 1e-9);
        prop_assert!((v - oracles::average_compression(p, set)).abs() < 1e-9);
    }

    #[test]
    fn acceptable_ratio_matches_brute_force(m in prop::array::uniform3(0.0f64..0.01), tau in 1e-5f64..5e-3) {
        let arr = [(8, m[0]), (16, m[1]), (32, m[2])];
        let map: BTreeMap<u32, f64> = arr.into_iter().collect();
        let f = max_acceptable_ratio(&map, tau).unwrap();
        prop_assert_eq!(f, oracles::max_acceptable_ratio(arr, tau));
        // Loosening the tolerance never lowers the ratio.
        prop_assert!(max_acceptable_ratio(&map, tau * 2.0).unwrap() >= f);
    }

    #[test]
    fn pearson_is_affine_invariant(
        xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let r = match pearson_r(&x, &y) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        prop_assert!((r - oracles::pearson(&x, &y)).abs() < 1e-9);
        let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((pearson_r(&x2, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson_r(&y, &x).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson_r(&x, &neg).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn agreement_matches_count(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..50)) {
        let f = [4u32, 8, 16];
        let p: Vec<u32> = pairs.iter().map(|x| f[x.0]).collect();
        let q: Vec<u32> = pairs.iter().map(|x| f[x.1]).collect();
        let v = exact_agreement(&p, &q).unwrap();
        prop_assert_eq!(v, oracles::agreement(&p, &q));
        prop_assert_eq!(exact_agreement(&p, &p).unwrap(), 100.0);
    }

    #[test]
    fn latents_round_trip(
        c in 1usize..4,
        recs in prop::collection::vec(("[a-z0-9_]{0,10}", 1u32..=64, 1usize..4, any::<bool>(), prop::collection::vec(any::<u32>(), 96)), 0..4),
    ) {
        let records: Vec<LatentRecord> = recs
            .into_iter()
            .map(|(id, ratio, side, dist, raw)| {
                let n = c * side * side;
                let t = |off: usize| Tensor::from_fn(&[c, side, side], |i| f32::from_bits(raw[off + i]));
                let payload = if dist {
                    LatentPayload::Distribution { mu: t(0), logvar: t(n) }
                } else {
                    LatentPayload::Sample(t(0))
                };
                LatentRecord { id, ratio, payload }
            })
            .collect();
        let bytes = encode_latents(&records).unwrap();
        let back = decode_latents(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        prop_assert_eq!(encode_latents(&back).unwrap(), bytes);
    }
}
