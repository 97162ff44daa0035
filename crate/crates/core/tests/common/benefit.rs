//! Adaptive versus fixed-ratio training on the synthetic corpus.

use std::path::Path;
use std::time::Instant;

use adaptok::calibration::{
    calibrate_thresholds, classify_ratio, RatioDistribution, ScoreHistogram, Thresholds, DEFAULT_CALIBRATION_TOLERANCE,
};
use adaptok::complexity::heuristic_mock_score;
use adaptok::nestedvae::{NestedVae, NestedVaeConfig};
use adaptok::trainer::{
    generate, recon_mse, render, train_loop, LabeledDataset, LabeledRecord, Stratum, StratumMix, TrainConfig,
    TrainOptions,
};

pub struct BenefitReport {
    pub thresholds: Thresholds,
    /// Held-out MSE per stratum (low, medium, high) per ratio (f1, f2, f3).
    pub stratum_mse: [[f64; 3]; 3],
    pub adaptive_tokens: f64,
    pub fixed_tokens: f64,
    pub adaptive_mse: f64,
    pub fixed_mse: f64,
    pub train_seconds: f64,
}

fn labeled(items: &[adaptok::trainer::SyntheticItem], ratio_of: impl Fn(&adaptok::trainer::SyntheticItem) -> u32) -> LabeledDataset {
    LabeledDataset {
        records: items
            .iter()
            .map(|i| LabeledRecord {
                id: i.id.clone(),
                image: i.image.clone(),
                description: i.description.clone(),
                ratio: ratio_of(i),
            })
            .collect(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run(config: &TrainConfig, train_count: usize, eval_per_stratum: usize, out: &Path) -> BenefitReport {
    let mc = NestedVaeConfig::desk();
    let ratios = mc.ratios;
    let r = mc.resolution;
    let train = generate(train_count, r, config.seed, StratumMix::default()).unwrap();

    let hist = ScoreHistogram::from_scores(train.iter().map(|i| heuristic_mock_score(&i.description)));
    let cal = calibrate_thresholds(&hist, ratios, ratios.f2 as f64, DEFAULT_CALIBRATION_TOLERANCE).unwrap();
    let thresholds = cal.ranked.first().expect("a qualifying threshold pair").thresholds;
    let assign = |i: &adaptok::trainer::SyntheticItem| classify_ratio(heuristic_mock_score(&i.description), thresholds, ratios);

    let t0 = Instant::now();
    let opts = |name: &str| TrainOptions {
        checkpoint_dir: out.join(name),
        resume_from: None,
    };
    let adaptive = train_loop(&labeled(&train, assign), &mc, config, &opts("adaptive")).unwrap();
    let fixed = train_loop(&labeled(&train, |_| ratios.f2), &mc, config, &opts("fixed")).unwrap();
    let train_seconds = t0.elapsed().as_secs_f64();

    let model: &NestedVae<f32> = &adaptive.trainer.model;
    let eval_seed = config.seed ^ 0xe7a1;
    let mut stratum_mse = [[0.0; 3]; 3];
    for (s, stratum) in Stratum::ALL.into_iter().enumerate() {
        for (n, f) in ratios.as_array().into_iter().enumerate() {
            let v: Vec<f64> = (0..eval_per_stratum)
                .map(|k| {
                    let (img, _) = render(stratum, r, eval_seed + (s * 100_000 + k) as u64).unwrap();
                    recon_mse(model, &img, f).unwrap()
                })
                .collect();
            stratum_mse[s][n] = mean(&v);
        }
    }

    let held_out = generate(eval_per_stratum * 4, r, eval_seed, StratumMix::default()).unwrap();
    let labels: Vec<u32> = held_out.iter().map(assign).collect();
    let dist = RatioDistribution::from_labels(&labels, ratios).unwrap();
    let adaptive_tokens = adaptok::calibration::avg_tokens(dist, r as u32, ratios, 1).unwrap();
    let fixed_tokens = adaptok::calibration::token_accounting(r as u32, ratios.f2, 1).unwrap() as f64;
    let adaptive_mse = mean(
        &held_out
            .iter()
            .zip(&labels)
            .map(|(i, &f)| recon_mse(model, &i.image, f).unwrap())
            .collect::<Vec<_>>(),
    );
    let fixed_mse = mean(
        &held_out
            .iter()
            .map(|i| recon_mse(&fixed.trainer.model, &i.image, ratios.f2).unwrap())
            .collect::<Vec<_>>(),
    );
    BenefitReport {
        thresholds,
        stratum_mse,
        adaptive_tokens,
        fixed_tokens,
        adaptive_mse,
        fixed_mse,
        train_seconds,
    }
}
