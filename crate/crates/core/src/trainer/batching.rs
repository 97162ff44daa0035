use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{classify_ratio, write_score_table, RatioSet, ScoreRow, Thresholds};
use crate::complexity::{
    heuristic_mock_score, score_description, ComplexityScore, DescriptionRecord, ScorerBackend,
};
use crate::error::{Error, Result};

/// What to do when the scoring backend stays unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    FallBackToMock,
    Fail,
}

pub enum ScorerChoice<'a> {
    Mock,
    Backend {
        backend: &'a dyn ScorerBackend,
        retries: usize,
        on_failure: FailurePolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub id: String,
    pub score: ComplexityScore,
    pub ratio: u32,
    /// The backend failed and the mock heuristic supplied the score.
    pub fell_back: bool,
}

/// Scores every description and maps the score to a ratio.
pub fn assign_ratios(
    items: &[DescriptionRecord],
    scorer: &ScorerChoice<'_>,
    thresholds: Thresholds,
    ratios: RatioSet,
) -> Result<Vec<Assignment>> {
    items
        .iter()
        .map(|rec| {
            let desc = rec.description()?;
            let (score, fell_back) = match scorer {
                ScorerChoice::Mock => (heuristic_mock_score(&desc), false),
                ScorerChoice::Backend {
                    backend,
                    retries,
                    on_failure,
                } => match score_description(&desc, *backend, *retries) {
                    Ok(s) => (s, false),
                    Err(e @ Error::ScoringUnavailable { .. }) => match on_failure {
                        FailurePolicy::Fail => return Err(e),
                        FailurePolicy::FallBackToMock => {
                            log::warn!("{}: {e}; using the mock heuristic", rec.id);
                            (heuristic_mock_score(&desc), true)
                        }
                    },
                    Err(e) => return Err(e),
                },
            };
            Ok(Assignment {
                id: rec.id.clone(),
                score,
                ratio: classify_ratio(score, thresholds, ratios),
                fell_back,
            })
        })
        .collect()
}

/// Writes `(id, score, ratio)` rows in the shared score-table layout.
pub fn write_assignments(path: &Path, assignments: &[Assignment]) -> Result<()> {
    let rows: Vec<ScoreRow> = assignments
        .iter()
        .map(|a| {
            let mut r = ScoreRow::new(a.id.clone());
            r.score = Some(a.score.value());
            r.ratio = Some(a.ratio);
            r.flag_missing();
            r
        })
        .collect();
    write_score_table(path, &rows)
}

/// How the ratio of each batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSampling {
    /// Proportional to the records remaining in each stratum.
    #[default]
    Proportional,
    /// Uniform over strata that still have records.
    Uniform,
}

/// Indices into the dataset, all sharing one ratio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ratio: u32,
    pub indices: Vec<usize>,
}

/// Plans one epoch of ratio-homogeneous batches covering every record once.
pub fn make_batches(
    labels: &[u32],
    batch_size: usize,
    seed: u64,
    sampling: RatioSampling,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios: Vec<u32> = labels.to_vec();
    ratios.sort_unstable();
    ratios.dedup();
    let mut strata: Vec<(u32, Vec<usize>)> = ratios
        .iter()
        .map(|&r| {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == r).collect();
            idx.shuffle(&mut rng);
            (r, idx)
        })
        .collect();
    let mut cursor = vec![0usize; strata.len()];
    let mut out = Vec::new();
    loop {
        let remaining: Vec<usize> = strata.iter().zip(&cursor).map(|((_, v), &c)| v.len() - c).collect();
        let total: usize = remaining.iter().sum();
        if total == 0 {
            break;
        }
        let pick = match sampling {
            RatioSampling::Proportional => {
                let mut x = rng.random_range(0..total);
                remaining
                    .iter()
                    .position(|&n| {
                        if x < n {
                            true
                        } else {
                            x -= n;
                            false
                        }
                    })
                    .expect("total > 0")
            }
            RatioSampling::Uniform => {
                let live: Vec<usize> = (0..strata.len()).filter(|&i| remaining[i] > 0).collect();
                live[rng.random_range(0..live.len())]
            }
        };
        let take = remaining[pick].min(batch_size);
        let (ratio, idx) = &mut strata[pick];
        out.push(Batch {
            ratio: *ratio,
            indices: idx[cursor[pick]..cursor[pick] + take].to_vec(),
        });
        cursor[pick] += take;
    }
    Ok(out)
}
