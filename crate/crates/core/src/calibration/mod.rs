//! Score-to-ratio mapping, threshold calibration against a target average
//! compression, the max-acceptable-ratio oracle and validation statistics.

pub mod table;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::complexity::ComplexityScore;
use crate::error::{contract, Error, Result};

pub use table::{read_score_table, write_score_table, ScoreRow, SCORE_TABLE_COLUMNS};

/// Three compression ratios `f1 < f2 < f3`, each a power of two and each
/// double the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RatioSet {
    pub f1: u32,
    pub f2: u32,
    pub f3: u32,
}

impl RatioSet {
    pub fn new(f1: u32, f2: u32, f3: u32) -> Result<Self> {
        if f1 == 0 || !f1.is_power_of_two() || f2 != 2 * f1 || f3 != 2 * f2 {
            return Err(Error::Config(format!(
                "ratios ({f1},{f2},{f3}) must be powers of two with f2 = 2 f1 and f3 = 2 f2"
            )));
        }
        Ok(RatioSet { f1, f2, f3 })
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.f1, self.f2, self.f3]
    }

    pub fn contains(&self, f: u32) -> bool {
        self.as_array().contains(&f)
    }

    /// Position (0, 1, 2) of `f` in the set.
    pub fn index_of(&self, f: u32) -> Result<usize> {
        self.as_array()
            .iter()
            .position(|&x| x == f)
            .ok_or_else(|| Error::Config(format!("ratio {f} not in {self}")))
    }
}

impl fmt::Display for RatioSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.f1, self.f2, self.f3)
    }
}

impl std::str::FromStr for RatioSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("ratios {s:?}: {e}")))?;
        match v[..] {
            [a, b, c] => RatioSet::new(a, b, c),
            _ => Err(Error::Parse(format!("ratios {s:?}: expected three values"))),
        }
    }
}

/// Score cut points: `[1,a]` maps to f3, `(a,b]` to f2, `(b,9]` to f1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Thresholds {
    pub a: i64,
    pub b: i64,
}

impl Thresholds {
    pub fn new(a: i64, b: i64) -> Result<Self> {
        if !(1 <= a && a < b && b <= 9) {
            return Err(Error::Config(format!("thresholds ({a},{b}) must satisfy 1 <= a < b <= 9")));
        }
        Ok(Thresholds { a, b })
    }

    /// All 36 valid pairs in lexicographic order.
    pub fn all() -> impl Iterator<Item = Thresholds> {
        (1..=8).flat_map(|a| ((a + 1)..=9).map(move |b| Thresholds { a, b }))
    }
}

impl fmt::Display for Thresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.a, self.b)
    }
}

impl std::str::FromStr for Thresholds {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("thresholds {s:?}: expected a,b")))?;
        let p = |x: &str| {
            x.trim()
                .parse::<i64>()
                .map_err(|e| Error::Parse(format!("thresholds {s:?}: {e}")))
        };
        Thresholds::new(p(a)?, p(b)?)
    }
}

/// Counts of scores 1..=9 (index 0 holds score 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub counts: [u64; 9],
}

impl ScoreHistogram {
    pub fn from_scores<I: IntoIterator<Item = ComplexityScore>>(scores: I) -> Self {
        let mut h = ScoreHistogram::default();
        for s in scores {
            h.counts[(s.value() - 1) as usize] += 1;
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ratio distribution induced by thresholds.
    pub fn induced(&self, t: Thresholds) -> Result<RatioDistribution> {
        let total = self.total();
        if total == 0 {
            return Err(contract!("empty score histogram"));
        }
        let (a, b) = (t.a as usize, t.b as usize);
        let low: u64 = self.counts[..a].iter().sum();
        let mid: u64 = self.counts[a..b].iter().sum();
        let high: u64 = self.counts[b..].iter().sum();
        let n = total as f64;
        Ok(RatioDistribution {
            p1: high as f64 / n,
            p2: mid as f64 / n,
            p3: low as f64 / n,
        })
    }
}

/// Probabilities of assigning f1, f2, f3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioDistribution {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

impl RatioDistribution {
    pub fn new(p1: f64, p2: f64, p3: f64) -> Result<Self> {
        let ok = [p1, p2, p3].iter().all(|p| p.is_finite() && *p >= 0.0);
        if !ok || (p1 + p2 + p3 - 1.0).abs() > 1e-9 {
            return Err(contract!("ratio distribution ({p1},{p2},{p3}) must be non-negative and sum to 1"));
        }
        Ok(RatioDistribution { p1, p2, p3 })
    }

    /// Empirical distribution of a label sequence.
    pub fn from_labels(labels: &[u32], ratios: RatioSet) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract!("no labels"));
        }
        let mut c = [0usize; 3];
        for &l in labels {
            c[ratios.index_of(l)?] += 1;
        }
        let n = labels.len() as f64;
        Ok(RatioDistribution {
            p1: c[0] as f64 / n,
            p2: c[1] as f64 / n,
            p3: c[2] as f64 / n,
        })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p1, self.p2, self.p3]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        // 0.0 - x keeps a degenerate distribution at +0.0 rather than -0.0.
        0.0 - self
            .as_array()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Higher scores map to lower compression.
pub fn classify_ratio(score: ComplexityScore, t: Thresholds, ratios: RatioSet) -> u32 {
    let s = score.value();
    if s <= t.a {
        ratios.f3
    } else if s <= t.b {
        ratios.f2
    } else {
        ratios.f1
    }
}

/// The single ratio whose token count equals the expected token count.
pub fn average_compression(dist: RatioDistribution, ratios: RatioSet) -> f64 {
    let inv: f64 = dist
        .as_array()
        .iter()
        .zip(ratios.as_array())
        .map(|(p, f)| p / (f as f64 * f as f64))
        .sum();
    1.0 / inv.sqrt()
}

pub const DEFAULT_CALIBRATION_TOLERANCE: f64 = 0.05;

/// Differences below this are treated as ties when ranking.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub thresholds: Thresholds,
    pub distribution: RatioDistribution,
    pub achieved: f64,
    pub entropy: f64,
}

impl Candidate {
    fn gap(&self, target: f64) -> f64 {
        (self.achieved - target).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    /// Qualifying pairs, best first.
    pub ranked: Vec<Candidate>,
    /// Pair with the smallest `|achieved - target|` over all 36.
    pub closest: Candidate,
    /// Set when nothing qualified.
    pub diagnostic: Option<String>,
}

fn tie_cmp(x: f64, y: f64) -> std::cmp::Ordering {
    if (x - y).abs() <= TIE_EPS {
        std::cmp::Ordering::Equal
    } else {
        x.total_cmp(&y)
    }
}

/// Ranks every threshold pair whose induced average compression is within
/// `tolerance` (relative) of `target`: entropy descending, then distance to
/// target, then `(a, b)`.
pub fn calibrate_thresholds(
    hist: &ScoreHistogram,
    ratios: RatioSet,
    target: f64,
    tolerance: f64,
) -> Result<Calibration> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Config(format!("target ratio must be positive, got {target}")));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let all: Vec<Candidate> = Thresholds::all()
        .map(|t| {
            let d = hist.induced(t)?;
            Ok(Candidate {
                thresholds: t,
                distribution: d,
                achieved: average_compression(d, ratios),
                entropy: d.entropy(),
            })
        })
        .collect::<Result<_>>()?;
    let closest = *all
        .iter()
        .min_by(|x, y| tie_cmp(x.gap(target), y.gap(target)).then(x.thresholds.cmp(&y.thresholds)))
        .expect("36 pairs");
    let mut ranked: Vec<Candidate> = all
        .into_iter()
        .filter(|c| c.gap(target) / target <= tolerance)
        .collect();
    ranked.sort_by(|x, y| {
        tie_cmp(y.entropy, x.entropy)
            .then(tie_cmp(x.gap(target), y.gap(target)))
            .then(x.thresholds.cmp(&y.thresholds))
    });
    let diagnostic = ranked.is_empty().then(|| {
        format!(
            "no threshold pair within {:.1}% of target {target}; closest is ({}) with average {:.4}",
            tolerance * 100.0,
            closest.thresholds,
            closest.achieved
        )
    });
    Ok(Calibration {
        ranked,
        closest,
        diagnostic,
    })
}

/// Largest ratio whose MSE exceeds the best ratio's MSE by less than `tau`.
pub fn max_acceptable_ratio(mse_by_ratio: &BTreeMap<u32, f64>, tau: f64) -> Result<u32> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let r: Vec<u32> = mse_by_ratio.keys().copied().collect();
    if r.len() != 3 {
        return Err(contract!("expected MSE at three ratios, got {}", r.len()));
    }
    RatioSet::new(r[0], r[1], r[2]).map_err(|e| contract!("{e}"))?;
    if let Some((f, m)) = mse_by_ratio.iter().find(|(_, m)| !m.is_finite()) {
        return Err(contract!("non-finite MSE {m} at ratio {f}"));
    }
    let best = mse_by_ratio.values().copied().fold(f64::INFINITY, f64::min);
    Ok(mse_by_ratio
        .iter()
        .filter(|(_, &m)| m - best < tau)
        .map(|(&f, _)| f)
        .max()
        .expect("the minimizer always qualifies"))
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(contract!("pearson_r length mismatch: {} vs {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(contract!("pearson_r needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Percentage of positions where `pred` equals `oracle`.
pub fn exact_agreement(pred: &[u32], oracle: &[u32]) -> Result<f64> {
    if pred.len() != oracle.len() {
        return Err(contract!("exact_agreement length mismatch: {} vs {}", pred.len(), oracle.len()));
    }
    if pred.is_empty() {
        return Err(contract!("exact_agreement of empty sequences"));
    }
    let hits = pred.iter().zip(oracle).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Tokens for one image: `(r / (f * patch))^2`.
pub fn token_accounting(r: u32, f: u32, patch: u32) -> Result<u64> {
    let unit = f as u64 * patch as u64;
    if unit == 0 || r == 0 || !(r as u64).is_multiple_of(unit) {
        return Err(Error::Config(format!("resolution {r} not divisible by ratio {f} x patch {patch}")));
    }
    let side = r as u64 / unit;
    Ok(side * side)
}

/// Expected tokens per image under a ratio distribution.
pub fn avg_tokens(dist: RatioDistribution, r: u32, ratios: RatioSet, patch: u32) -> Result<f64> {
    let mut s = 0.0;
    for (p, f) in dist.as_array().iter().zip(ratios.as_array()) {
        s += p * token_accounting(r, f, patch)? as f64;
    }
    Ok(s)
}

/// Percentage reduction of `tokens` relative to `baseline`.
pub fn token_reduction_percent(tokens: f64, baseline: f64) -> f64 {
    100.0 * (1.0 - tokens / baseline)
}

/// Cut points on a scalar complexity metric (e.g. DCT count or an encoded
/// byte size): values `<= lo` get f3, `<= hi` get f2, larger values get f1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    pub lo: f64,
    pub hi: f64,
}

impl MetricThresholds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("metric thresholds ({lo},{hi}) must be finite with lo <= hi")));
        }
        Ok(MetricThresholds { lo, hi })
    }
}

pub fn classify_by_metric(value: f64, t: MetricThresholds, ratios: RatioSet) -> u32 {
    if value <= t.lo {
        ratios.f3
    } else if value <= t.hi {
        ratios.f2
    } else {
        ratios.f1
    }
}

/// Metric cut points at the empirical quantiles that reproduce `dist`: the
/// lowest `p3` share of values goes to f3 and the highest `p1` share to f1.
pub fn metric_thresholds_for(values: &[f64], dist: RatioDistribution) -> Result<MetricThresholds> {
    if values.is_empty() {
        return Err(contract!("no metric values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(contract!("non-finite metric value"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let k3 = (dist.p3 * n as f64).round() as usize;
    let k2 = ((dist.p3 + dist.p2) * n as f64).round() as usize;
    let cut = |k: usize| if k == 0 { v[0] - 1.0 } else { v[k.min(n) - 1] };
    MetricThresholds::new(cut(k3), cut(k2).max(cut(k3)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rs(a: u32, b: u32, c: u32) -> RatioSet {
        RatioSet::new(a, b, c).unwrap()
    }

    fn score(v: i64) -> ComplexityScore {
        ComplexityScore::new(v).unwrap()
    }

    #[test]
    fn ratio_set_rules() {
        assert!(RatioSet::new(8, 16, 32).is_ok());
        assert!(RatioSet::new(8, 16, 48).is_err());
        assert!(RatioSet::new(3, 6, 12).is_err());
        assert!(RatioSet::new(0, 0, 0).is_err());
        assert_eq!("4,8,16".parse::<RatioSet>().unwrap(), rs(4, 8, 16));
        assert!("4,8".parse::<RatioSet>().is_err());
    }

    #[test]
    fn threshold_pairs() {
        assert_eq!(Thresholds::all().count(), 36);
        assert!(Thresholds::new(5, 5).is_err());
        assert!(Thresholds::new(0, 3).is_err());
        assert_eq!("4,7".parse::<Thresholds>().unwrap(), Thresholds { a: 4, b: 7 });
    }

    #[test]
    fn classify_bands() {
        let r = rs(8, 16, 32);
        let t = Thresholds::new(4, 7).unwrap();
        assert_eq!(classify_ratio(score(4), t, r), 32);
        assert_eq!(classify_ratio(score(5), t, r), 16);
        assert_eq!(classify_ratio(score(8), t, r), 8);
        for t in Thresholds::all() {
            assert_eq!(classify_ratio(score(1), t, r), 32);
            let top = if t.b < 9 { 8 } else { 16 };
            assert_eq!(classify_ratio(score(9), t, r), top);
        }
    }

    #[test]
    fn average_compression_cases() {
        let r = rs(8, 16, 32);
        let d = RatioDistribution::new(0.10, 0.48, 0.42).unwrap();
        assert!((average_compression(d, r) - 16.0).abs() <= 0.2);
        let d = RatioDistribution::new(0.005, 0.895, 0.10).unwrap();
        assert!((average_compression(d, r) - 16.5).abs() <= 0.2);
        let d = RatioDistribution::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(average_compression(d, r), 16.0);
        assert!(RatioDistribution::new(0.5, 0.6, 0.0).is_err());
    }

    #[test]
    fn single_mass_histogram() {
        let mut h = ScoreHistogram::default();
        h.counts[4] = 10;
        let cal = calibrate_thresholds(&h, rs(8, 16, 32), 16.0, 0.05).unwrap();
        let want: Vec<Thresholds> = Thresholds::all().filter(|t| t.a < 5 && 5 <= t.b).collect();
        let mut got: Vec<Thresholds> = cal.ranked.iter().map(|c| c.thresholds).collect();
        got.sort();
        assert_eq!(got, want);
        assert!(cal.ranked.iter().all(|c| c.entropy == 0.0));
        assert!(cal.diagnostic.is_none());
    }

    #[test]
    fn unreachable_target_reports_closest() {
        let mut h = ScoreHistogram::default();
        h.counts[0] = 3;
        let cal = calibrate_thresholds(&h, rs(8, 16, 32), 8.0, 0.05).unwrap();
        assert!(cal.ranked.is_empty());
        assert!(cal.diagnostic.unwrap().contains("closest"));
        assert_eq!(cal.closest.achieved, 32.0);
        assert!(calibrate_thresholds(&ScoreHistogram::default(), rs(8, 16, 32), 16.0, 0.05).is_err());
        assert!(calibrate_thresholds(&h, rs(8, 16, 32), 0.0, 0.05).is_err());
    }

    #[test]
    fn oracle_examples() {
        let m = |a, b, c| BTreeMap::from([(8, a), (16, b), (32, c)]);
        assert_eq!(max_acceptable_ratio(&m(0.1, 0.1, 0.1), 1e-4).unwrap(), 32);
        assert_eq!(max_acceptable_ratio(&m(0.0040, 0.0041, 0.0060), 0.0015).unwrap(), 16);
        assert!(max_acceptable_ratio(&m(0.1, f64::NAN, 0.1), 1e-4).is_err());
        assert!(max_acceptable_ratio(&m(0.1, 0.1, 0.1), 0.0).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson_r(&x, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn agreement_cases() {
        assert_eq!(exact_agreement(&[8, 16], &[8, 16]).unwrap(), 100.0);
        assert_eq!(exact_agreement(&[8, 16], &[16, 8]).unwrap(), 0.0);
        assert_eq!(exact_agreement(&[8, 16, 32, 16], &[8, 32, 32, 8]).unwrap(), 50.0);
        assert!(exact_agreement(&[8], &[8, 8]).is_err());
    }

    #[test]
    fn tokens() {
        assert_eq!(token_accounting(512, 16, 2).unwrap(), 256);
        assert_eq!(token_accounting(512, 32, 2).unwrap(), 64);
        assert_eq!(token_accounting(512, 8, 2).unwrap(), 1024);
        assert!(matches!(token_accounting(100, 16, 2), Err(Error::Config(_))));
        let red = token_reduction_percent(197.44, 256.0);
        assert!((22.85..=23.1).contains(&red));
        assert_eq!(format!("{red:.1}"), "22.9");
        let d = RatioDistribution::new(0.10, 0.48, 0.42).unwrap();
        let t = avg_tokens(d, 512, rs(8, 16, 32), 2).unwrap();
        assert!((t - (0.10 * 1024.0 + 0.48 * 256.0 + 0.42 * 64.0)).abs() < 1e-9);
    }

    #[test]
    fn metric_quantiles_reproduce_distribution() {
        let values: Vec<f64> = (0..100).map(|i| (i * 37 % 100) as f64).collect();
        let d = RatioDistribution::new(0.2, 0.5, 0.3).unwrap();
        let t = metric_thresholds_for(&values, d).unwrap();
        let r = rs(4, 8, 16);
        let labels: Vec<u32> = values.iter().map(|&v| classify_by_metric(v, t, r)).collect();
        let got = RatioDistribution::from_labels(&labels, r).unwrap();
        assert!((got.p1 - 0.2).abs() < 1e-12 && (got.p3 - 0.3).abs() < 1e-12);
    }
}
