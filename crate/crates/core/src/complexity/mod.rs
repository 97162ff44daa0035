//! Image complexity: language-model scores from captions, a block-DCT size
//! proxy, and pixel/feature reconstruction metrics.

pub mod dct;
pub mod prompt;
pub mod scorer;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Graph, Tensor};
use crate::error::{contract, Error, Result};
use crate::losses::{lpips_graph, FeatureExtractor};

pub use dct::dct_complexity;
pub use prompt::{build_prompt, format_score, parse_score};
pub use scorer::{
    heuristic_mock_score, score_description, score_description_audited, HttpScorer, MockScorer, ScoreAudit,
    ScorerBackend, SCORER_TOKEN_ENV,
};

/// Caption plus the two perception flags that feed the scoring prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub caption: String,
    pub has_text: bool,
    pub has_faces: bool,
}

impl ImageDescription {
    pub fn new(caption: impl Into<String>, has_text: bool, has_faces: bool) -> Result<Self> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(contract!("caption must be non-empty"));
        }
        Ok(ImageDescription {
            caption,
            has_text,
            has_faces,
        })
    }
}

/// Integer complexity score in `1..=9`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct ComplexityScore(u8);

impl ComplexityScore {
    pub const MIN: i64 = 1;
    pub const MAX: i64 = 9;

    pub fn new(v: i64) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&v) {
            Ok(ComplexityScore(v as u8))
        } else {
            Err(Error::ScoreRange(v))
        }
    }

    pub fn value(self) -> i64 {
        self.0 as i64
    }

    pub fn all() -> impl Iterator<Item = ComplexityScore> {
        (Self::MIN..=Self::MAX).map(|v| ComplexityScore(v as u8))
    }
}

impl TryFrom<i64> for ComplexityScore {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ComplexityScore> for i64 {
    fn from(s: ComplexityScore) -> i64 {
        s.value()
    }
}

/// One line of a caption sidecar file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default)]
    pub has_text: bool,
    #[serde(default)]
    pub has_faces: bool,
}

impl DescriptionRecord {
    pub fn description(&self) -> Result<ImageDescription> {
        ImageDescription::new(self.caption.clone(), self.has_text, self.has_faces)
            .map_err(|e| Error::Parse(format!("record {}: {e}", self.id)))
    }
}

/// Reads a JSON-lines sidecar; blank lines are skipped.
pub fn read_descriptions(path: &Path) -> Result<Vec<DescriptionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DescriptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.description()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_descriptions(path: &Path, records: &[DescriptionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("serializable record");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// PSNR reported when two images are identical.
pub const PSNR_IDENTICAL: f64 = 100.0;

/// Mean squared error over all elements.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(contract!("mse of empty tensors"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// PSNR in dB for a peak of 1.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// Feature-space perceptual distance between two `[3,h,w]` images in `[0,1]`.
pub fn lpips_proxy(extractor: &FeatureExtractor<f32>, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, _, _) = a.dims3()?;
    if c != 3 {
        return Err(contract!("lpips_proxy expects 3 channels, got {c}"));
    }
    let mut g = Graph::new();
    let xa = g.constant(a.clone());
    let xb = g.constant(b.clone());
    let fa = extractor.features(&mut g, xa)?;
    let fb = extractor.features(&mut g, xb)?;
    let d = lpips_graph(&mut g, &fa, &fb)?;
    Ok(g.scalar(d) as f64)
}
