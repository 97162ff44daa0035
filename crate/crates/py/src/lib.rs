//! Python bindings. Images and latents cross the boundary as flat
//! channel-major `list[float]` plus a shape tuple.

use std::collections::BTreeMap;
use std::path::PathBuf;

use adaptok::backend::Tensor;
use adaptok::calibration::{self as cal, RatioDistribution, RatioSet, ScoreHistogram, Thresholds};
use adaptok::complexity::{self as cx, ComplexityScore, ImageDescription};
use adaptok::latentio::{LatentPayload, LatentRecord};
use adaptok::nestedvae::{LatentSample, NestedVae as CoreVae, NestedVaeConfig};
use adaptok::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::ScoringUnavailable { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Shape = Vec<usize>;

fn tensor(data: Vec<f32>, shape: &[usize]) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, data).map_err(err)
}

fn ratios_of(r: (u32, u32, u32)) -> PyResult<RatioSet> {
    RatioSet::new(r.0, r.1, r.2).map_err(err)
}

fn dist_of(p: (f64, f64, f64)) -> PyResult<RatioDistribution> {
    RatioDistribution::new(p.0, p.1, p.2).map_err(err)
}

fn image_of(data: Vec<f32>, resolution: usize) -> PyResult<Tensor<f32>> {
    tensor(data, &[3, resolution, resolution])
}

#[pyfunction]
#[pyo3(signature = (caption, has_text=false, has_faces=false))]
fn build_prompt(caption: String, has_text: bool, has_faces: bool) -> PyResult<String> {
    Ok(cx::build_prompt(&ImageDescription::new(caption, has_text, has_faces).map_err(err)?))
}

#[pyfunction]
fn parse_score(response: &str) -> PyResult<i64> {
    cx::parse_score(response).map(|s| s.value()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (caption, has_text=false, has_faces=false))]
fn heuristic_mock_score(caption: String, has_text: bool, has_faces: bool) -> PyResult<i64> {
    let d = ImageDescription::new(caption, has_text, has_faces).map_err(err)?;
    Ok(cx::heuristic_mock_score(&d).value())
}

#[pyfunction]
fn classify_ratio(score: i64, thresholds: (i64, i64), ratios: (u32, u32, u32)) -> PyResult<u32> {
    let s = ComplexityScore::new(score).map_err(err)?;
    let t = Thresholds::new(thresholds.0, thresholds.1).map_err(err)?;
    Ok(cal::classify_ratio(s, t, ratios_of(ratios)?))
}

#[pyfunction]
fn average_compression(distribution: (f64, f64, f64), ratios: (u32, u32, u32)) -> PyResult<f64> {
    Ok(cal::average_compression(dist_of(distribution)?, ratios_of(ratios)?))
}

/// Ranked qualifying pairs as dicts; `hist[i]` counts score `i + 1`.
#[pyfunction]
#[pyo3(signature = (hist, ratios, target, tolerance=cal::DEFAULT_CALIBRATION_TOLERANCE))]
fn calibrate_thresholds<'py>(
    py: Python<'py>,
    hist: [u64; 9],
    ratios: (u32, u32, u32),
    target: f64,
    tolerance: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let c = cal::calibrate_thresholds(&ScoreHistogram { counts: hist }, ratios_of(ratios)?, target, tolerance)
        .map_err(err)?;
    c.ranked
        .iter()
        .map(|cand| {
            let d = PyDict::new(py);
            d.set_item("thresholds", (cand.thresholds.a, cand.thresholds.b))?;
            d.set_item("distribution", cand.distribution.as_array().to_vec())?;
            d.set_item("achieved", cand.achieved)?;
            d.set_item("entropy", cand.entropy)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn max_acceptable_ratio(mse_by_ratio: BTreeMap<u32, f64>, tau: f64) -> PyResult<u32> {
    cal::max_acceptable_ratio(&mse_by_ratio, tau).map_err(err)
}

#[pyfunction]
fn pearson_r(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    cal::pearson_r(&x, &y).map_err(err)
}

#[pyfunction]
fn exact_agreement(pred: Vec<u32>, oracle: Vec<u32>) -> PyResult<f64> {
    cal::exact_agreement(&pred, &oracle).map_err(err)
}

#[pyfunction]
fn token_accounting(r: u32, f: u32, patch: u32) -> PyResult<u64> {
    cal::token_accounting(r, f, patch).map_err(err)
}

#[pyfunction]
fn avg_tokens(distribution: (f64, f64, f64), r: u32, ratios: (u32, u32, u32), patch: u32) -> PyResult<f64> {
    cal::avg_tokens(dist_of(distribution)?, r, ratios_of(ratios)?, patch).map_err(err)
}

#[pyfunction]
fn token_reduction_percent(tokens: f64, baseline: f64) -> f64 {
    cal::token_reduction_percent(tokens, baseline)
}

#[pyfunction]
#[pyo3(signature = (image, resolution, quality=75))]
fn dct_complexity(image: Vec<f32>, resolution: usize, quality: u8) -> PyResult<u64> {
    cx::dct_complexity(&image_of(image, resolution)?, quality).map_err(err)
}

/// `(mse, psnr)` between two images.
#[pyfunction]
fn pixel_metrics(x: Vec<f32>, xhat: Vec<f32>, resolution: usize) -> PyResult<(f64, f64)> {
    let m = cx::mse(&image_of(x, resolution)?, &image_of(xhat, resolution)?).map_err(err)?;
    Ok((m, cx::psnr_from_mse(m)))
}

#[pyfunction]
fn read_png(path: PathBuf) -> PyResult<(Vec<f32>, Shape)> {
    let t = adaptok::imageio::read_png(&path).map_err(err)?;
    let shape = t.shape().to_vec();
    Ok((t.into_data(), shape))
}

#[pyfunction]
fn write_png(path: PathBuf, image: Vec<f32>, shape: Shape) -> PyResult<()> {
    adaptok::imageio::write_png(&path, &tensor(image, &shape)?).map_err(err)
}

/// Synthetic corpus as dicts with `id`, `caption`, `has_text`, `stratum`, `image`.
#[pyfunction]
#[pyo3(signature = (count, resolution=64, seed=0))]
fn generate_synthetic<'py>(py: Python<'py>, count: usize, resolution: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    adaptok::trainer::generate(count, resolution, seed, Default::default())
        .map_err(err)?
        .into_iter()
        .map(|it| {
            let d = PyDict::new(py);
            d.set_item("id", it.id)?;
            d.set_item("caption", it.description.caption)?;
            d.set_item("has_text", it.description.has_text)?;
            d.set_item("has_faces", it.description.has_faces)?;
            d.set_item("stratum", it.stratum.name())?;
            d.set_item("image", it.image.into_data())?;
            Ok(d)
        })
        .collect()
}

/// Latent records as `(id, ratio, kind, data, shape)`; kind 1 packs mu then
/// logvar in `data`, kind 2 a single sample.
type PyLatent = (String, u32, u8, Vec<f32>, Shape);

#[pyfunction]
fn write_latents(path: PathBuf, records: Vec<PyLatent>) -> PyResult<u64> {
    let recs = records
        .into_iter()
        .map(|(id, ratio, kind, data, shape)| {
            let n: usize = shape.iter().product();
            let payload = match kind {
                1 => {
                    if data.len() != 2 * n {
                        return Err(PyValueError::new_err(format!("{id}: kind 1 needs {} values", 2 * n)));
                    }
                    let (mu, lv) = data.split_at(n);
                    LatentPayload::Distribution {
                        mu: tensor(mu.to_vec(), &shape)?,
                        logvar: tensor(lv.to_vec(), &shape)?,
                    }
                }
                2 => LatentPayload::Sample(tensor(data, &shape)?),
                k => return Err(PyValueError::new_err(format!("{id}: unknown payload kind {k}"))),
            };
            Ok(LatentRecord { id, ratio, payload })
        })
        .collect::<PyResult<Vec<_>>>()?;
    adaptok::latentio::write_latents(&recs, &path).map_err(err)
}

#[pyfunction]
fn read_latents(path: PathBuf) -> PyResult<Vec<PyLatent>> {
    Ok(adaptok::latentio::read_latents(&path)
        .map_err(err)?
        .into_iter()
        .map(|r| {
            let kind = r.payload.kind();
            let shape = r.payload.z().shape().to_vec();
            let data = match r.payload {
                LatentPayload::Distribution { mu, logvar } => {
                    let mut v = mu.into_data();
                    v.extend(logvar.into_data());
                    v
                }
                LatentPayload::Sample(z) => z.into_data(),
            };
            (r.id, r.ratio, kind, data, shape)
        })
        .collect())
}

/// Nested VAE with one encoder tap and decoder entry per ratio.
#[pyclass(name = "NestedVae")]
struct PyNestedVae {
    inner: CoreVae<f32>,
}

#[pymethods]
impl PyNestedVae {
    /// `config` is a JSON object; missing fields take the desk defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: NestedVaeConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
            None => NestedVaeConfig::desk(),
        };
        Ok(PyNestedVae {
            inner: CoreVae::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNestedVae {
            inner: CoreVae::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config.resolution
    }

    #[getter]
    fn ratios(&self) -> (u32, u32, u32) {
        let r = self.inner.config.ratios;
        (r.f1, r.f2, r.f3)
    }

    /// `(mu, logvar, shape)`.
    fn encode(&self, image: Vec<f32>, ratio: u32) -> PyResult<(Vec<f32>, Vec<f32>, Shape)> {
        let d = self.inner.encode(&image_of(image, self.inner.config.resolution)?, ratio).map_err(err)?;
        let shape = d.mu.shape().to_vec();
        Ok((d.mu.into_data(), d.logvar.into_data(), shape))
    }

    fn decode(&self, z: Vec<f32>, ratio: u32) -> PyResult<Vec<f32>> {
        let c = self.inner.config.latent_channels;
        let s = self.inner.config.latent_side(ratio);
        let z = tensor(z, &[c, s, s])?;
        Ok(self.inner.decode(&LatentSample { z, ratio }).map_err(err)?.into_data())
    }

    /// Dict with `recon`, `mu`, `logvar`, `z` and `latent_shape`.
    fn forward<'py>(&self, py: Python<'py>, image: Vec<f32>, ratio: u32, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let o = self
            .inner
            .forward(&image_of(image, self.inner.config.resolution)?, ratio, seed)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("latent_shape", o.dist.mu.shape().to_vec())?;
        d.set_item("recon", o.recon.into_data())?;
        d.set_item("mu", o.dist.mu.into_data())?;
        d.set_item("logvar", o.dist.logvar.into_data())?;
        d.set_item("z", o.z.z.into_data())?;
        Ok(d)
    }

    /// Reconstruction MSE of the 8-bit decode of the posterior mean.
    fn recon_mse(&self, image: Vec<f32>, ratio: u32) -> PyResult<f64> {
        adaptok::trainer::recon_mse(&self.inner, &image_of(image, self.inner.config.resolution)?, ratio).map_err(err)
    }
}

#[pymodule]
fn adaptok_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNestedVae>()?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_score, m)?)?;
    m.add_function(wrap_pyfunction!(heuristic_mock_score, m)?)?;
    m.add_function(wrap_pyfunction!(classify_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(average_compression, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(max_acceptable_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(exact_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(token_accounting, m)?)?;
    m.add_function(wrap_pyfunction!(avg_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(token_reduction_percent, m)?)?;
    m.add_function(wrap_pyfunction!(dct_complexity, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(read_png, m)?)?;
    m.add_function(wrap_pyfunction!(write_png, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(write_latents, m)?)?;
    m.add_function(wrap_pyfunction!(read_latents, m)?)?;
    Ok(())
}
