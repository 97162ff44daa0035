//! Three-stratum synthetic corpus: flat gradients, textured blobs and dense
//! glyph grids, each with an auto-generated description.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::complexity::{DescriptionRecord, ImageDescription};
use crate::error::{Error, Result};
use crate::imageio::quantize_8bit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Low,
    Medium,
    High,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Low, Stratum::Medium, Stratum::High];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::Medium => "medium",
            Stratum::High => "high",
        }
    }
}

/// Fractions of low, medium and high images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumMix {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Default for StratumMix {
    fn default() -> Self {
        StratumMix {
            low: 0.45,
            medium: 0.45,
            high: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub id: String,
    pub image: Tensor<f32>,
    pub description: ImageDescription,
    pub stratum: Stratum,
}

impl SyntheticItem {
    pub fn record(&self) -> DescriptionRecord {
        DescriptionRecord {
            id: self.id.clone(),
            caption: self.description.caption.clone(),
            has_text: self.description.has_text,
            has_faces: self.description.has_faces,
        }
    }
}

const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.15, 0.12]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.95, 0.88, 0.2]),
    ("green", [0.2, 0.7, 0.25]),
    ("teal", [0.1, 0.6, 0.6]),
    ("blue", [0.15, 0.3, 0.85]),
    ("purple", [0.5, 0.2, 0.7]),
    ("pink", [0.95, 0.5, 0.7]),
    ("gray", [0.5, 0.5, 0.5]),
    ("brown", [0.5, 0.32, 0.18]),
];

const COUNT_WORDS: [&str; 4] = ["three", "four", "five", "six"];

fn pick_two_colors(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let a = rng.random_range(0..COLORS.len());
    let mut b = rng.random_range(0..COLORS.len() - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn gradient(r: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, String) {
    let (a, b) = pick_two_colors(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (ca, cb) = (COLORS[a].1, COLORS[b].1);
    let plane = r * r;
    let img = Tensor::from_fn(&[3, r, r], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / r) as f32 / (r - 1).max(1) as f32 - 0.5, (p % r) as f32 / (r - 1).max(1) as f32 - 0.5);
        let t = ((x * dx + y * dy) / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        ca[c] * (1.0 - t) + cb[c] * t
    });
    (img, format!("a smooth {} to {} gradient", COLORS[a].0, COLORS[b].0))
}

fn blobs(r: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, String) {
    let (bg, fg) = pick_two_colors(rng);
    let n = rng.random_range(3..=6);
    let rf = r as f32;
    let spots: Vec<(f32, f32, f32, [f32; 3])> = (0..n)
        .map(|_| {
            let shade: f32 = rng.random_range(0.7..1.3);
            let col = COLORS[fg].1.map(|v| (v * shade).clamp(0.0, 1.0));
            (
                rng.random_range(0.1..0.9) * rf,
                rng.random_range(0.1..0.9) * rf,
                rng.random_range(0.08..0.2) * rf,
                col,
            )
        })
        .collect();
    let (fx, fy, phase): (f32, f32, f32) = (
        rng.random_range(0.6..1.2),
        rng.random_range(0.6..1.2),
        rng.random_range(0.0..std::f32::consts::TAU),
    );
    let plane = r * r;
    let base = COLORS[bg].1;
    let img = Tensor::from_fn(&[3, r, r], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / r) as f32, (p % r) as f32);
        let mut v = base[c];
        for &(cx, cy, s, col) in &spots {
            let w = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp();
            v = v * (1.0 - w) + col[c] * w;
        }
        let tex = 0.06 * (fx * x + phase).sin() * (fy * y).cos();
        (v + tex).clamp(0.0, 1.0)
    });
    let caption = format!(
        "a {} background with {} soft {} blobs and fine texture",
        COLORS[bg].0,
        COUNT_WORDS[n - 3],
        COLORS[fg].0
    );
    (img, caption)
}

fn glyphs(r: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, String) {
    const CELL: usize = 8;
    let paper: [f32; 3] = [rng.random_range(0.85..0.98), rng.random_range(0.85..0.98), rng.random_range(0.8..0.95)];
    let ink: [f32; 3] = [rng.random_range(0.0..0.2), rng.random_range(0.0..0.2), rng.random_range(0.0..0.3)];
    let cells = r.div_ceil(CELL);
    // 5x7 random bitmaps in each 8x8 cell.
    let bitmaps: Vec<u64> = (0..cells * cells).map(|_| rng.random::<u64>()).collect();
    let plane = r * r;
    let img = Tensor::from_fn(&[3, r, r], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = (p / r, p % r);
        let (cy, cx) = (y / CELL, x / CELL);
        let (gy, gx) = (y % CELL, x % CELL);
        let on = (1..=7).contains(&gy)
            && (1..=5).contains(&gx)
            && (bitmaps[cy * cells + cx] >> ((gy - 1) * 5 + (gx - 1))) & 1 == 1;
        if on {
            ink[c]
        } else {
            paper[c]
        }
    });
    (img, "a dense page of small black glyphs, letters and digits on paper".to_string())
}

/// Renders one image of a stratum.
pub fn render(stratum: Stratum, resolution: usize, seed: u64) -> Result<(Tensor<f32>, ImageDescription)> {
    if resolution < 8 {
        return Err(Error::Config(format!("synthetic resolution must be >= 8, got {resolution}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, caption) = match stratum {
        Stratum::Low => gradient(resolution, &mut rng),
        Stratum::Medium => blobs(resolution, &mut rng),
        Stratum::High => glyphs(resolution, &mut rng),
    };
    let desc = ImageDescription::new(caption, stratum == Stratum::High, false)?;
    Ok((quantize_8bit(&img), desc))
}

/// `count` images with the given mix, shuffled; stratum sizes are rounded
/// from the mix, with the remainder going to the medium stratum.
pub fn generate(count: usize, resolution: usize, seed: u64, mix: StratumMix) -> Result<Vec<SyntheticItem>> {
    let total = mix.low + mix.medium + mix.high;
    if [mix.low, mix.medium, mix.high].iter().any(|p| !p.is_finite() || *p < 0.0) || total <= 0.0 {
        return Err(Error::Config(format!("invalid stratum mix {mix:?}")));
    }
    let n_low = ((mix.low / total) * count as f64).round() as usize;
    let n_high = (((mix.high / total) * count as f64).round() as usize).min(count - n_low.min(count));
    let n_low = n_low.min(count);
    let mut strata: Vec<Stratum> = std::iter::repeat_n(Stratum::Low, n_low)
        .chain(std::iter::repeat_n(Stratum::High, n_high))
        .chain(std::iter::repeat_n(Stratum::Medium, count - n_low - n_high))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    strata.shuffle(&mut rng);
    strata
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let (image, description) = render(s, resolution, rng.random())?;
            Ok(SyntheticItem {
                id: format!("syn{i:05}"),
                image,
                description,
                stratum: s,
            })
        })
        .collect()
}
