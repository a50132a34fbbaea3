use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SegSample};
use crate::error::{Error, Result};

/// Synthetic lesion generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive range of blobs per image.
    pub lesion_count: [usize; 2],
    /// Target area fraction ranges for small, medium and large lesions.
    pub small: [f64; 2],
    pub medium: [f64; 2],
    pub large: [f64; 2],
    /// Relative frequency of drawing each of the three target ranges.
    pub size_weights: [f64; 3],
    pub texture_amplitude: f64,
    pub noise: f64,
    /// Fractional darkening at the lesion core.
    pub lesion_contrast: f64,
    /// 3×3 box-blur passes softening the lesion rim in the image.
    pub blur_passes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            lesion_count: [1, 1],
            small: [0.001, 0.01],
            medium: [0.01, 0.05],
            large: [0.05, 0.2],
            size_weights: [1.0, 1.0, 1.0],
            texture_amplitude: 0.08,
            noise: 0.02,
            lesion_contrast: 0.35,
            blur_passes: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image side {} is below 16", self.image_size));
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad("lesion_count range is reversed".into());
        }
        for (name, [lo, hi]) in [("small", self.small), ("medium", self.medium), ("large", self.large)] {
            if !(0.0 <= lo && lo <= hi && hi <= 0.5) {
                return bad(format!("{name} area range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 0.5"));
            }
        }
        if self.size_weights.iter().any(|w| !(*w >= 0.0)) || self.size_weights.iter().sum::<f64>() <= 0.0 {
            return bad("size_weights must be non-negative with a positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.lesion_contrast) || self.texture_amplitude < 0.0 || self.noise < 0.0 {
            return bad("contrast must lie in [0, 1]; texture and noise must be non-negative".into());
        }
        Ok(())
    }
}

fn log_uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo <= 0.0 || hi <= lo {
        rng.random_range(lo..=hi)
    } else {
        (rng.random_range(lo.ln()..=hi.ln())).exp()
    }
}

fn box_blur(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut acc = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += x[[yy, xc]];
            }
        }
        acc / 9.0
    })
}

/// Rasterize one perturbed ellipse of roughly `area` pixels into `mask`.
fn draw_blob<R: Rng>(rng: &mut R, mask: &mut Array2<u8>, area: f64) {
    let side = mask.nrows() as f64;
    let aspect = rng.random_range(0.6..=1.0);
    let rx = (area / (PI * aspect)).sqrt().max(0.5);
    let ry = rx * aspect;
    let theta = rng.random_range(0.0..PI);
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let reach = rx * 1.25;
    let (lo, hi) = (reach.min(side / 2.0), (side - reach).max(side / 2.0));
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    let (sin, cos) = theta.sin_cos();
    let mut hit = false;
    for ((y, x), v) in mask.indexed_iter_mut() {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = (dx * cos + dy * sin) / rx;
        let w = (-dx * sin + dy * cos) / ry;
        let phi = w.atan2(u);
        let radius = 1.0 + harmonics.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum::<f64>();
        if (u * u + w * w).sqrt() <= radius {
            *v = 1;
            hit = true;
        }
    }
    if !hit {
        let n = mask.nrows() - 1;
        mask[[(cy as usize).min(n), (cx as usize).min(n)]] = 1;
    }
}

/// Deterministically generate one textured image with zero or more darker
/// blurred blobs. The mask is the exact rasterization of the blobs.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let range = match WeightedIndex::new(cfg.size_weights)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rng)
    {
        0 => cfg.small,
        1 => cfg.medium,
        _ => cfg.large,
    };
    let fraction = log_uniform(&mut rng, range);
    let count = rng.random_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);

    let base = [
        0.80 + rng.random_range(-0.05..0.05),
        0.62 + rng.random_range(-0.05..0.05),
        0.52 + rng.random_range(-0.05..0.05),
    ];
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let norm = waves.iter().map(|w| w[3].abs()).sum::<f64>().max(1e-9);
    let texture = Array2::from_shape_fn((s, s), |(y, x)| {
        let (fy, fx) = (y as f64 / s as f64, x as f64 / s as f64);
        cfg.texture_amplitude
            * waves
                .iter()
                .map(|[a, b, p, amp]| amp * (2.0 * PI * (a * fx + b * fy) + p).sin())
                .sum::<f64>()
            / norm
    });

    let mut mask = Array2::<u8>::zeros((s, s));
    if fraction > 0.0 {
        let per_blob = fraction * (s * s) as f64 / count.max(1) as f64;
        for _ in 0..count {
            draw_blob(&mut rng, &mut mask, per_blob);
        }
    }
    let mut soft = mask.mapv(f64::from);
    for _ in 0..cfg.blur_passes {
        soft = box_blur(&soft);
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let tint = [1.0, 1.25, 1.15];
    let mut image = Array3::zeros((s, s, 3));
    for ((y, x, c), v) in image.indexed_iter_mut() {
        let bg = base[c] + texture[[y, x]];
        let px = bg * (1.0 - cfg.lesion_contrast * tint[c] * soft[[y, x]]) + noise.sample(&mut rng);
        // store exactly what an 8-bit PNG round-trip would give back
        *v = (px.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    SegSample::new(format!("seed{seed}"), image, mask)
}

/// `n` samples named `synth_00000…`, each from its own seed derived from `seed`.
pub fn generate_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let samples = seeds
        .into_iter()
        .enumerate()
        .map(|(i, sd)| {
            let mut s = generate_sample(sd, cfg)?;
            s.id = format!("synth_{i:05}");
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}
