//! Synthetic soft-blob scenes composed as `αF + (1−α)B + noise`.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::fusion::{equispaced_masks, AnnotationSet, ThresholdRange};
use crate::imaging::{AlphaMatte, Image};

use super::gaussian_blur;

pub const MIN_SYNTH_SIZE: usize = 16;

/// Foreground and background intensity fields, `[C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub foreground: Array3<f64>,
    pub background: Array3<f64>,
    pub alpha: AlphaMatte,
    pub noise_sigma: f64,
}

impl SyntheticScene {
    /// Scene with per-channel constant intensities.
    pub fn uniform(foreground: &[f64], background: &[f64], alpha: AlphaMatte, noise_sigma: f64) -> Self {
        let (h, w) = alpha.dim();
        let fill = |v: &[f64]| Array3::from_shape_fn((v.len(), h, w), |(c, _, _)| v[c]);
        Self {
            foreground: fill(foreground),
            background: fill(background),
            alpha,
            noise_sigma,
        }
    }

    /// `αF + (1−α)B` per channel, no noise.
    pub fn compose_clean(&self) -> Array3<f64> {
        let a = self.alpha.values();
        Array3::from_shape_fn(self.foreground.dim(), |(c, y, x)| {
            let t = a[[y, x]];
            t * self.foreground[[c, y, x]] + (1.0 - t) * self.background[[c, y, x]]
        })
    }

    /// The clean composite plus Gaussian noise, clipped to `[0, 1]`.
    pub fn compose(&self, rng: &mut impl Rng) -> Result<Image> {
        let mut pixels = self.compose_clean();
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma)
                .map_err(|e| MattingError::Domain(format!("noise sigma: {e}")))?;
            pixels.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
        }
        Image::new(pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub noise_sigma: f64,
    /// Simulated raters per sample.
    pub annotators: usize,
    /// Blur applied to the ramped matte edge, in pixels.
    pub edge_blur: f64,
    /// Peak deviation of F and B from their base intensities; 0 gives
    /// constant colours.
    pub field_amplitude: f64,
    /// Smoothness of the F and B fields as a fraction of the side length.
    pub field_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            noise_sigma: 0.02,
            annotators: 4,
            edge_blur: 1.0,
            field_amplitude: 0.2,
            field_scale: 0.15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub alpha: AlphaMatte,
    pub annotations: AnnotationSet,
}

impl Sample {
    /// Derives the rater masks from equispaced thresholds of `alpha`.
    pub fn from_alpha(id: impl Into<String>, image: Image, alpha: AlphaMatte, raters: usize) -> Result<Self> {
        let masks = equispaced_masks(&alpha, raters, ThresholdRange::default())?;
        let annotations = AnnotationSet::new(image.clone(), masks)?;
        Ok(Self {
            id: id.into(),
            image,
            alpha,
            annotations,
        })
    }
}

/// A rotated ellipse whose edge ramps linearly from 1 to 0 over `ramp`
/// pixels, then gets blurred.
pub fn random_blob(size: usize, edge_blur: f64, rng: &mut impl Rng) -> AlphaMatte {
    let s = size as f64;
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let ry = rng.random_range(0.15 * s..0.3 * s);
    let rx = rng.random_range(0.15 * s..0.3 * s);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let ramp = rng.random_range(0.05 * s..0.2 * s);
    let (sin, cos) = theta.sin_cos();
    let raw = Array2::from_shape_fn((size, size), |(y, x)| {
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        let u = (cos * dx + sin * dy) / rx;
        let v = (-sin * dx + cos * dy) / ry;
        // Distance past the boundary, in pixels along the mean radius.
        let past = ((u * u + v * v).sqrt() - 1.0) * 0.5 * (rx + ry);
        (0.5 - past / ramp).clamp(0.0, 1.0)
    });
    AlphaMatte::from_clipped(gaussian_blur(&raw, edge_blur))
}

/// Base intensity plus blurred noise rescaled to peak `amplitude`, clipped.
fn smooth_field(size: usize, base: f64, cfg: &SynthConfig, rng: &mut impl Rng) -> Array2<f64> {
    if cfg.field_amplitude <= 0.0 {
        return Array2::from_elem((size, size), base);
    }
    let raw = Array2::from_shape_fn((size, size), |_| rng.random_range(-1.0..=1.0));
    let smooth = gaussian_blur(&raw, cfg.field_scale * size as f64);
    let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { cfg.field_amplitude / peak } else { 0.0 };
    smooth.mapv(|v| (base + gain * v).clamp(0.0, 1.0))
}

pub fn random_scene(size: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> SyntheticScene {
    let alpha = random_blob(size, cfg.edge_blur, rng);
    let mut foreground = Array3::zeros((cfg.channels, size, size));
    let mut background = Array3::zeros((cfg.channels, size, size));
    for c in 0..cfg.channels {
        let (f, b) = (rng.random_range(0.6..0.95), rng.random_range(0.05..0.4));
        foreground.index_axis_mut(Axis(0), c).assign(&smooth_field(size, f, cfg, rng));
        background.index_axis_mut(Axis(0), c).assign(&smooth_field(size, b, cfg, rng));
    }
    SyntheticScene {
        foreground,
        background,
        alpha,
        noise_sigma: cfg.noise_sigma,
    }
}

pub fn synth_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    synth_dataset_with(&SynthConfig::default(), count, size, seed)
}

pub fn synth_dataset_with(cfg: &SynthConfig, count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if count < 1 {
        return Err(MattingError::Arity("dataset needs at least one sample".into()));
    }
    if size < MIN_SYNTH_SIZE {
        return Err(MattingError::Domain(format!(
            "size {size} is below {MIN_SYNTH_SIZE}"
        )));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(MattingError::Config("synthetic images need 1 or 3 channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let scene = random_scene(size, cfg, &mut rng);
            let image = scene.compose(&mut rng)?;
            Sample::from_alpha(format!("synth_{i:04}"), image, scene.alpha, cfg.annotators)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_matte_without_noise_is_piecewise_constant() {
        let alpha = AlphaMatte::new(Array2::from_shape_fn((16, 16), |(y, x)| {
            if (4..12).contains(&y) && (3..9).contains(&x) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let scene = SyntheticScene::uniform(&[0.8, 0.7, 0.9], &[0.1, 0.2, 0.3], alpha.clone(), 0.0);
        let img = scene.compose(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for c in 0..3 {
            for ((y, x), &a) in alpha.values().indexed_iter() {
                let want = if a == 1.0 { scene.foreground[[c, y, x]] } else { scene.background[[c, y, x]] };
                assert_eq!(img.pixels()[[c, y, x]], want);
            }
        }
    }

    #[test]
    fn recomposition_residual_is_noise_sized() {
        let cfg = SynthConfig {
            noise_sigma: 0.05,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut inside = 0;
        let mut total = 0;
        for _ in 0..10 {
            let scene = random_scene(32, &cfg, &mut rng);
            let img = scene.compose(&mut rng).unwrap();
            let clean = scene.compose_clean();
            for (a, b) in img.pixels().iter().zip(&clean) {
                total += 1;
                inside += usize::from((a - b).abs() <= 3.0 * cfg.noise_sigma);
            }
        }
        assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
    }

    #[test]
    fn dataset_is_reproducible_and_well_formed() {
        let a = synth_dataset(5, 24, 7).unwrap();
        let b = synth_dataset(5, 24, 7).unwrap();
        let c = synth_dataset(5, 24, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.alpha, y.alpha);
            assert_eq!(x.annotations.masks(), y.annotations.masks());
        }
        assert_ne!(a[0].alpha, c[0].alpha);
        for s in &a {
            assert_eq!(s.annotations.masks().len(), 4);
            assert!(s.alpha.max() > 0.99);
            // Raters at increasing thresholds give nested masks.
            for w in s.annotations.masks().windows(2) {
                assert!(w[1].is_subset_of(&w[0]));
            }
        }
    }

    #[test]
    fn intensity_fields_are_bounded_and_vary() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(32, &cfg, &mut rng);
        for field in [&scene.foreground, &scene.background] {
            let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            assert!(hi - lo > 0.1 && hi - lo <= 2.0 * cfg.field_amplitude + 1e-12);
        }
        let flat = SynthConfig { field_amplitude: 0.0, ..cfg };
        let scene = random_scene(32, &flat, &mut rng);
        let f0 = scene.foreground[[0, 0, 0]];
        assert!(scene.foreground.iter().all(|&v| v == f0));
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(synth_dataset(0, 32, 0), Err(MattingError::Arity(_))));
        assert!(matches!(synth_dataset(1, 15, 0), Err(MattingError::Domain(_))));
    }
}
