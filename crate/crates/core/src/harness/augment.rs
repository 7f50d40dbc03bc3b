//! Joint spatial augmentation of an image, its matte and its masks.
//!
//! A [`Transform`] maps every output pixel to a source coordinate:
//! elastic displacement first, then rotation about the centre, then the
//! flips. Image and alpha are sampled bilinearly, masks by nearest
//! neighbour, both with clamped borders.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{AlphaMatte, BinaryMask, Image};

use super::gaussian_blur;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub elastic_sigma: f64,
    /// Largest displacement of the elastic field, in pixels.
    pub elastic_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            elastic_sigma: 10.0,
            elastic_magnitude: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub angle: f64,
    /// `(dy, dx)` per output pixel.
    pub displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle: 0.0,
            displacement: None,
        }
    }

    pub fn draw(cfg: &AugmentConfig, dim: (usize, usize), rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(cfg.flip_prob);
        let vflip = rng.random_bool(cfg.flip_prob);
        let max = cfg.max_rotation_deg.to_radians();
        let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let displacement = (cfg.elastic_magnitude > 0.0).then(|| {
            let mut field = || {
                let raw = Array2::from_shape_fn(dim, |_| rng.random_range(-1.0..=1.0));
                let smooth = gaussian_blur(&raw, cfg.elastic_sigma);
                let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak > 0.0 {
                    smooth.mapv(|v| v * cfg.elastic_magnitude / peak)
                } else {
                    smooth
                }
            };
            let dy = field();
            (dy, field())
        });
        Self {
            hflip,
            vflip,
            angle,
            displacement,
        }
    }

    fn source(&self, dim: (usize, usize), y: usize, x: usize) -> (f64, f64) {
        let (h, w) = (dim.0 as f64, dim.1 as f64);
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some((dy, dx)) = &self.displacement {
            sy += dy[[y, x]];
            sx += dx[[y, x]];
        }
        if self.angle != 0.0 {
            let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
            let (sin, cos) = self.angle.sin_cos();
            let (ry, rx) = (sy - cy, sx - cx);
            sy = cy + cos * ry - sin * rx;
            sx = cx + sin * ry + cos * rx;
        }
        if self.vflip {
            sy = h - 1.0 - sy;
        }
        if self.hflip {
            sx = w - 1.0 - sx;
        }
        (sy, sx)
    }

    fn bilinear(plane: &Array2<f64>, sy: f64, sx: f64) -> f64 {
        let (h, w) = plane.dim();
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        if fy == 0.0 && fx == 0.0 {
            return plane[[y0, x0]];
        }
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn warp_plane(&self, plane: &Array2<f64>) -> Array2<f64> {
        let dim = plane.dim();
        Array2::from_shape_fn(dim, |(y, x)| {
            let (sy, sx) = self.source(dim, y, x);
            Self::bilinear(plane, sy, sx).clamp(0.0, 1.0)
        })
    }

    pub fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let dim = mask.dim();
        let m = mask.values();
        BinaryMask::new(Array2::from_shape_fn(dim, |(y, x)| {
            let (sy, sx) = self.source(dim, y, x);
            let yy = sy.round().clamp(0.0, (dim.0 - 1) as f64) as usize;
            let xx = sx.round().clamp(0.0, (dim.1 - 1) as f64) as usize;
            m[[yy, xx]]
        }))
    }

    pub fn warp_image(&self, image: &Image) -> Result<Image> {
        let (c, h, w) = image.pixels().dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let warped = self.warp_plane(&image.channel(ch).to_owned());
            out.index_axis_mut(ndarray::Axis(0), ch).assign(&warped);
        }
        Image::new(out)
    }
}

/// Draws one transform and applies it to all inputs.
pub fn augment(
    image: &Image,
    alpha: &AlphaMatte,
    masks: &[BinaryMask],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Image, AlphaMatte, Vec<BinaryMask>)> {
    let t = Transform::draw(cfg, image.dim(), rng);
    Ok((
        t.warp_image(image)?,
        AlphaMatte::from_clipped(t.warp_plane(alpha.values())),
        masks.iter().map(|m| t.warp_mask(m)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::synth_dataset;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_leaves_everything_unchanged() {
        let s = &synth_dataset(1, 20, 3).unwrap()[0];
        let t = Transform::identity();
        assert_eq!(t.warp_image(&s.image).unwrap(), s.image);
        assert_eq!(&t.warp_plane(s.alpha.values()), s.alpha.values());
        assert_eq!(t.warp_mask(&s.annotations.masks()[1]), s.annotations.masks()[1]);
    }

    #[test]
    fn degenerate_config_draws_identity() {
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            elastic_sigma: 10.0,
            elastic_magnitude: 0.0,
        };
        let t = Transform::draw(&cfg, (16, 16), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t, Transform::identity());
    }

    #[test]
    fn flips_are_exact_involutions() {
        let s = &synth_dataset(1, 17, 4).unwrap()[0];
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let t = Transform {
                hflip: h,
                vflip: v,
                ..Transform::identity()
            };
            let once = t.warp_plane(s.alpha.values());
            assert_ne!(&once, s.alpha.values());
            assert_eq!(&t.warp_plane(&once), s.alpha.values());
            let m = &s.annotations.masks()[0];
            assert_eq!(&t.warp_mask(&t.warp_mask(m)), m);
        }
        let t = Transform {
            hflip: true,
            ..Transform::identity()
        };
        let a = s.alpha.values();
        let f = t.warp_plane(a);
        assert_eq!(f[[3, 0]], a[[3, 16]]);
    }

    #[test]
    fn elastic_field_has_the_requested_peak() {
        let cfg = AugmentConfig::default();
        let t = Transform::draw(&cfg, (24, 24), &mut ChaCha8Rng::seed_from_u64(9));
        let (dy, dx) = t.displacement.unwrap();
        for f in [dy, dx] {
            let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 2.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_stay_in_range(seed in any::<u64>()) {
            let s = &synth_dataset(1, 16, seed).unwrap()[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (img, alpha, masks) = augment(
                &s.image, &s.alpha, s.annotations.masks(), &AugmentConfig::default(), &mut rng,
            ).unwrap();
            prop_assert_eq!(img.dim(), s.image.dim());
            prop_assert!(alpha.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(masks.len(), s.annotations.masks().len());
        }
    }
}
