//! Trimaps from rater disagreement, pseudo masks from alpha level sets,
//! and per-region intensity histograms.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MattingError, Result};
use crate::imaging::{check_pair, AlphaMatte, BinaryMask, Image, Trimap, TrimapLabel};

pub const DEFAULT_DILATION_RADIUS: usize = 2;
pub const HISTOGRAM_BINS: usize = 64;

/// Masks from at least two raters over one image.
#[derive(Clone, Debug)]
pub struct AnnotationSet {
    image: Image,
    masks: Vec<BinaryMask>,
}

impl AnnotationSet {
    pub fn new(image: Image, masks: Vec<BinaryMask>) -> Result<Self> {
        check_masks(&masks)?;
        check_pair(masks[0].dim(), image.dim(), "annotation vs image")?;
        Ok(Self { image, masks })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }
}

fn check_masks(masks: &[BinaryMask]) -> Result<()> {
    if masks.len() < 2 {
        return Err(MattingError::Arity(format!(
            "{} annotator mask(s), need at least 2",
            masks.len()
        )));
    }
    for m in &masks[1..] {
        check_pair(m.dim(), masks[0].dim(), "annotator masks")?;
    }
    Ok(())
}

pub fn build_trimap(annotations: &AnnotationSet, dilation_radius: usize) -> Trimap {
    trimap_from_masks(annotations.masks(), dilation_radius).expect("validated on construction")
}

/// Same as [`build_trimap`] on a bare mask list.
pub fn trimap_from_masks(masks: &[BinaryMask], dilation_radius: usize) -> Result<Trimap> {
    check_masks(masks)?;
    let (h, w) = masks[0].dim();
    let mut labels = Array2::from_elem((h, w), TrimapLabel::Unknown);
    for ((r, c), label) in labels.indexed_iter_mut() {
        let first = masks[0].values()[[r, c]];
        if masks.iter().all(|m| m.values()[[r, c]] == first) {
            *label = if first {
                TrimapLabel::Foreground
            } else {
                TrimapLabel::Background
            };
        }
    }
    if dilation_radius > 0 {
        let seeds: Vec<(usize, usize)> = labels
            .indexed_iter()
            .filter(|(_, &l)| l == TrimapLabel::Unknown)
            .map(|(p, _)| p)
            .collect();
        let offsets = disk_offsets(dilation_radius);
        for (r, c) in seeds {
            for &(dy, dx) in &offsets {
                let (y, x) = (r as isize + dy, c as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    labels[[y as usize, x as usize]] = TrimapLabel::Unknown;
                }
            }
        }
    }
    Ok(Trimap::new(labels))
}

/// Integer offsets inside the closed disk of the given radius.
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Threshold bounds as fractions of the matte's maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRange {
    pub lo_frac: f64,
    pub hi_frac: f64,
}

impl Default for ThresholdRange {
    fn default() -> Self {
        Self {
            lo_frac: 0.2,
            hi_frac: 0.7,
        }
    }
}

impl ThresholdRange {
    pub fn new(lo_frac: f64, hi_frac: f64) -> Result<Self> {
        if !(0.0 <= lo_frac && lo_frac < hi_frac && hi_frac <= 1.0) {
            return Err(MattingError::Domain(format!(
                "threshold fractions must satisfy 0 <= lo < hi <= 1, got ({lo_frac}, {hi_frac})"
            )));
        }
        Ok(Self { lo_frac, hi_frac })
    }

    /// Absolute threshold at position `u ∈ [0, 1]` of the range.
    pub fn threshold(&self, alpha_max: f64, u: f64) -> f64 {
        alpha_max * (self.lo_frac + u * (self.hi_frac - self.lo_frac))
    }
}

/// Draws random alpha thresholds; one uniform `u` per call.
#[derive(Clone, Debug)]
pub struct PseudoMaskSampler {
    range: ThresholdRange,
    rng: ChaCha8Rng,
}

impl PseudoMaskSampler {
    pub fn new(range: ThresholdRange, rng_seed: u64) -> Self {
        Self {
            range,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn range(&self) -> ThresholdRange {
        self.range
    }

    pub fn draw_threshold(&mut self, alpha_max: f64) -> f64 {
        let u: f64 = self.rng.random();
        self.range.threshold(alpha_max, u)
    }
}

fn positive_max(alpha: &AlphaMatte) -> Result<f64> {
    let max = alpha.max();
    if max <= 0.0 {
        return Err(MattingError::Degenerate(
            "alpha matte is zero everywhere, threshold range is empty".into(),
        ));
    }
    Ok(max)
}

/// The level set `{alpha >= tau}`.
pub fn threshold_mask(alpha: &AlphaMatte, tau: f64) -> BinaryMask {
    BinaryMask::new(alpha.values().mapv(|a| a >= tau))
}

pub fn sample_pseudo_mask(alpha: &AlphaMatte, sampler: &mut PseudoMaskSampler) -> Result<BinaryMask> {
    let max = positive_max(alpha)?;
    let tau = sampler.draw_threshold(max);
    Ok(threshold_mask(alpha, tau))
}

/// `count` level sets at evenly spaced thresholds across the range, from
/// the lowest threshold (largest mask) to the highest. A single mask uses
/// the midpoint.
pub fn equispaced_masks(
    alpha: &AlphaMatte,
    count: usize,
    range: ThresholdRange,
) -> Result<Vec<BinaryMask>> {
    if count < 1 {
        return Err(MattingError::Arity("mask count must be at least 1".into()));
    }
    let max = positive_max(alpha)?;
    Ok((0..count)
        .map(|i| {
            let u = if count == 1 {
                0.5
            } else {
                i as f64 / (count - 1) as f64
            };
            threshold_mask(alpha, range.threshold(max, u))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// Normalised mass per bin; all zero when the region is empty.
    pub bins: Vec<f64>,
    pub pixel_count: usize,
}

impl Histogram {
    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }

    pub fn bin_of(v: f64) -> usize {
        ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionHistograms {
    pub foreground: Histogram,
    pub background: Histogram,
    pub unknown: Histogram,
}

/// Intensity histograms over each trimap region, using the channel mean.
pub fn intensity_distributions(image: &Image, trimap: &Trimap) -> Result<RegionHistograms> {
    check_pair(image.dim(), trimap.dim(), "image vs trimap")?;
    let lum = image.luminance();
    let hist = |label: TrimapLabel| {
        let mut bins = vec![0.0; HISTOGRAM_BINS];
        let mut n = 0;
        for (&v, &l) in lum.iter().zip(trimap.labels()) {
            if l == label {
                bins[Histogram::bin_of(v)] += 1.0;
                n += 1;
            }
        }
        if n > 0 {
            bins.iter_mut().for_each(|b| *b /= n as f64);
        }
        Histogram {
            bins,
            pixel_count: n,
        }
    };
    Ok(RegionHistograms {
        foreground: hist(TrimapLabel::Foreground),
        background: hist(TrimapLabel::Background),
        unknown: hist(TrimapLabel::Unknown),
    })
}
