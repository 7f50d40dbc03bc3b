//! Matting error metrics (SAD, MSE, gradient, connectivity) and the
//! mask-distribution metrics GED and best-match Dice.
//!
//! The matting metrics take an optional evaluation region; without one
//! every pixel counts.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{MattingError, Result};
use crate::imaging::{check_pair, AlphaMatte, BinaryMask};

/// Reported SAD, Grad and Conn are divided by this.
pub const REPORT_SCALE: f64 = 1e3;

/// Published scores of the full model on the uncertain regions, as
/// `[SAD, MSE, Grad, Conn]` with SAD/Grad/Conn already divided by 1000.
/// For report formatting only.
pub mod published {
    pub const LIDC_IDRI: [f64; 4] = [0.0447, 0.0215, 0.0607, 0.0378];
    pub const ISIC: [f64; 4] = [1.0330, 0.0093, 0.1729, 0.4989];
    pub const BRAIN_GROWTH: [f64; 4] = [0.4023, 0.0451, 0.5572, 0.4255];
}

fn region_weights(dim: (usize, usize), region: Option<&BinaryMask>) -> Result<Option<&Array2<bool>>> {
    match region {
        None => Ok(None),
        Some(r) => {
            check_pair(r.dim(), dim, "evaluation region")?;
            if r.count() == 0 {
                return Err(MattingError::Degenerate("evaluation region is empty".into()));
            }
            Ok(Some(r.values()))
        }
    }
}

/// Sum of `f(pred, gt)` over the region, and the number of pixels visited.
fn region_sum(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    region: Option<&BinaryMask>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(f64, usize)> {
    check_pair(pred.dim(), gt.dim(), "prediction vs ground truth")?;
    let mask = region_weights(pred.dim(), region)?;
    let mut sum = 0.0;
    let mut n = 0;
    let mut visit = |p: f64, g: f64| {
        sum += f(p, g);
        n += 1;
    };
    match mask {
        None => pred.iter().zip(gt).for_each(|(&p, &g)| visit(p, g)),
        Some(m) => ndarray::Zip::from(pred).and(gt).and(m).for_each(|&p, &g, &inside| {
            if inside {
                visit(p, g)
            }
        }),
    }
    Ok((sum, n))
}

pub fn sad(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<f64> {
    Ok(region_sum(pred.values(), gt.values(), region, |p, g| (p - g).abs())?.0)
}

pub fn mse(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<f64> {
    let (sum, n) = region_sum(pred.values(), gt.values(), region, |p, g| (p - g).powi(2))?;
    Ok(sum / n as f64)
}

pub const GRAD_SIGMA: f64 = 1.4;

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Horizontal first-derivative-of-Gaussian kernel, unit L2 norm, indexed
/// `[row, col]`. Its transpose differentiates vertically.
pub fn gaussian_derivative_kernel(sigma: f64) -> Array2<f64> {
    let eps: f64 = 1e-2;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as isize;
    let size = (2 * half + 1) as usize;
    let mut k = Array2::from_shape_fn((size, size), |(i, j)| {
        let u = i as f64 - half as f64;
        let v = j as f64 - half as f64;
        gauss(u, sigma) * (-v * gauss(v, sigma) / (sigma * sigma))
    });
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.mapv_inplace(|v| v / norm);
    k
}

/// True convolution with replicated borders, same output size.
fn convolve_replicate(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (kh, kw) = kernel.dim();
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for i in 0..kh {
            for j in 0..kw {
                let y = (r as isize - (i as isize - ch)).clamp(0, h as isize - 1) as usize;
                let x = (c as isize - (j as isize - cw)).clamp(0, w as isize - 1) as usize;
                acc += kernel[[i, j]] * img[[y, x]];
            }
        }
        acc
    })
}

/// Gradient magnitude under the σ = 1.4 Gaussian-derivative filters.
pub fn gradient_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let kx = gaussian_derivative_kernel(GRAD_SIGMA);
    let ky = kx.t().to_owned();
    let gx = convolve_replicate(img, &kx);
    let gy = convolve_replicate(img, &ky);
    ndarray::Zip::from(&gx).and(&gy).map_collect(|a, b| (a * a + b * b).sqrt())
}

pub fn grad_metric(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<f64> {
    check_pair(pred.dim(), gt.dim(), "prediction vs ground truth")?;
    region_weights(pred.dim(), region)?;
    let pm = gradient_magnitude(pred.values());
    let gm = gradient_magnitude(gt.values());
    Ok(region_sum(&pm, &gm, region, |p, g| (p - g).powi(2))?.0)
}

/// Connectivity levels are assigned at thresholds `i / 10`, `i = 1..=10`.
pub const CONN_STEP: f64 = 0.1;
/// Level differences below this count as fully connected.
pub const CONN_TOLERANCE: f64 = 0.15;

/// Largest 4-connected component of `mask`; ties go to the component met
/// first in row-major order. All false when `mask` is empty.
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut best = (0usize, 0usize);
    let mut next = 1;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || label[[r, c]] != 0 {
                continue;
            }
            let id = next;
            next += 1;
            label[[r, c]] = id;
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                let mut visit = |yy: usize, xx: usize| {
                    if mask[[yy, xx]] && label[[yy, xx]] == 0 {
                        label[[yy, xx]] = id;
                        queue.push_back((yy, xx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            if size > best.1 {
                best = (id, size);
            }
        }
    }
    label.mapv(|l| best.0 != 0 && l == best.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Connectivity {
    pub value: f64,
    /// False when no threshold had any pixel where both mattes pass it.
    pub source_found: bool,
}

pub fn connectivity(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<Connectivity> {
    check_pair(pred.dim(), gt.dim(), "prediction vs ground truth")?;
    region_weights(pred.dim(), region)?;
    let (p, g) = (pred.values(), gt.values());
    let mut level = Array2::from_elem(p.dim(), f64::NAN);
    let mut source_found = false;
    let steps = (1.0 / CONN_STEP).round() as usize;
    for i in 1..=steps {
        let theta = i as f64 * CONN_STEP;
        let both = ndarray::Zip::from(p).and(g).map_collect(|&a, &b| a >= theta && b >= theta);
        let omega = largest_component(&both);
        source_found |= omega.iter().any(|&o| o);
        let prev = (i - 1) as f64 * CONN_STEP;
        ndarray::Zip::from(&mut level).and(&omega).for_each(|l, &o| {
            if l.is_nan() && !o {
                *l = prev;
            }
        });
    }
    level.mapv_inplace(|l| if l.is_nan() { 1.0 } else { l });
    let phi = |a: f64, l: f64| {
        let d = a - l;
        1.0 - if d >= CONN_TOLERANCE { d } else { 0.0 }
    };
    let pp = ndarray::Zip::from(p).and(&level).map_collect(|&a, &l| phi(a, l));
    let gp = ndarray::Zip::from(g).and(&level).map_collect(|&a, &l| phi(a, l));
    let value = region_sum(&pp, &gp, region, |a, b| (a - b).abs())?.0;
    Ok(Connectivity { value, source_found })
}

pub fn conn_metric(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<f64> {
    Ok(connectivity(pred, gt, region)?.value)
}

/// A nonempty list of equally shaped masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<BinaryMask>,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| MattingError::Arity("mask set is empty".into()))?;
        for m in &masks[1..] {
            check_pair(m.dim(), first.dim(), "mask set")?;
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.masks[0].dim()
    }
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        inter += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    (inter, na, nb)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, na, nb) = overlap(a, b);
    let union = na + nb - i;
    if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    }
}

/// Dice coefficient; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (i, na, nb) = overlap(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

fn mean_distance(a: &MaskSet, b: &MaskSet) -> f64 {
    let mut sum = 0.0;
    for x in a.masks() {
        for y in b.masks() {
            sum += 1.0 - iou(x, y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Generalised energy distance under `d = 1 − IoU`, with every ordered pair
/// (self-pairs included) in each expectation.
pub fn ged(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    check_pair(pred.dim(), gt.dim(), "mask sets")?;
    Ok(2.0 * mean_distance(pred, gt) - mean_distance(pred, pred) - mean_distance(gt, gt))
}

/// Mean over predictions of the best Dice against any target.
pub fn adapted_dice(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    check_pair(pred.dim(), gt.dim(), "mask sets")?;
    let total: f64 = pred
        .masks()
        .iter()
        .map(|p| gt.masks().iter().map(|g| dice(p, g)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Matting scores for one prediction; SAD, Grad and Conn divided by
/// [`REPORT_SCALE`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

impl MetricReport {
    pub fn compute(pred: &AlphaMatte, gt: &AlphaMatte, region: Option<&BinaryMask>) -> Result<Self> {
        Ok(Self {
            sad: sad(pred, gt, region)? / REPORT_SCALE,
            mse: mse(pred, gt, region)?,
            grad: grad_metric(pred, gt, region)? / REPORT_SCALE,
            conn: conn_metric(pred, gt, region)? / REPORT_SCALE,
        })
    }
}
