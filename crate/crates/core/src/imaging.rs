//! Raster types shared by every stage of the pipeline, PNG I/O, and the
//! per-pixel alpha entropy.
//!
//! Spatial arrays are indexed `[row, col]`; colour images are `[channel,
//! row, col]`. Everything is `f64` in `[0, 1]` once loaded.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use medmatting_nn::Tensor;
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{MattingError, Result};

/// Smallest side an [`Image`] may have.
pub const MIN_SIDE: usize = 8;

fn check_unit_range(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(MattingError::Domain(format!("{what} value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

fn check_same_dim(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(MattingError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// A grayscale or RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(MattingError::Shape(format!("{c} channels, expected 1 or 3")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(MattingError::Shape(format!(
                "{h}x{w} image, sides must be at least {MIN_SIDE}"
            )));
        }
        check_unit_range(pixels.iter().copied(), "intensity")?;
        Ok(Self { pixels })
    }

    pub fn from_gray(plane: Array2<f64>) -> Result<Self> {
        Self::new(plane.insert_axis(Axis(0)))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// `(height, width)`.
    pub fn dim(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Channel mean, i.e. the image itself when grayscale.
    pub fn luminance(&self) -> Array2<f64> {
        self.pixels.mean_axis(Axis(0)).expect("at least one channel")
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.pixels.index_axis(Axis(0), c)
    }
}

/// Continuous opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte {
    alpha: Array2<f64>,
}

impl AlphaMatte {
    pub fn new(alpha: Array2<f64>) -> Result<Self> {
        check_unit_range(alpha.iter().copied(), "alpha")?;
        Ok(Self { alpha })
    }

    /// Clips into `[0, 1]` first; NaN maps to 0.
    pub fn from_clipped(mut alpha: Array2<f64>) -> Self {
        alpha.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { alpha }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.alpha
    }

    pub fn into_values(self) -> Array2<f64> {
        self.alpha
    }

    pub fn dim(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    pub fn max(&self) -> f64 {
        self.alpha.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    mask: Array2<bool>,
}

impl BinaryMask {
    pub fn new(mask: Array2<bool>) -> Self {
        Self { mask }
    }

    /// From a `{0, 1}` array; anything else is a domain error.
    pub fn from_values(values: &Array2<f64>) -> Result<Self> {
        let mut mask = Array2::from_elem(values.dim(), false);
        for (m, &v) in mask.iter_mut().zip(values) {
            *m = match v {
                0.0 => false,
                1.0 => true,
                _ => return Err(MattingError::Domain(format!("mask value {v} is not 0 or 1"))),
            };
        }
        Ok(Self { mask })
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    Background,
    Unknown,
    Foreground,
}

impl TrimapLabel {
    pub fn raster_value(self) -> u8 {
        match self {
            Self::Background => 0,
            Self::Unknown => 128,
            Self::Foreground => 255,
        }
    }

    pub fn from_raster(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Background),
            128 => Some(Self::Unknown),
            255 => Some(Self::Foreground),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    labels: Array2<TrimapLabel>,
}

impl Trimap {
    pub fn new(labels: Array2<TrimapLabel>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &Array2<TrimapLabel> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn region(&self, label: TrimapLabel) -> BinaryMask {
        BinaryMask::new(self.labels.mapv(|l| l == label))
    }
}

/// Per-pixel entropy in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyField {
    values: Array2<f64>,
}

impl UncertaintyField {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// `-p ln p - (1 - p) ln(1 - p)`, with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    xlnx(p) + xlnx(1.0 - p)
}

/// `-x ln x`, continuous at 0.
fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -x * x.ln()
    }
}

pub fn alpha_entropy(alpha: &AlphaMatte) -> UncertaintyField {
    UncertaintyField {
        values: alpha.values().mapv(binary_entropy),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(MattingError::NotFound(path.to_path_buf()));
    }
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    require_file(path)?;
    Ok(ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

fn gray_to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.as_raw().clone()).expect("row-major")
}

fn read_gray8(path: &Path) -> Result<Array2<u8>> {
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => Ok(gray_to_array(&img)),
        other => Err(MattingError::Format(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn write_gray8(values: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let raw = values.iter().copied().collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("sized");
    img.save(path)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let pixels = match decode(path)? {
        DynamicImage::ImageLuma8(img) => gray_to_array(&img).mapv(|v| v as f64 / 255.0).insert_axis(Axis(0)),
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let mut px = Array3::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    px[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
            px
        }
        other => {
            return Err(MattingError::Format(format!(
                "{}: expected 8-bit grayscale or RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(pixels)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if image.channels() == 1 {
        return write_gray8(&image.channel(0).mapv(quantize), path);
    }
    let (h, w) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = quantize(image.pixels()[[c, y as usize, x as usize]]);
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_alpha(path: impl AsRef<Path>) -> Result<AlphaMatte> {
    AlphaMatte::new(read_gray8(path.as_ref())?.mapv(|v| v as f64 / 255.0))
}

/// Stored as 8-bit, so values round to the nearest multiple of 1/255.
pub fn save_alpha(alpha: &AlphaMatte, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(&alpha.values().mapv(quantize), path.as_ref())
}

/// Masks are 0/255 rasters; any other value is a format error.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let raw = read_gray8(path)?;
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(MattingError::Format(format!("{}: mask value {v}", path.display())));
    }
    Ok(BinaryMask::new(raw.mapv(|v| v == 255)))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(&mask.values().mapv(|m| if m { 255 } else { 0 }), path.as_ref())
}

pub fn load_trimap(path: impl AsRef<Path>) -> Result<Trimap> {
    let path = path.as_ref();
    let raw = read_gray8(path)?;
    let mut labels = Array2::from_elem(raw.dim(), TrimapLabel::Unknown);
    for (l, &v) in labels.iter_mut().zip(&raw) {
        *l = TrimapLabel::from_raster(v)
            .ok_or_else(|| MattingError::Format(format!("{}: trimap value {v}", path.display())))?;
    }
    Ok(Trimap::new(labels))
}

pub fn save_trimap(trimap: &Trimap, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(&trimap.labels().mapv(TrimapLabel::raster_value), path.as_ref())
}

/// Entropies rescaled so `max_entropy` maps to 255.
pub fn save_entropy_map(values: &Array2<f64>, max_entropy: f64, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(&values.mapv(|v| quantize(v / max_entropy)), path.as_ref())
}

pub(crate) fn check_pair(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    check_same_dim(a, b, what)
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub(crate) fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| MattingError::Arity("no images".into()))?;
    let (c, h, w) = first.pixels().dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.pixels().dim() != (c, h, w) {
            return Err(MattingError::Shape(format!(
                "batch mixes {:?} and {:?}",
                (c, h, w),
                img.pixels().dim()
            )));
        }
        data.extend(img.pixels().iter().copied());
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Stacks single-channel planes into an `[N, 1, H, W]` tensor.
pub(crate) fn planes_to_tensor(planes: &[&Array2<f64>]) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| MattingError::Arity("no planes".into()))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        check_same_dim(p.dim(), (h, w), "plane batch")?;
        data.extend(p.iter().copied());
    }
    Ok(Tensor::new(&[planes.len(), 1, h, w], data)?)
}
