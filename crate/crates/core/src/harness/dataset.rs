//! On-disk datasets: PNG files listed in a tab-separated manifest with
//! columns `id`, `image`, `masks` (`;`-separated), `alpha` and `trimap`.
//! `alpha` and `trimap` may be empty. Relative paths resolve against the
//! manifest's directory.
//!
//! `prepare` reads a raw directory laid out as
//!
//! ```text
//! images/<id>.png
//! masks/<annotator>/<id>.png    one subdirectory per annotator
//! alpha/<id>.png                optional
//! ```

use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::fusion::{build_trimap, AnnotationSet};
use crate::imaging::{
    load_alpha, load_image, load_mask, save_alpha, save_image, save_mask, save_trimap, AlphaMatte, BinaryMask,
    Image,
};

use super::synth::Sample;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Row {
    id: String,
    image: String,
    masks: String,
    alpha: String,
    trimap: String,
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MattingError::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file))
}

/// Annotator consensus, used as alpha when none is supplied.
pub fn mean_mask(masks: &[BinaryMask]) -> Result<AlphaMatte> {
    let first = masks.first().ok_or_else(|| MattingError::Arity("no masks to average".into()))?;
    let mut sum = Array2::zeros(first.dim());
    for m in masks {
        if m.dim() != first.dim() {
            return Err(MattingError::Shape("annotator masks differ in size".into()));
        }
        sum += &m.to_f64();
    }
    AlphaMatte::new(sum / masks.len() as f64)
}

/// Loads every sample listed in `manifest`. Rows without alpha get the
/// mean of their masks.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for row in tsv_reader(manifest)?.deserialize() {
        let row: Row = row?;
        let image = load_image(root.join(&row.image))?;
        let masks = row
            .masks
            .split(';')
            .filter(|p| !p.is_empty())
            .map(|p| load_mask(root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = if row.alpha.is_empty() {
            mean_mask(&masks)?
        } else {
            load_alpha(root.join(&row.alpha))?
        };
        let annotations = AnnotationSet::new(image.clone(), masks)?;
        samples.push(Sample {
            id: row.id,
            image,
            alpha,
            annotations,
        });
    }
    if samples.is_empty() {
        return Err(MattingError::Arity(format!("{} lists no samples", manifest.display())));
    }
    Ok(samples)
}

/// Writes PNGs under `dir` plus the manifest; returns the manifest path.
/// With `trimap_radius` set, trimaps fused at that radius are included.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>, trimap_radius: Option<usize>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "alpha", "masks", "trimaps"] {
        if sub != "trimaps" || trimap_radius.is_some() {
            std::fs::create_dir_all(dir.join(sub))?;
        }
    }
    let manifest = dir.join(MANIFEST_NAME);
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(&manifest)?;
    for s in samples {
        let image = format!("images/{}.png", s.id);
        let alpha = format!("alpha/{}.png", s.id);
        save_image(&s.image, dir.join(&image))?;
        save_alpha(&s.alpha, dir.join(&alpha))?;
        let mut masks = Vec::new();
        for (k, m) in s.annotations.masks().iter().enumerate() {
            let p = format!("masks/{}_{k}.png", s.id);
            save_mask(m, dir.join(&p))?;
            masks.push(p);
        }
        let trimap = match trimap_radius {
            Some(r) => {
                let p = format!("trimaps/{}.png", s.id);
                save_trimap(&build_trimap(&s.annotations, r), dir.join(&p))?;
                p
            }
            None => String::new(),
        };
        w.serialize(Row {
            id: s.id.clone(),
            image,
            masks: masks.join(";"),
            alpha,
            trimap,
        })?;
    }
    w.flush()?;
    Ok(manifest)
}

fn plane_buffer(plane: &Array2<f64>) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (h, w) = plane.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]] as f32]))
}

fn resize_plane(plane: &Array2<f64>, size: usize) -> Array2<f64> {
    let out = resize(&plane_buffer(plane), size as u32, size as u32, FilterType::Triangle);
    Array2::from_shape_fn((size, size), |(y, x)| {
        f64::from(out.get_pixel(x as u32, y as u32)[0]).clamp(0.0, 1.0)
    })
}

fn resize_mask(mask: &BinaryMask, size: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([u8::from(mask.values()[[y as usize, x as usize]])])
    });
    let out = resize(&buf, size as u32, size as u32, FilterType::Nearest);
    BinaryMask::new(Array2::from_shape_fn((size, size), |(y, x)| out.get_pixel(x as u32, y as u32)[0] != 0))
}

/// Resamples one sample to `size × size`: bilinear for image and alpha,
/// nearest neighbour for masks.
pub fn resize_sample(sample: &Sample, size: usize) -> Result<Sample> {
    let c = sample.image.channels();
    let mut pixels = Array3::zeros((c, size, size));
    for ch in 0..c {
        let plane = resize_plane(&sample.image.channel(ch).to_owned(), size);
        pixels.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    let image = Image::new(pixels)?;
    let alpha = AlphaMatte::from_clipped(resize_plane(sample.alpha.values(), size));
    let masks = sample.annotations.masks().iter().map(|m| resize_mask(m, size)).collect();
    Ok(Sample {
        id: sample.id.clone(),
        annotations: AnnotationSet::new(image.clone(), masks)?,
        image,
        alpha,
    })
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MattingError::NotFound(dir.to_path_buf()),
        _ => e.into(),
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MattingError::NotFound(dir.to_path_buf()),
        _ => e.into(),
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Reads a raw directory (see the module docs), fuses each sample's masks
/// into a trimap and writes trimaps plus a manifest to `out_dir`.
/// The manifest points at the original files by absolute path.
/// With `size` set, resampled copies of every file are written instead.
pub fn prepare_dataset(
    raw_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    dilation_radius: usize,
    size: Option<usize>,
) -> Result<PathBuf> {
    let raw = std::path::absolute(raw_dir.as_ref())?;
    let out = out_dir.as_ref();
    let annotators = sorted_subdirs(&raw.join("masks"))?;
    if annotators.is_empty() {
        return Err(MattingError::Arity(format!("{} has no annotator subdirectories", raw.join("masks").display())));
    }
    let stems = png_stems(&raw.join("images"))?;
    if stems.is_empty() {
        return Err(MattingError::Arity(format!("no PNG images in {}", raw.join("images").display())));
    }
    let mut rows = Vec::with_capacity(stems.len());
    let mut samples = Vec::with_capacity(stems.len());
    for id in stems {
        let image_path = raw.join("images").join(format!("{id}.png"));
        let mask_paths: Vec<PathBuf> = annotators
            .iter()
            .map(|a| a.join(format!("{id}.png")))
            .filter(|p| p.is_file())
            .collect();
        if mask_paths.is_empty() {
            return Err(MattingError::Arity(format!("sample `{id}` has no annotator masks")));
        }
        let alpha_path = raw.join("alpha").join(format!("{id}.png"));
        let alpha_path = alpha_path.is_file().then_some(alpha_path);
        let image = load_image(&image_path)?;
        let masks = mask_paths.iter().map(load_mask).collect::<Result<Vec<_>>>()?;
        let alpha = match &alpha_path {
            Some(p) => load_alpha(p)?,
            None => mean_mask(&masks)?,
        };
        let sample = Sample {
            id: id.clone(),
            annotations: AnnotationSet::new(image.clone(), masks)?,
            image,
            alpha,
        };
        if size.is_none() {
            let str_of = |p: &Path| p.to_string_lossy().into_owned();
            rows.push(Row {
                id: id.clone(),
                image: str_of(&image_path),
                masks: mask_paths.iter().map(|p| str_of(p)).collect::<Vec<_>>().join(";"),
                alpha: alpha_path.as_deref().map(str_of).unwrap_or_default(),
                trimap: format!("trimaps/{id}.png"),
            });
        }
        samples.push(sample);
    }

    if let Some(size) = size {
        if size < crate::imaging::MIN_SIDE {
            return Err(MattingError::Domain(format!("target size {size} is too small")));
        }
        let resized = samples.iter().map(|s| resize_sample(s, size)).collect::<Result<Vec<_>>>()?;
        return write_dataset(&resized, out, Some(dilation_radius));
    }
    std::fs::create_dir_all(out.join("trimaps"))?;
    for s in &samples {
        save_trimap(&build_trimap(&s.annotations, dilation_radius), out.join(format!("trimaps/{}.png", s.id)))?;
    }
    let manifest = out.join(MANIFEST_NAME);
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(&manifest)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(manifest)
}
