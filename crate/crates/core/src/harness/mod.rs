//! Everything around the models: synthetic data, augmentation, the
//! training loop, cross-validation, evaluation, checkpoints and
//! configuration.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod model;
pub mod schedule;
pub mod synth;
pub mod train;
pub mod xval;

pub use augment::{augment, AugmentConfig, Transform};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{Strategy, TrainConfig};
pub use dataset::{load_dataset, mean_mask, prepare_dataset, write_dataset};
pub use evaluate::{evaluate, save_metrics_csv, write_metrics_csv, RegionMode, SampleScores, Summary};
pub use model::{MedicalMatting, Prediction};
pub use schedule::lr_schedule;
pub use synth::{synth_dataset, synth_dataset_with, Sample, SynthConfig, SyntheticScene};
pub use train::{train, EpochLog, TrainLog, Trainer};
pub use xval::{cross_validate, fold_splits, write_xval_csv, CrossValReport};

use ndarray::Array2;

/// Separable Gaussian blur with replicated borders, radius `ceil(3σ)`.
/// Returns a copy when `sigma <= 0`.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| {
                    let v = if along_rows {
                        src[[y, (x as isize + d).clamp(0, w as isize - 1) as usize]]
                    } else {
                        src[[(y as isize + d).clamp(0, h as isize - 1) as usize, x]]
                    };
                    k * v
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}
