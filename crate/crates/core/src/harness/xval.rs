//! K-fold cross-validation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MattingError, Result};

use super::config::TrainConfig;
use super::evaluate::{evaluate, ColumnStats, RegionMode, SampleScores, Summary};
use super::synth::Sample;
use super::train::train;

/// Test indices of each fold: a seeded shuffle cut into `folds` contiguous
/// runs whose sizes differ by at most one.
pub fn fold_splits(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(MattingError::Config("cross-validation needs at least 2 folds".into()));
    }
    if n < folds {
        return Err(MattingError::Config(format!(
            "{n} samples leave some of the {folds} folds empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub rows: Vec<SampleScores>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<FoldResult>,
    /// Mean and spread of the per-fold means, in column order
    /// sad, mse, grad, conn, ged, dice.
    pub aggregate: [ColumnStats; 6],
}

impl CrossValReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let aggregate = std::array::from_fn(|c| ColumnStats::of(folds.iter().map(|f| f.summary.columns()[c].mean)));
        Self { folds, aggregate }
    }
}

/// One row of fold means per fold, then the `mean±std` of those means.
pub fn write_xval_csv<W: Write>(out: W, report: &CrossValReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fold", "samples", "sad", "mse", "grad", "conn", "ged", "dice"])?;
    for f in &report.folds {
        let mut rec = vec![f.fold.to_string(), f.test_indices.len().to_string()];
        rec.extend(f.summary.columns().map(|c| c.mean.to_string()));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["mean±std".to_string(), String::new()];
    rec.extend(report.aggregate.map(|c| format!("{}±{}", c.mean, c.std)));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

/// Trains on the complement of each fold and evaluates on the fold.
pub fn cross_validate(cfg: &TrainConfig, data: &[Sample], region_mode: RegionMode) -> Result<CrossValReport> {
    cfg.validate()?;
    let splits = fold_splits(data.len(), cfg.folds, cfg.seed)?;
    let mut results = Vec::with_capacity(splits.len());
    for (k, test) in splits.into_iter().enumerate() {
        let train_set: Vec<Sample> = data
            .iter()
            .enumerate()
            .filter(|(i, _)| !test.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        let test_set: Vec<Sample> = test.iter().map(|&i| data[i].clone()).collect();
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let (model, _) = train(&fold_cfg, &train_set)?;
        let rows = evaluate(
            &model,
            &test_set,
            region_mode,
            cfg.eval_masks,
            cfg.dilation_radius,
            fold_cfg.seed,
        )?;
        results.push(FoldResult {
            fold: k,
            summary: Summary::of(&rows),
            test_indices: test,
            rows,
        });
    }
    Ok(CrossValReport::from_folds(results))
}
