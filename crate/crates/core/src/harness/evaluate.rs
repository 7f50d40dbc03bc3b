//! Per-sample evaluation and the metrics CSV.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::fusion::{build_trimap, equispaced_masks, ThresholdRange};
use crate::imaging::{AlphaMatte, TrimapLabel};
use crate::metrics::{adapted_dice, ged, MaskSet, MetricReport};

use super::model::MedicalMatting;
use super::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    All,
    /// The unknown band of the trimap fused from the rater masks.
    Unknown,
}

impl FromStr for RegionMode {
    type Err = MattingError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "unknown" | "unknown-only" => Ok(Self::Unknown),
            other => Err(MattingError::Config(format!("unknown region mode `{other}`"))),
        }
    }
}

/// Matting columns are NaN when the evaluation region is empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub ged: f64,
    pub dice: f64,
    pub degenerate: bool,
}

/// Scores one prediction against a sample. Targets are `target_masks`
/// equispaced thresholdings of the ground-truth alpha; the unknown region
/// comes from fusing the annotations with `dilation_radius`.
pub fn score_sample(
    sample: &Sample,
    alpha: &AlphaMatte,
    predicted: &MaskSet,
    region_mode: RegionMode,
    target_masks: usize,
    dilation_radius: usize,
) -> Result<SampleScores> {
    let targets = MaskSet::new(equispaced_masks(&sample.alpha, target_masks, ThresholdRange::default())?)?;
    let region = match region_mode {
        RegionMode::All => None,
        RegionMode::Unknown => Some(build_trimap(&sample.annotations, dilation_radius).region(TrimapLabel::Unknown)),
    };
    let (report, degenerate) = match MetricReport::compute(alpha, &sample.alpha, region.as_ref()) {
        Ok(r) => (r, false),
        Err(MattingError::Degenerate(_)) => (
            MetricReport {
                sad: f64::NAN,
                mse: f64::NAN,
                grad: f64::NAN,
                conn: f64::NAN,
            },
            true,
        ),
        Err(e) => return Err(e),
    };
    Ok(SampleScores {
        sample_id: sample.id.clone(),
        sad: report.sad,
        mse: report.mse,
        grad: report.grad,
        conn: report.conn,
        ged: ged(predicted, &targets)?,
        dice: adapted_dice(predicted, &targets)?,
        degenerate,
    })
}

/// Runs the model on every sample with `n_masks` prior samples each; the
/// sample at index `i` uses seed `seed + i`.
pub fn evaluate(
    model: &MedicalMatting,
    data: &[Sample],
    region_mode: RegionMode,
    n_masks: usize,
    dilation_radius: usize,
    seed: u64,
) -> Result<Vec<SampleScores>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let p = model.predict(&s.image, n_masks, seed.wrapping_add(i as u64))?;
            let masks = MaskSet::new(p.scores.masks())?;
            score_sample(s, &p.alpha, &masks, region_mode, n_masks, dilation_radius)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ColumnStats {
    /// Ignores NaN entries; NaN when none remain.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub sad: ColumnStats,
    pub mse: ColumnStats,
    pub grad: ColumnStats,
    pub conn: ColumnStats,
    pub ged: ColumnStats,
    pub dice: ColumnStats,
    pub degenerate: usize,
}

impl Summary {
    pub fn of(rows: &[SampleScores]) -> Self {
        let col = |f: fn(&SampleScores) -> f64| ColumnStats::of(rows.iter().map(f));
        Self {
            sad: col(|r| r.sad),
            mse: col(|r| r.mse),
            grad: col(|r| r.grad),
            conn: col(|r| r.conn),
            ged: col(|r| r.ged),
            dice: col(|r| r.dice),
            degenerate: rows.iter().filter(|r| r.degenerate).count(),
        }
    }

    pub fn columns(&self) -> [ColumnStats; 6] {
        [self.sad, self.mse, self.grad, self.conn, self.ged, self.dice]
    }
}

pub const METRIC_COLUMNS: [&str; 7] = ["sample_id", "sad", "mse", "grad", "conn", "ged", "dice"];

/// Writes one row per sample and a final `mean±std` row, after a `#`
/// comment line stating the conventions.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[SampleScores], region_mode: RegionMode) -> Result<()> {
    let region = match region_mode {
        RegionMode::All => "all",
        RegionMode::Unknown => "unknown",
    };
    writeln!(
        out,
        "# region={region}; sad,grad,conn x1e-3; ged over all ordered pairs incl. self-pairs, d=1-IoU; NaN marks an empty region"
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone()];
        rec.extend([r.sad, r.mse, r.grad, r.conn, r.ged, r.dice].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let summary = Summary::of(rows);
    let mut rec = vec!["mean±std".to_string()];
    rec.extend(summary.columns().map(|c| format!("{}±{}", c.mean, c.std)));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(path: impl AsRef<Path>, rows: &[SampleScores], region_mode: RegionMode) -> Result<()> {
    write_metrics_csv(std::fs::File::create(path)?, rows, region_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{AnnotationSet, DEFAULT_DILATION_RADIUS};
    use crate::harness::synth::synth_dataset;
    use crate::imaging::BinaryMask;
    use ndarray::Array2;

    #[test]
    fn ground_truth_scores_perfectly() {
        for s in &synth_dataset(3, 24, 5).unwrap() {
            let targets = MaskSet::new(equispaced_masks(&s.alpha, 8, ThresholdRange::default()).unwrap()).unwrap();
            for mode in [RegionMode::All, RegionMode::Unknown] {
                let r = score_sample(s, &s.alpha, &targets, mode, 8, DEFAULT_DILATION_RADIUS).unwrap();
                assert_eq!((r.sad, r.mse, r.grad, r.conn), (0.0, 0.0, 0.0, 0.0));
                assert!(r.ged.abs() < 1e-12);
                assert_eq!(r.dice, 1.0);
                assert!(!r.degenerate);
            }
        }
    }

    #[test]
    fn empty_unknown_band_is_flagged() {
        let base = &synth_dataset(1, 16, 0).unwrap()[0];
        let hard = AlphaMatte::new(Array2::from_shape_fn((16, 16), |(y, _)| if y < 8 { 1.0 } else { 0.0 })).unwrap();
        let same = BinaryMask::new(hard.values().mapv(|v| v > 0.5));
        let sample = Sample {
            id: "hard".into(),
            image: base.image.clone(),
            alpha: hard.clone(),
            annotations: AnnotationSet::new(base.image.clone(), vec![same.clone(), same.clone()]).unwrap(),
        };
        let pred = MaskSet::new(vec![same]).unwrap();
        let r = score_sample(&sample, &hard, &pred, RegionMode::Unknown, 8, DEFAULT_DILATION_RADIUS).unwrap();
        assert!(r.degenerate && r.sad.is_nan() && r.conn.is_nan());
        assert_eq!(r.dice, 1.0);

        let ok = score_sample(base, &base.alpha, &pred, RegionMode::All, 8, DEFAULT_DILATION_RADIUS).unwrap();
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &[r, ok.clone()], RegionMode::Unknown).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "sample_id,sad,mse,grad,conn,ged,dice");
        assert!(lines[2].starts_with("hard,NaN,NaN,NaN,NaN,"));
        // NaN rows are left out of the summary.
        assert!(lines[4].starts_with("mean±std,0±0,0±0,0±0,0±0,"));
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn column_stats() {
        let s = ColumnStats::of([1.0, 3.0, f64::NAN]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!(ColumnStats::of([f64::NAN]).mean.is_nan());
        assert_eq!("unknown-only".parse::<RegionMode>().unwrap(), RegionMode::Unknown);
        assert!("edge".parse::<RegionMode>().is_err());
    }
}
