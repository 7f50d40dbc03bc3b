//! Training configuration as a flat TOML table, with dataset presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::fusion::ThresholdRange;
use crate::losses::{LossWeights, OawsPhase, OawsSchedule, DEFAULT_GRAD_REGION_THRESHOLD};
use crate::maskgen::BackboneConfig;
use crate::mattingnet::MattingConfig;

use super::augment::AugmentConfig;
use super::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Plain sum of the two task losses.
    None,
    Uws,
    Oaws,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub seed: u64,

    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub weight_decay: f64,
    /// Adam β1.
    pub momentum: f64,
    pub beta2: f64,

    pub mu: f64,
    pub upsilon: f64,
    pub zeta: f64,
    pub xi: f64,

    pub strategy: Strategy,
    pub oaws_a: f64,
    pub oaws_b: f64,
    pub oaws_t: f64,
    pub oaws_phase: OawsPhase,
    pub uws_initial_sigma: f64,

    /// Prior samples behind each uncertainty map.
    pub n_samples: usize,
    pub grad_region_threshold: f64,
    pub pseudo_lo: f64,
    pub pseudo_hi: f64,
    /// Disk radius used when fusing annotations into a trimap.
    pub dilation_radius: usize,

    pub augment: bool,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub elastic_sigma: f64,
    pub elastic_magnitude: f64,

    pub folds: usize,
    /// Sampled masks per image at evaluation.
    pub eval_masks: usize,
    /// Epochs between intermediate checkpoints; 0 keeps only the last.
    pub checkpoint_every: usize,

    pub image_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub latent_dim: usize,

    pub unit_count: usize,
    pub blocks_per_unit: usize,
    pub unit_channels: Vec<usize>,
    pub attention_reduction: usize,
    pub zero_init_residual: bool,
    pub norm_groups: usize,
    pub use_uncertainty_map: bool,

    /// Samples generated when no dataset is supplied.
    pub synth_count: usize,
    pub synth_noise: f64,
    pub synth_annotators: usize,
    pub synth_field_amplitude: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let oaws = OawsSchedule::default();
        let w = LossWeights::default();
        let bb = BackboneConfig::default();
        let mt = MattingConfig::default();
        let aug = AugmentConfig::default();
        let range = ThresholdRange::default();
        let synth = SynthConfig::default();
        Self {
            dataset: "synthetic".into(),
            seed: 0,
            base_lr: 5e-4,
            epochs: 80,
            batch_size: 8,
            input_size: 64,
            weight_decay: 5e-5,
            momentum: 0.9,
            beta2: 0.999,
            mu: w.mu,
            upsilon: w.upsilon,
            zeta: w.zeta,
            xi: w.xi,
            strategy: Strategy::Oaws,
            oaws_a: oaws.a,
            oaws_b: oaws.b,
            oaws_t: oaws.t,
            oaws_phase: oaws.phase,
            uws_initial_sigma: crate::losses::UwsState::INITIAL_SIGMA,
            n_samples: 8,
            grad_region_threshold: DEFAULT_GRAD_REGION_THRESHOLD,
            pseudo_lo: range.lo_frac,
            pseudo_hi: range.hi_frac,
            dilation_radius: crate::fusion::DEFAULT_DILATION_RADIUS,
            augment: true,
            flip_prob: aug.flip_prob,
            max_rotation_deg: aug.max_rotation_deg,
            elastic_sigma: aug.elastic_sigma,
            elastic_magnitude: aug.elastic_magnitude,
            folds: 4,
            eval_masks: 8,
            checkpoint_every: 0,
            image_channels: bb.image_channels,
            depth: bb.depth,
            base_channels: bb.base_channels,
            latent_dim: bb.latent_dim,
            unit_count: mt.unit_count,
            blocks_per_unit: mt.blocks_per_unit,
            unit_channels: mt.unit_channels,
            attention_reduction: mt.attention_reduction,
            zero_init_residual: mt.zero_init_residual,
            norm_groups: mt.norm_groups,
            use_uncertainty_map: mt.use_uncertainty_map,
            synth_count: 64,
            synth_noise: synth.noise_sigma,
            synth_annotators: synth.annotators,
            synth_field_amplitude: synth.field_amplitude,
        }
    }
}

impl TrainConfig {
    pub fn lidc_idri() -> Self {
        Self {
            dataset: "lidc-idri".into(),
            base_lr: 5e-4,
            epochs: 80,
            input_size: 128,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn isic() -> Self {
        Self {
            dataset: "isic".into(),
            base_lr: 1e-4,
            epochs: 100,
            input_size: 256,
            batch_size: 8,
            image_channels: 3,
            ..Self::default()
        }
    }

    pub fn brain_growth() -> Self {
        Self {
            dataset: "brain-growth".into(),
            base_lr: 1e-4,
            epochs: 150,
            input_size: 128,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lidc-idri" | "lidc" => Ok(Self::lidc_idri()),
            "isic" => Ok(Self::isic()),
            "brain-growth" => Ok(Self::brain_growth()),
            "synthetic" => Ok(Self::default()),
            other => Err(MattingError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MattingError::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.n_samples == 0 || self.eval_masks == 0 {
            return bad("n_samples and eval_masks must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum and beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_region_threshold >= 0.0) {
            return bad("grad_region_threshold must be non-negative");
        }
        if !(self.uws_initial_sigma > 0.0) {
            return bad("uws_initial_sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.synth_noise >= 0.0 && self.synth_field_amplitude >= 0.0) {
            return bad("synth_noise and synth_field_amplitude must be non-negative");
        }
        self.loss_weights().validate()?;
        self.oaws().validate()?;
        ThresholdRange::new(self.pseudo_lo, self.pseudo_hi)
            .map_err(|e| MattingError::Config(e.to_string()))?;
        let bb = self.backbone();
        bb.validate()?;
        if self.input_size % bb.side_multiple() != 0 {
            return Err(MattingError::Config(format!(
                "input_size {} must be a multiple of {}",
                self.input_size,
                bb.side_multiple()
            )));
        }
        self.matting().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mu: self.mu,
            upsilon: self.upsilon,
            zeta: self.zeta,
            xi: self.xi,
        }
    }

    pub fn oaws(&self) -> OawsSchedule {
        OawsSchedule {
            a: self.oaws_a,
            b: self.oaws_b,
            t: self.oaws_t,
            phase: self.oaws_phase,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_channels: self.image_channels,
            depth: self.depth,
            base_channels: self.base_channels,
            latent_dim: self.latent_dim,
            class_count: 2,
        }
    }

    pub fn matting(&self) -> MattingConfig {
        MattingConfig {
            unit_count: self.unit_count,
            blocks_per_unit: self.blocks_per_unit,
            unit_channels: self.unit_channels.clone(),
            attention_reduction: self.attention_reduction,
            zero_init_residual: self.zero_init_residual,
            norm_groups: self.norm_groups,
            use_uncertainty_map: self.use_uncertainty_map,
        }
    }

    pub fn augmentation(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            max_rotation_deg: self.max_rotation_deg,
            elastic_sigma: self.elastic_sigma,
            elastic_magnitude: self.elastic_magnitude,
        }
    }

    pub fn pseudo_range(&self) -> Result<ThresholdRange> {
        ThresholdRange::new(self.pseudo_lo, self.pseudo_hi)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            channels: self.image_channels,
            noise_sigma: self.synth_noise,
            annotators: self.synth_annotators,
            field_amplitude: self.synth_field_amplitude,
            ..SynthConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MattingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MattingError::Config(e.to_string()))
    }

    /// Reads a TOML file. A `preset` key selects the base values that the
    /// remaining keys override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => MattingError::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| MattingError::Config(e.to_string()))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(_) => return Err(MattingError::Config("`preset` must be a string".into())),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| MattingError::Config(e.to_string()))?;
        merged.extend(table);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| MattingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
