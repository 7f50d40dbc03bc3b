//! The assembled model: mask generator, matting network and the two
//! learnable task scales, all in one parameter store.

use medmatting_nn::{ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MattingError, Result};
use crate::imaging::{AlphaMatte, Image};
use crate::losses::UwsState;
use crate::maskgen::{uncertainty_map, MaskGenerator, ScoreMapSet, UncertaintyMap};
use crate::mattingnet::MattingNet;

use super::config::TrainConfig;

pub const LOG_SIGMA1: &str = "uws.log_sigma1";
pub const LOG_SIGMA2: &str = "uws.log_sigma2";

#[derive(Clone, Debug)]
pub struct MedicalMatting {
    pub store: ParamStore,
    pub maskgen: MaskGenerator,
    pub matting: MattingNet,
    pub log_sigma1: ParamId,
    pub log_sigma2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub alpha: AlphaMatte,
    pub uncertainty: UncertaintyMap,
    pub scores: ScoreMapSet,
}

impl MedicalMatting {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let maskgen = MaskGenerator::new(config.backbone(), &mut store, &mut rng)?;
        let matting = MattingNet::new(
            config.matting(),
            config.image_channels,
            maskgen.feature_channels(),
            &mut store,
            &mut rng,
        )?;
        let init = config.uws_initial_sigma.ln();
        let log_sigma1 = store.insert(LOG_SIGMA1, Tensor::scalar(init))?;
        let log_sigma2 = store.insert(LOG_SIGMA2, Tensor::scalar(init))?;
        Ok(Self {
            store,
            maskgen,
            matting,
            log_sigma1,
            log_sigma2,
        })
    }

    /// Rebuilds the architecture for `config` and copies in `params`,
    /// which must hold exactly the same names and shapes.
    pub fn from_params(config: &TrainConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.store.len() {
            return Err(MattingError::State(format!(
                "{} stored parameters, architecture has {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, value) in params.iter() {
            model.store.assign(name, value.clone()).map_err(|e| MattingError::State(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn uws_state(&self) -> UwsState {
        UwsState {
            log_sigma1: self.store.get(self.log_sigma1).item(),
            log_sigma2: self.store.get(self.log_sigma2).item(),
        }
    }

    /// Samples `n` score maps from the prior, builds their uncertainty map
    /// and predicts alpha from it.
    pub fn predict(&self, image: &Image, n: usize, seed: u64) -> Result<Prediction> {
        let scores = self.maskgen.sample_masks(&self.store, image, n, seed)?;
        let uncertainty = uncertainty_map(&scores);
        let features = self.maskgen.latent_features(&self.store, image)?;
        let alpha = self.matting.predict_alpha(&self.store, image, &features, &uncertainty)?;
        Ok(Prediction {
            alpha,
            uncertainty,
            scores,
        })
    }
}
