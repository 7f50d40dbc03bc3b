//! End-to-end training.
//!
//! One step on a batch:
//! 1. draw a pseudo mask per sample from its ground-truth alpha;
//! 2. run the UNet, the prior and the posterior; sample `z` from the
//!    posterior and decode it; CE against the pseudo mask, KL(q ‖ p);
//! 3. decode `n_samples` prior codes without gradient and take the entropy
//!    of their mean as the uncertainty map;
//! 4. predict alpha; L1 plus the Sobel loss on `umap > grad_region_threshold`;
//! 5. combine the task losses per [`Strategy`] and take an Adam step.

use std::io::Write;
use std::path::Path;

use medmatting_nn::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{MattingError, Result};
use crate::fusion::{sample_pseudo_mask, PseudoMaskSampler};
use crate::imaging::{images_to_tensor, planes_to_tensor, Image};
use crate::losses::{
    alpha_l1_var, ce_var, grad_loss_var, kl_var, oaws_gamma, uws_var, weighted_sum_var, LossWeights,
};
use crate::maskgen::{batch_uncertainty, MaskGenerator};

use super::augment::augment;
use super::config::{Strategy, TrainConfig};
use super::model::MedicalMatting;
use super::schedule::lr_schedule;
use super::synth::Sample;

const SAMPLER_STREAM: u64 = 0x5eed_0001;
const TRAIN_STREAM: u64 = 0x5eed_0002;

/// Mean task losses over an epoch or a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub alpha_l1: f64,
    pub grad: f64,
    pub seg: f64,
    pub matt: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &Self, weight: f64) {
        self.ce += weight * other.ce;
        self.kl += weight * other.kl;
        self.alpha_l1 += weight * other.alpha_l1;
        self.grad += weight * other.grad;
        self.seg += weight * other.seg;
        self.matt += weight * other.matt;
        self.total += weight * other.total;
    }

    fn all_finite(&self) -> bool {
        [self.ce, self.kl, self.alpha_l1, self.grad, self.seg, self.matt, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

const EPOCH_COLUMNS: [&str; 12] = [
    "epoch", "lr", "ce", "kl", "alpha_l1", "grad", "seg", "matt", "total", "gamma", "sigma1", "sigma2",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Segmentation weight actually applied (oaws only).
    pub gamma: Option<f64>,
    /// Task scales at the end of the epoch (uws only).
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EPOCH_COLUMNS)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for e in &self.epochs {
            let l = &e.losses;
            let mut row = vec![e.epoch.to_string(), e.lr.to_string()];
            row.extend([l.ce, l.kl, l.alpha_l1, l.grad, l.seg, l.matt, l.total].map(|v| v.to_string()));
            row.extend([opt(e.gamma), opt(e.sigma1), opt(e.sigma2)]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

struct Batch {
    image: Tensor,
    mask: Tensor,
    one_hot: Tensor,
    alpha: Tensor,
}

impl Batch {
    fn new(images: &[&Image], alphas: &[&ndarray::Array2<f64>], masks: &[ndarray::Array2<f64>]) -> Result<Self> {
        let mask = planes_to_tensor(&masks.iter().collect::<Vec<_>>())?;
        let background: Vec<_> = masks.iter().map(|m| m.mapv(|v| 1.0 - v)).collect();
        let bg = planes_to_tensor(&background.iter().collect::<Vec<_>>())?;
        Ok(Self {
            image: images_to_tensor(images)?,
            one_hot: Tensor::concat_channels(&[&bg, &mask])?,
            mask,
            alpha: planes_to_tensor(alphas)?,
        })
    }

    fn len(&self) -> usize {
        self.image.shape()[0]
    }
}

/// How the two task losses are combined for one step.
#[derive(Clone, Copy, Debug)]
enum Combine {
    Sum,
    Uws,
    Oaws(f64),
}

struct StepVars {
    total: Var,
    losses: LossBreakdown,
}

fn forward_losses(
    model: &MedicalMatting,
    cfg: &TrainConfig,
    g: &Graph,
    batch: &Batch,
    combine: Combine,
    rng: &mut impl Rng,
) -> StepVars {
    let w: LossWeights = cfg.loss_weights();
    let mg = &model.maskgen;
    let x = g.constant(batch.image.clone());
    let features = mg.features_var(g, x);
    let (mu_p, lv_p) = mg.prior_var(g, x);
    let (mu_q, lv_q) = mg.posterior_var(g, x, g.constant(batch.mask.clone()));

    let (b, l) = (batch.len(), cfg.latent_dim);
    let eps: Vec<f64> = (0..b * l).map(|_| rng.sample(StandardNormal)).collect();
    let z = MaskGenerator::reparameterize(g, mu_q, lv_q, Tensor::new(&[b, l], eps).expect("sized"));
    let probs = mg.decode_var(g, features, z);
    let ce = ce_var(g, probs, g.constant(batch.one_hot.clone()));
    let kl = kl_var(g, mu_q, lv_q, mu_p, lv_p);

    let prior_scores = mg.sample_scores(
        &model.store,
        &g.value(features),
        &g.value(mu_p),
        &g.value(lv_p),
        cfg.n_samples,
        rng,
    );
    let umap = batch_uncertainty(&prior_scores, cfg.n_samples);
    let region = umap.map(|u| if u > cfg.grad_region_threshold { 1.0 } else { 0.0 });

    let alpha = model.matting.forward(g, x, features, g.constant(umap));
    let gt = g.constant(batch.alpha.clone());
    let l_alpha = alpha_l1_var(g, alpha, gt);
    let l_grad = grad_loss_var(g, alpha, gt, &region);

    let seg = weighted_sum_var(g, ce, w.mu, kl, w.upsilon);
    let matt = weighted_sum_var(g, l_alpha, w.zeta, l_grad, w.xi);
    let total = match combine {
        Combine::Sum => g.add(seg, matt),
        Combine::Uws => uws_var(g, seg, matt, g.param(model.log_sigma1), g.param(model.log_sigma2)),
        Combine::Oaws(gamma) => weighted_sum_var(g, seg, gamma, matt, 1.0 - gamma),
    };
    let item = |v: Var| g.value(v).item();
    StepVars {
        total,
        losses: LossBreakdown {
            ce: item(ce),
            kl: item(kl),
            alpha_l1: item(l_alpha),
            grad: item(l_grad),
            seg: item(seg),
            matt: item(matt),
            total: item(total),
        },
    }
}

/// Segmentation weight for epoch `n`, clipped to `[0, 1]`.
pub fn epoch_gamma(cfg: &TrainConfig, epoch: usize) -> f64 {
    oaws_gamma(epoch as u64, &cfg.oaws()).clamp(0.0, 1.0)
}

/// Stateful trainer that runs one epoch at a time.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d [Sample],
    model: MedicalMatting,
    adam: Adam,
    sampler: PseudoMaskSampler,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
    step: usize,
    log: TrainLog,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, data: &'d [Sample]) -> Result<Self> {
        Self::with_model(cfg, data, MedicalMatting::new(cfg)?)
    }

    pub fn with_model(cfg: &TrainConfig, data: &'d [Sample], model: MedicalMatting) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(MattingError::Arity("no training samples".into()));
        }
        let bb = cfg.backbone();
        for s in data {
            bb.check_image_dims(s.image.channels(), s.image.height(), s.image.width())?;
        }
        let adam = Adam::new(AdamConfig {
            beta1: cfg.momentum,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        });
        Ok(Self {
            sampler: PseudoMaskSampler::new(cfg.pseudo_range()?, cfg.seed ^ SAMPLER_STREAM),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM),
            cfg: cfg.clone(),
            data,
            model,
            adam,
            order: (0..data.len()).collect(),
            epoch: 0,
            step: 0,
            log: TrainLog::default(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn model(&self) -> &MedicalMatting {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_parts(self) -> (MedicalMatting, TrainLog) {
        (self.model, self.log)
    }

    fn combine(&self) -> Combine {
        match self.cfg.strategy {
            Strategy::None => Combine::Sum,
            Strategy::Uws => Combine::Uws,
            Strategy::Oaws => Combine::Oaws(epoch_gamma(&self.cfg, self.epoch)),
        }
    }

    fn make_batch(&mut self, indices: &[usize]) -> Result<Batch> {
        let mut images = Vec::with_capacity(indices.len());
        let mut alphas = Vec::with_capacity(indices.len());
        let aug = self.cfg.augmentation();
        for &i in indices {
            let s = &self.data[i];
            if self.cfg.augment {
                let (img, alpha, _) = augment(&s.image, &s.alpha, &[], &aug, &mut self.rng)?;
                images.push(img);
                alphas.push(alpha);
            } else {
                images.push(s.image.clone());
                alphas.push(s.alpha.clone());
            }
        }
        let masks = alphas
            .iter()
            .map(|a| Ok(sample_pseudo_mask(a, &mut self.sampler)?.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        Batch::new(
            &images.iter().collect::<Vec<_>>(),
            &alphas.iter().map(|a| a.values()).collect::<Vec<_>>(),
            &masks,
        )
    }

    fn diagnostic(&self, lr: f64, losses: &LossBreakdown) -> String {
        let uws = self.model.uws_state();
        format!(
            "epoch {} step {} lr {lr:e}: ce {} kl {} alpha_l1 {} grad {} seg {} matt {} total {}; sigma1 {} sigma2 {}",
            self.epoch,
            self.step,
            losses.ce,
            losses.kl,
            losses.alpha_l1,
            losses.grad,
            losses.seg,
            losses.matt,
            losses.total,
            uws.sigma1(),
            uws.sigma2()
        )
    }

    pub fn run_epoch(&mut self) -> Result<&EpochLog> {
        if self.is_finished() {
            return Err(MattingError::State("training already finished".into()));
        }
        let combine = self.combine();
        let total_steps = self.total_steps();
        let warmup = self.steps_per_epoch();
        self.order.shuffle(&mut self.rng);
        let order = self.order.clone();
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.make_batch(chunk)?;
            lr = lr_schedule(self.step + 1, total_steps, self.cfg.base_lr, warmup)?;
            let (losses, grads) = {
                let g = Graph::new(&self.model.store);
                let vars = forward_losses(&self.model, &self.cfg, &g, &batch, combine, &mut self.rng);
                if !vars.losses.all_finite() {
                    return Err(MattingError::Diverged(self.diagnostic(lr, &vars.losses)));
                }
                (vars.losses, g.backward(vars.total).into_params())
            };
            if grads.values().any(|t| !t.all_finite()) {
                return Err(MattingError::Diverged(format!(
                    "non-finite gradient; {}",
                    self.diagnostic(lr, &losses)
                )));
            }
            self.adam.step(&mut self.model.store, &grads, lr);
            sums.accumulate(&losses, batch.len() as f64);
            self.step += 1;
        }
        let mut mean = LossBreakdown::default();
        mean.accumulate(&sums, 1.0 / self.data.len() as f64);
        let uws = self.model.uws_state();
        let is_uws = self.cfg.strategy == Strategy::Uws;
        self.log.epochs.push(EpochLog {
            epoch: self.epoch,
            lr,
            losses: mean,
            gamma: match combine {
                Combine::Oaws(g) => Some(g),
                _ => None,
            },
            sigma1: is_uws.then(|| uws.sigma1()),
            sigma2: is_uws.then(|| uws.sigma2()),
        });
        self.epoch += 1;
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<(MedicalMatting, TrainLog)> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(self.into_parts())
    }
}

pub fn train(cfg: &TrainConfig, data: &[Sample]) -> Result<(MedicalMatting, TrainLog)> {
    Trainer::new(cfg, data)?.run()
}

/// Mean losses of `model` over `data` without updating it, using the
/// plain sum as the total. Pseudo masks and codes are drawn from `seed`.
pub fn dataset_losses(model: &MedicalMatting, cfg: &TrainConfig, data: &[Sample], seed: u64) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(MattingError::Arity("no samples".into()));
    }
    let mut sampler = PseudoMaskSampler::new(cfg.pseudo_range()?, seed ^ SAMPLER_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_STREAM);
    let mut sums = LossBreakdown::default();
    for chunk in data.chunks(cfg.batch_size) {
        let masks = chunk
            .iter()
            .map(|s| Ok(sample_pseudo_mask(&s.alpha, &mut sampler)?.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::new(
            &chunk.iter().map(|s| &s.image).collect::<Vec<_>>(),
            &chunk.iter().map(|s| s.alpha.values()).collect::<Vec<_>>(),
            &masks,
        )?;
        let g = Graph::inference(&model.store);
        let vars = forward_losses(model, cfg, &g, &batch, Combine::Sum, &mut rng);
        sums.accumulate(&vars.losses, batch.len() as f64);
    }
    let mut mean = LossBreakdown::default();
    mean.accumulate(&sums, 1.0 / data.len() as f64);
    Ok(mean)
}
