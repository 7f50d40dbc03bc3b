//! Probabilistic mask generator: a UNet whose last features are fused with
//! a Gaussian latent code. A prior net conditions the code on the image, a
//! posterior net on the image and a mask. Sampling the prior and decoding
//! gives a set of score maps; the entropy of their mean is the uncertainty
//! map handed to the matting network.

use medmatting_nn::{Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::imaging::{check_pair, images_to_tensor, planes_to_tensor, BinaryMask, Image};
use crate::losses::PROB_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_channels: usize,
    /// Encoder stages; the deepest runs at `1 / 2^(depth-1)` resolution.
    pub depth: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub class_count: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            depth: 4,
            base_channels: 16,
            latent_dim: 6,
            class_count: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MattingError::Config(format!("backbone: {m}")));
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad("image_channels must be 1 or 3");
        }
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        if self.base_channels < 4 {
            return bad("base_channels must be at least 4");
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2");
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Image sides must be multiples of this.
    pub fn side_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_image_dims(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.image_channels {
            return Err(MattingError::Shape(format!(
                "image has {channels} channels, model expects {}",
                self.image_channels
            )));
        }
        let m = self.side_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(MattingError::Shape(format!(
                "{h}x{w} image, sides must be multiples of {m}"
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    mean: Vec<f64>,
    log_variance: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(MattingError::Shape(format!(
                "mean has {} entries, log variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if log_variance.iter().chain(&mean).any(|v| !v.is_finite()) {
            return Err(MattingError::Domain("latent parameters must be finite".into()));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-class probabilities, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    probs: Array3<f64>,
}

const STOCHASTIC_TOL: f64 = 1e-5;

fn check_stochastic(probs: impl Iterator<Item = (usize, f64)>, pixels: usize) -> Result<()> {
    let mut sums = vec![0.0; pixels];
    for (i, p) in probs {
        if !(p >= 0.0) {
            return Err(MattingError::Domain(format!("probability {p}")));
        }
        sums[i % pixels] += p;
    }
    if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > STOCHASTIC_TOL) {
        return Err(MattingError::Domain(format!("class probabilities sum to {s}")));
    }
    Ok(())
}

impl ScoreMap {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let (_, h, w) = probs.dim();
        check_stochastic(probs.iter().copied().enumerate(), h * w)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    /// Pixels whose most likely class is not 0.
    pub fn argmax_mask(&self) -> BinaryMask {
        let (_, h, w) = self.probs.dim();
        BinaryMask::new(Array2::from_shape_fn((h, w), |(r, c)| {
            self.probs[[1, r, c]] > self.probs[[0, r, c]]
        }))
    }
}

/// `N` score maps, `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMapSet {
    maps: Array4<f64>,
}

impl ScoreMapSet {
    pub fn new(maps: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = maps.dim();
        if n == 0 || c == 0 {
            return Err(MattingError::Arity("score map set is empty".into()));
        }
        // Sum per (sample, pixel): fold the sample index into the pixel key.
        let per_sample = c * h * w;
        let keyed = maps
            .iter()
            .copied()
            .enumerate()
            .map(|(i, p)| ((i / per_sample) * h * w + (i % (h * w)), p));
        check_stochastic(keyed, n * h * w)?;
        Ok(Self { maps })
    }

    fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4().expect("NCHW");
        let maps = Array4::from_shape_vec((n, c, h, w), t.data().to_vec()).expect("sized");
        Self { maps }
    }

    pub fn maps(&self) -> &Array4<f64> {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.maps.dim().1
    }

    pub fn get(&self, i: usize) -> ScoreMap {
        ScoreMap {
            probs: self.maps.index_axis(ndarray::Axis(0), i).to_owned(),
        }
    }

    pub fn masks(&self) -> Vec<BinaryMask> {
        (0..self.len()).map(|i| self.get(i).argmax_mask()).collect()
    }
}

/// Entropy of the mean score map, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    values: Array2<f64>,
    source_n: usize,
}

impl UncertaintyMap {
    pub fn new(values: Array2<f64>, source_n: usize) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(MattingError::Domain("entropies must be finite and >= 0".into()));
        }
        Ok(Self { values, source_n })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source_n(&self) -> usize {
        self.source_n
    }
}

/// For `[B·n, C, H, W]` probabilities grouped `n` per item, the entropy of
/// each group's mean as `[B, 1, H, W]`.
pub fn batch_uncertainty(probs: &Tensor, n: usize) -> Tensor {
    let (bn, c, h, w) = probs.dims4().expect("NCHW");
    let b = bn / n;
    let plane = h * w;
    let mut out = vec![0.0; b * plane];
    let mut mean = vec![0.0; c * plane];
    for item in 0..b {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for s in 0..n {
            let src = probs.batch_item(item * n + s);
            mean.iter_mut().zip(src).for_each(|(m, p)| *m += p);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let dst = &mut out[item * plane..(item + 1) * plane];
        for (p, u) in dst.iter_mut().enumerate() {
            *u = (0..c)
                .map(|k| {
                    let v = mean[k * plane + p];
                    if v <= 0.0 {
                        0.0
                    } else {
                        -v * v.max(PROB_EPS).ln()
                    }
                })
                .sum();
        }
    }
    Tensor::new(&[b, 1, h, w], out).expect("sized")
}

pub fn uncertainty_map(scores: &ScoreMapSet) -> UncertaintyMap {
    let (n, c, h, w) = scores.maps().dim();
    let t = Tensor::new(&[n, c, h, w], scores.maps().iter().copied().collect()).expect("sized");
    let u = batch_uncertainty(&t, n);
    let values = Array2::from_shape_vec((h, w), u.into_data()).expect("sized");
    UncertaintyMap { values, source_n: n }
}

/// Largest possible entropy over `classes` classes.
pub fn max_entropy(classes: usize) -> f64 {
    (classes as f64).ln()
}

// ---------------------------------------------------------------------------
// Layers.

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, Init::He, rng)?,
            b: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, Init::He, rng)?,
        })
    }

    fn forward(&self, g: &Graph, x: Var) -> Var {
        g.relu(self.b.forward(g, g.relu(self.a.forward(g, x))))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<DoubleConv>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut cin = in_channels;
        for i in 0..cfg.depth {
            let cout = cfg.stage_channels(i);
            stages.push(DoubleConv::new(store, &format!("{prefix}.enc{i}"), cin, cout, rng)?);
            cin = cout;
        }
        Ok(Self { stages })
    }

    /// Output of every stage, shallowest first.
    fn forward(&self, g: &Graph, x: Var) -> Vec<Var> {
        let mut outs: Vec<Var> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let input = if i == 0 { x } else { g.max_pool2(outs[i - 1]) };
            outs.push(stage.forward(g, input));
        }
        outs
    }
}

#[derive(Clone, Debug)]
struct UNet {
    encoder: Encoder,
    /// Indexed by level, shallowest first; level `depth - 1` has none.
    decoder: Vec<DoubleConv>,
}

impl UNet {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "unet", cfg.image_channels, cfg, rng)?;
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for i in 0..cfg.depth - 1 {
            let cin = cfg.stage_channels(i + 1) + cfg.stage_channels(i);
            decoder.push(DoubleConv::new(
                store,
                &format!("unet.dec{i}"),
                cin,
                cfg.stage_channels(i),
                rng,
            )?);
        }
        Ok(Self { encoder, decoder })
    }

    fn forward(&self, g: &Graph, x: Var) -> Var {
        let skips = self.encoder.forward(g, x);
        let mut h = *skips.last().expect("depth >= 2");
        for i in (0..self.decoder.len()).rev() {
            let up = g.upsample_nearest2(h);
            h = self.decoder[i].forward(g, g.concat_channels(&[up, skips[i]]));
        }
        h
    }
}

#[derive(Clone, Debug)]
struct LatentEncoder {
    encoder: Encoder,
    proj: Linear,
    latent_dim: usize,
}

impl LatentEncoder {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, prefix, in_channels, cfg, rng)?;
        let top = cfg.stage_channels(cfg.depth - 1);
        let proj = Linear::new(store, &format!("{prefix}.proj"), top, 2 * cfg.latent_dim, Init::He, rng)?;
        Ok(Self {
            encoder,
            proj,
            latent_dim: cfg.latent_dim,
        })
    }

    fn forward(&self, g: &Graph, x: Var) -> (Var, Var) {
        let top = *self.encoder.forward(g, x).last().expect("depth >= 2");
        let params = self.proj.forward(g, g.global_avg_pool(top));
        let mean = g.narrow_channels(params, 0, self.latent_dim);
        let logvar = g.narrow_channels(params, self.latent_dim, self.latent_dim);
        (mean, logvar)
    }
}

#[derive(Clone, Debug)]
struct FusionHead {
    convs: [Conv2d; 3],
}

impl FusionHead {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let f = cfg.base_channels;
        Ok(Self {
            convs: [
                Conv2d::new(store, "head.fuse0", f + cfg.latent_dim, f, 1, Init::He, rng)?,
                Conv2d::new(store, "head.fuse1", f, f, 1, Init::He, rng)?,
                Conv2d::new(store, "head.fuse2", f, cfg.class_count, 1, Init::He, rng)?,
            ],
        })
    }

    fn forward(&self, g: &Graph, features: Var, z: Var) -> Var {
        let s = g.shape(features);
        let zmap = g.broadcast_spatial(z, s[2], s[3]);
        let h = g.relu(self.convs[0].forward(g, g.concat_channels(&[features, zmap])));
        let h = g.relu(self.convs[1].forward(g, h));
        g.softmax_channels(self.convs[2].forward(g, h))
    }
}

// ---------------------------------------------------------------------------

/// Parameter names registered since the store held `start` entries.
pub(crate) fn names_since(store: &ParamStore, start: usize) -> Vec<String> {
    store.ids().skip(start).map(|id| store.name(id).to_string()).collect()
}

pub(crate) fn ensure_params(store: &ParamStore, names: &[String], what: &str) -> Result<()> {
    if let Some(missing) = names.iter().find(|n| store.id(n).is_none()) {
        return Err(MattingError::State(format!("{what} weight `{missing}` is not initialised")));
    }
    Ok(())
}

/// Architecture and parameter handles; weights live in a [`ParamStore`]
/// under the `unet.`, `prior.`, `posterior.` and `head.` prefixes.
#[derive(Clone, Debug)]
pub struct MaskGenerator {
    config: BackboneConfig,
    unet: UNet,
    prior: LatentEncoder,
    posterior: LatentEncoder,
    head: FusionHead,
    param_names: Vec<String>,
}

impl MaskGenerator {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let start = store.len();
        let unet = UNet::new(store, &config, rng)?;
        let prior = LatentEncoder::new(store, "prior", config.image_channels, &config, rng)?;
        let posterior = LatentEncoder::new(store, "posterior", config.image_channels + 1, &config, rng)?;
        let head = FusionHead::new(store, &config, rng)?;
        Ok(Self {
            config,
            unet,
            prior,
            posterior,
            head,
            param_names: names_since(store, start),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// Channels of [`latent_features`](Self::latent_features).
    pub fn feature_channels(&self) -> usize {
        self.config.base_channels
    }

    pub fn features_var(&self, g: &Graph, x: Var) -> Var {
        self.unet.forward(g, x)
    }

    pub fn prior_var(&self, g: &Graph, x: Var) -> (Var, Var) {
        self.prior.forward(g, x)
    }

    /// `mask` is `[N, 1, H, W]`, appended to the image channels.
    pub fn posterior_var(&self, g: &Graph, x: Var, mask: Var) -> (Var, Var) {
        self.posterior.forward(g, g.concat_channels(&[x, mask]))
    }

    /// Softmax scores `[N, C, H, W]` for features `[N, F, H, W]` and codes `[N, L]`.
    pub fn decode_var(&self, g: &Graph, features: Var, z: Var) -> Var {
        self.head.forward(g, features, z)
    }

    /// `mean + exp(½ logvar) ⊙ eps`.
    pub fn reparameterize(g: &Graph, mean: Var, logvar: Var, eps: Tensor) -> Var {
        let std = g.exp(g.mul_scalar(logvar, 0.5));
        g.add(mean, g.mul(std, g.constant(eps)))
    }

    /// Draws `n` codes per batch item from `(mean, logvar)` (both `[B, L]`)
    /// and decodes them against `features` without recording gradients.
    /// Returns `[B·n, C, H, W]`, item-major.
    pub fn sample_scores(
        &self,
        store: &ParamStore,
        features: &Tensor,
        mean: &Tensor,
        logvar: &Tensor,
        n: usize,
        rng: &mut impl Rng,
    ) -> Tensor {
        let (b, l) = mean.dims2().expect("[B, L]");
        let eps: Vec<f64> = (0..b * n * l).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(&[b * n, l], eps).expect("sized");
        let g = Graph::inference(store);
        let f = g.repeat_batch(g.constant(features.clone()), n);
        let mu = g.repeat_batch(g.constant(mean.clone()), n);
        let lv = g.repeat_batch(g.constant(logvar.clone()), n);
        let z = Self::reparameterize(&g, mu, lv, eps);
        let probs = self.decode_var(&g, f, z);
        (*g.value(probs)).clone()
    }

    fn image_input(&self, store: &ParamStore, image: &Image) -> Result<Tensor> {
        ensure_params(store, &self.param_names, "mask generator")?;
        self.config
            .check_image_dims(image.channels(), image.height(), image.width())?;
        images_to_tensor(&[image])
    }

    fn latent_from(g: &Graph, mean: Var, logvar: Var) -> Result<GaussianLatent> {
        GaussianLatent::new(g.value(mean).data().to_vec(), g.value(logvar).data().to_vec())
    }

    pub fn prior_encode(&self, store: &ParamStore, image: &Image) -> Result<GaussianLatent> {
        let x = self.image_input(store, image)?;
        let g = Graph::inference(store);
        let (m, lv) = self.prior_var(&g, g.constant(x));
        Self::latent_from(&g, m, lv)
    }

    pub fn posterior_encode(
        &self,
        store: &ParamStore,
        image: &Image,
        mask: &BinaryMask,
    ) -> Result<GaussianLatent> {
        let x = self.image_input(store, image)?;
        check_pair(mask.dim(), image.dim(), "posterior mask vs image")?;
        let m = planes_to_tensor(&[&mask.to_f64()])?;
        let g = Graph::inference(store);
        let (mean, lv) = self.posterior_var(&g, g.constant(x), g.constant(m));
        Self::latent_from(&g, mean, lv)
    }

    /// Last decoder features, `[F, H, W]`.
    pub fn latent_features(&self, store: &ParamStore, image: &Image) -> Result<Array3<f64>> {
        let x = self.image_input(store, image)?;
        let g = Graph::inference(store);
        let f = g.value(self.features_var(&g, g.constant(x)));
        let (_, c, h, w) = f.dims4()?;
        Ok(Array3::from_shape_vec((c, h, w), f.data().to_vec()).expect("sized"))
    }

    /// Decodes one explicit code.
    pub fn decode(&self, store: &ParamStore, image: &Image, z: &[f64]) -> Result<ScoreMap> {
        let x = self.image_input(store, image)?;
        if z.len() != self.config.latent_dim {
            return Err(MattingError::Shape(format!(
                "code of length {}, latent_dim is {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let g = Graph::inference(store);
        let f = self.features_var(&g, g.constant(x));
        let z = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let p = g.value(self.decode_var(&g, f, z));
        let (_, c, h, w) = p.dims4()?;
        Ok(ScoreMap {
            probs: Array3::from_shape_vec((c, h, w), p.data().to_vec()).expect("sized"),
        })
    }

    /// `n` score maps from codes drawn from the prior.
    pub fn sample_masks(&self, store: &ParamStore, image: &Image, n: usize, rng_seed: u64) -> Result<ScoreMapSet> {
        let latent = self.prior_encode(store, image)?;
        self.sample_masks_with(store, image, &latent, n, rng_seed)
    }

    /// As [`sample_masks`](Self::sample_masks) with an explicit latent.
    pub fn sample_masks_with(
        &self,
        store: &ParamStore,
        image: &Image,
        latent: &GaussianLatent,
        n: usize,
        rng_seed: u64,
    ) -> Result<ScoreMapSet> {
        if n < 1 {
            return Err(MattingError::Arity("need at least one sample".into()));
        }
        if latent.dim() != self.config.latent_dim {
            return Err(MattingError::Shape(format!(
                "latent of dimension {}, model uses {}",
                latent.dim(),
                self.config.latent_dim
            )));
        }
        let x = self.image_input(store, image)?;
        let features = {
            let g = Graph::inference(store);
            (*g.value(self.features_var(&g, g.constant(x)))).clone()
        };
        let l = latent.dim();
        let mean = Tensor::new(&[1, l], latent.mean().to_vec())?;
        let logvar = Tensor::new(&[1, l], latent.log_variance().to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let probs = self.sample_scores(store, &features, &mean, &logvar, n, &mut rng);
        Ok(ScoreMapSet::from_tensor(&probs))
    }
}
