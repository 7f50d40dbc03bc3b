//! Alpha prediction from the image, the generator's features and the
//! uncertainty map.
//!
//! Layout: input concat → unit 1 → channel attention → units 2.. (each
//! with the uncertainty map appended to its input) → two 3×3 convs →
//! sigmoid. A unit is a 3×3 stem conv followed by residual blocks. With
//! `norm_groups > 0` a group norm precedes every hidden ReLU.

use medmatting_nn::{Conv2d, Graph, GroupNorm, Init, Linear, ParamStore, Tensor, Var};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::imaging::{check_pair, images_to_tensor, planes_to_tensor, AlphaMatte, Image};
use crate::maskgen::{ensure_params, names_since, UncertaintyMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MattingConfig {
    pub unit_count: usize,
    pub blocks_per_unit: usize,
    /// Width of each unit; length must equal `unit_count`.
    pub unit_channels: Vec<usize>,
    /// Hidden width of the attention MLP is `channels / attention_reduction`, at least 1.
    pub attention_reduction: usize,
    /// Start every residual branch and the final output conv at zero.
    pub zero_init_residual: bool,
    /// Groups for the normalization before each hidden ReLU; 0 disables it.
    pub norm_groups: usize,
    /// When false the uncertainty channel is fed as zeros.
    pub use_uncertainty_map: bool,
}

impl Default for MattingConfig {
    fn default() -> Self {
        Self {
            unit_count: 3,
            blocks_per_unit: 3,
            unit_channels: vec![32, 32, 16],
            attention_reduction: 8,
            zero_init_residual: true,
            norm_groups: 4,
            use_uncertainty_map: true,
        }
    }
}

impl MattingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MattingError::Config(format!("matting: {m}")));
        if self.unit_count < 1 {
            return bad("unit_count must be at least 1".into());
        }
        if self.blocks_per_unit < 1 {
            return bad("blocks_per_unit must be at least 1".into());
        }
        if self.unit_channels.len() != self.unit_count {
            return bad(format!(
                "{} unit widths for {} units",
                self.unit_channels.len(),
                self.unit_count
            ));
        }
        if self.unit_channels.contains(&0) || self.attention_reduction == 0 {
            return bad("widths and attention_reduction must be positive".into());
        }
        if self.norm_groups > 0 && self.unit_channels.iter().any(|w| w % self.norm_groups != 0) {
            return bad(format!("norm_groups {} must divide every unit width", self.norm_groups));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    norm: Option<GroupNorm>,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn forward(&self, g: &Graph, x: Var) -> Var {
        let branch = self.conv2.forward(g, norm_relu(g, self.norm.as_ref(), self.conv1.forward(g, x)));
        g.add(x, branch)
    }
}

fn norm_relu(g: &Graph, norm: Option<&GroupNorm>, x: Var) -> Var {
    g.relu(match norm {
        Some(n) => n.forward(g, x),
        None => x,
    })
}

fn group_norm(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Option<GroupNorm>> {
    if groups == 0 {
        return Ok(None);
    }
    Ok(Some(GroupNorm::new(store, name, channels, groups)?))
}

#[derive(Clone, Debug)]
struct PropagationUnit {
    stem: Conv2d,
    stem_norm: Option<GroupNorm>,
    blocks: Vec<ResidualBlock>,
}

impl PropagationUnit {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &MattingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let last = if cfg.zero_init_residual { Init::Zeros } else { Init::He };
        let stem = Conv2d::new(store, &format!("{name}.stem"), cin, cout, 3, Init::He, rng)?;
        let stem_norm = group_norm(store, &format!("{name}.stem_norm"), cout, cfg.norm_groups)?;
        let mut blocks = Vec::with_capacity(cfg.blocks_per_unit);
        for b in 0..cfg.blocks_per_unit {
            blocks.push(ResidualBlock {
                conv1: Conv2d::new(store, &format!("{name}.block{b}.conv1"), cout, cout, 3, Init::He, rng)?,
                norm: group_norm(store, &format!("{name}.block{b}.norm"), cout, cfg.norm_groups)?,
                conv2: Conv2d::new(store, &format!("{name}.block{b}.conv2"), cout, cout, 3, last, rng)?,
            });
        }
        Ok(Self { stem, stem_norm, blocks })
    }

    fn forward(&self, g: &Graph, x: Var) -> Var {
        let mut h = norm_relu(g, self.stem_norm.as_ref(), self.stem.forward(g, x));
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        h
    }
}

/// Channel gates `σ(MLP(avg) + MLP(max))` with a shared two-layer MLP.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, Init::He, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, Init::He, rng)?,
        })
    }

    fn mlp(&self, g: &Graph, v: Var) -> Var {
        self.fc2.forward(g, g.relu(self.fc1.forward(g, v)))
    }

    /// `[N, C]` gates for `[N, C, H, W]` input.
    pub fn gates(&self, g: &Graph, x: Var) -> Var {
        let a = self.mlp(g, g.global_avg_pool(x));
        let m = self.mlp(g, g.global_max_pool(x));
        g.sigmoid(g.add(a, m))
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.scale_channels(x, self.gates(g, x))
    }

    pub fn weight_ids(&self) -> [medmatting_nn::ParamId; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

#[derive(Clone, Debug)]
pub struct MattingNet {
    config: MattingConfig,
    image_channels: usize,
    feature_channels: usize,
    units: Vec<PropagationUnit>,
    attention: ChannelAttention,
    out1: Conv2d,
    out1_norm: Option<GroupNorm>,
    out2: Conv2d,
    param_names: Vec<String>,
}

impl MattingNet {
    pub fn new(
        config: MattingConfig,
        image_channels: usize,
        feature_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let start = store.len();
        let mut units = Vec::with_capacity(config.unit_count);
        let mut cin = image_channels + feature_channels + 1;
        let mut attention = None;
        for (i, &width) in config.unit_channels.iter().enumerate() {
            units.push(PropagationUnit::new(store, &format!("matting.unit{i}"), cin, width, &config, rng)?);
            if i == 0 {
                attention = Some(ChannelAttention::new(
                    store,
                    "matting.attention",
                    width,
                    config.attention_reduction,
                    rng,
                )?);
            }
            cin = width + 1;
        }
        let last = *config.unit_channels.last().expect("validated");
        let out1 = Conv2d::new(store, "matting.out1", last, last, 3, Init::He, rng)?;
        let out1_norm = group_norm(store, "matting.out1_norm", last, config.norm_groups)?;
        let final_init = if config.zero_init_residual { Init::Zeros } else { Init::He };
        let out2 = Conv2d::new(store, "matting.out2", last, 1, 3, final_init, rng)?;
        Ok(Self {
            config,
            image_channels,
            feature_channels,
            units,
            attention: attention.expect("unit_count >= 1"),
            out1,
            out1_norm,
            out2,
            param_names: names_since(store, start),
        })
    }

    pub fn config(&self) -> &MattingConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn attention(&self) -> &ChannelAttention {
        &self.attention
    }

    /// `image [N, Ci, H, W]`, `features [N, F, H, W]`, `umap [N, 1, H, W]`
    /// to alpha `[N, 1, H, W]`. The map is replaced by zeros when disabled.
    pub fn forward(&self, g: &Graph, image: Var, features: Var, umap: Var) -> Var {
        let umap = if self.config.use_uncertainty_map {
            umap
        } else {
            g.constant(Tensor::zeros(&g.shape(umap)))
        };
        let mut h = self.units[0].forward(g, g.concat_channels(&[image, features, umap]));
        h = self.attention.forward(g, h);
        for unit in &self.units[1..] {
            h = unit.forward(g, g.concat_channels(&[h, umap]));
        }
        let h = norm_relu(g, self.out1_norm.as_ref(), self.out1.forward(g, h));
        g.sigmoid(self.out2.forward(g, h))
    }

    pub fn predict_alpha(
        &self,
        store: &ParamStore,
        image: &Image,
        features: &Array3<f64>,
        umap: &UncertaintyMap,
    ) -> Result<AlphaMatte> {
        ensure_params(store, &self.param_names, "matting network")?;
        let (fc, fh, fw) = features.dim();
        if image.channels() != self.image_channels || fc != self.feature_channels {
            return Err(MattingError::Shape(format!(
                "inputs have {} image and {fc} feature channels, network expects {} and {}",
                image.channels(),
                self.image_channels,
                self.feature_channels
            )));
        }
        check_pair((fh, fw), image.dim(), "features vs image")?;
        check_pair(umap.values().dim(), image.dim(), "uncertainty map vs image")?;
        let x = images_to_tensor(&[image])?;
        let f = Tensor::new(&[1, fc, fh, fw], features.iter().copied().collect())?;
        let u = planes_to_tensor(&[umap.values()])?;
        let g = Graph::inference(store);
        let alpha = self.forward(&g, g.constant(x), g.constant(f), g.constant(u));
        let (h, w) = image.dim();
        let values = ndarray::Array2::from_shape_vec((h, w), g.value(alpha).data().to_vec())
            .expect("sized");
        Ok(AlphaMatte::from_clipped(values))
    }

    /// Gates applied to a `[C, H, W]` stack, where `C` is the first unit's width.
    pub fn channel_attention(&self, store: &ParamStore, features: &Array3<f64>) -> Result<Array3<f64>> {
        ensure_params(store, &self.param_names, "matting network")?;
        let (c, h, w) = features.dim();
        if c != self.config.unit_channels[0] || h * w == 0 {
            return Err(MattingError::Shape(format!(
                "{c}x{h}x{w} stack for attention over {} channels",
                self.config.unit_channels[0]
            )));
        }
        let g = Graph::inference(store);
        let x = g.constant(Tensor::new(&[1, c, h, w], features.iter().copied().collect())?);
        let out = g.value(self.attention.forward(&g, x));
        Ok(Array3::from_shape_vec((c, h, w), out.data().to_vec()).expect("sized"))
    }
}
