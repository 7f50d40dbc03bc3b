use rand::Rng;

use crate::param::he_normal;
use crate::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// All-zero weights and bias.
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = match init {
            Init::He => he_normal(&shape, in_channels * kernel * kernel, rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.conv2d(x, g.param(self.weight), Some(g.param(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [out_features, in_features];
        let w = match init {
            Init::He => he_normal(&shape, in_features, rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[out_features]))?,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.linear(x, g.param(self.weight), g.param(self.bias))
    }
}

/// Group normalization with a learned per-channel scale (starting at 1)
/// and shift (starting at 0).
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::NnError::Shape(format!("{groups} groups for {channels} channels")));
        }
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.group_norm(x, g.param(self.gamma), g.param(self.beta), self.groups, self.eps)
    }
}
