//! Small residual convolutional encoder.

use serde::{Deserialize, Serialize};

use crate::nn::Conv;
use crate::tensor::{bind_specs, register_specs, Graph, Initializer, ParamSpec, ParameterSet, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub blocks: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 4,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder needs at least 3 channels, got {0}")]
    Channels(usize),
    #[error("encoder needs at least one residual block")]
    Blocks,
    #[error("encoder kernel must be odd, got {0}")]
    Kernel(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.channels < 3 {
            return Err(EncoderError::Channels(self.channels));
        }
        if self.blocks == 0 {
            return Err(EncoderError::Blocks);
        }
        if self.kernel % 2 == 0 {
            return Err(EncoderError::Kernel(self.kernel));
        }
        Ok(())
    }
}

/// Head conv, `B` conv-ReLU-conv residual blocks, tail conv with a global
/// skip from the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    head: Conv,
    blocks: Vec<(Conv, Conv)>,
    tail: Conv,
}

impl Encoder {
    pub fn specs(cfg: &EncoderConfig, prefix: &str) -> Vec<ParamSpec> {
        let (c, k) = (cfg.channels, cfg.kernel);
        let mut v = Conv::specs(&format!("{prefix}.head"), 3, c, k).to_vec();
        for b in 0..cfg.blocks {
            v.extend(Conv::specs(&format!("{prefix}.block{b}.conv1"), c, c, k));
            v.extend(Conv::specs(&format!("{prefix}.block{b}.conv2"), c, c, k));
        }
        v.extend(Conv::specs(&format!("{prefix}.tail"), c, c, k));
        v
    }

    fn from_ids(config: EncoderConfig, ids: &[crate::tensor::ParamId]) -> Self {
        let k = config.kernel;
        let convs: Vec<Conv> = ids.chunks(2).map(|p| Conv::from_ids(p, k)).collect();
        let n = convs.len();
        Self {
            config,
            head: convs[0],
            blocks: convs[1..n - 1].chunks(2).map(|p| (p[0], p[1])).collect(),
            tail: convs[n - 1],
        }
    }

    pub fn new(
        config: EncoderConfig,
        params: &mut ParameterSet<f32>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let ids = register_specs(&Self::specs(&config, prefix), params, init)?;
        Ok(Self::from_ids(config, &ids))
    }

    pub fn bind<T: Scalar>(config: EncoderConfig, params: &ParameterSet<T>, prefix: &str) -> Result<Self, EncoderError> {
        config.validate()?;
        let ids = bind_specs(&Self::specs(&config, prefix), params)?;
        Ok(Self::from_ids(config, &ids))
    }

    pub fn param_count(&self) -> usize {
        Self::specs(&self.config, "")
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// `[H, W, 3] → [H, W, C]`.
    pub fn encode<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        image: &G::Value,
    ) -> Result<G::Value, TensorError> {
        let head = self.head.forward(g, params, image)?;
        let mut x = head.clone();
        for (c1, c2) in &self.blocks {
            let r = c1.forward(g, params, &x)?;
            let r = g.relu(&r)?;
            let r = c2.forward(g, params, &r)?;
            x = g.add(&x, &r)?;
        }
        let t = self.tail.forward(g, params, &x)?;
        g.add(&t, &head)
    }

    /// Encoded features unfolded to `[H, W, C·K²]`.
    pub fn featurize<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        image: &G::Value,
        k: usize,
    ) -> Result<G::Value, TensorError> {
        let f = self.encode(g, params, image)?;
        g.unfold(&f, k)
    }
}
