//! Fixed-scale sub-pixel convolution head.

use serde::{Deserialize, Serialize};

use crate::nn::{Affine, Conv};
use crate::tensor::{bind_specs, register_specs, Graph, Initializer, ParamSpec, ParameterSet, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubPixelConfig {
    pub scale: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Post-shuffle feature channels; `None` means the encoder width.
    #[serde(default)]
    pub n_out: Option<usize>,
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubPixelError {
    #[error("sub-pixel scale must be >= 1")]
    Scale,
    #[error("sub-pixel kernel must be odd, got {0}")]
    Kernel(usize),
    #[error("sub-pixel n_out must be >= 1")]
    NOut,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl SubPixelConfig {
    pub fn validate(&self) -> Result<(), SubPixelError> {
        if self.scale == 0 {
            return Err(SubPixelError::Scale);
        }
        if self.kernel % 2 == 0 {
            return Err(SubPixelError::Kernel(self.kernel));
        }
        if self.n_out == Some(0) {
            return Err(SubPixelError::NOut);
        }
        Ok(())
    }
}

/// Parameters of the expansion convolution, `C·K²·s²·N_out + s²·N_out`.
pub fn subpixel_param_count(c: usize, s: usize, k: usize, n_out: usize) -> usize {
    c * k * k * s * s * n_out + s * s * n_out
}

/// Expansion conv `C → s²·N_out`, pixel shuffle, pointwise projection to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct SubPixelHead {
    pub config: SubPixelConfig,
    pub channels: usize,
    pub n_out: usize,
    pub expansion: Conv,
    pub projection: Affine,
}

impl SubPixelHead {
    pub fn specs(config: &SubPixelConfig, channels: usize, prefix: &str) -> Vec<ParamSpec> {
        let n_out = config.n_out.unwrap_or(channels);
        let s2 = config.scale * config.scale;
        let mut v = Conv::specs(&format!("{prefix}.expansion"), channels, s2 * n_out, config.kernel).to_vec();
        v.extend(Affine::specs(&format!("{prefix}.projection"), n_out, 3));
        v
    }

    fn from_ids(config: SubPixelConfig, channels: usize, ids: &[crate::tensor::ParamId]) -> Self {
        let n_out = config.n_out.unwrap_or(channels);
        Self {
            config,
            channels,
            n_out,
            expansion: Conv::from_ids(&ids[0..2], config.kernel),
            projection: Affine::from_ids(&ids[2..4], n_out, 3),
        }
    }

    pub fn new(
        config: SubPixelConfig,
        channels: usize,
        params: &mut ParameterSet<f32>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self, SubPixelError> {
        config.validate()?;
        let ids = register_specs(&Self::specs(&config, channels, prefix), params, init)?;
        Ok(Self::from_ids(config, channels, &ids))
    }

    pub fn bind<T: Scalar>(
        config: SubPixelConfig,
        channels: usize,
        params: &ParameterSet<T>,
        prefix: &str,
    ) -> Result<Self, SubPixelError> {
        config.validate()?;
        let ids = bind_specs(&Self::specs(&config, channels, prefix), params)?;
        Ok(Self::from_ids(config, channels, &ids))
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn expansion_param_count(&self) -> usize {
        subpixel_param_count(self.channels, self.config.scale, self.config.kernel, self.n_out)
    }

    /// `[H, W, C] → [sH, sW, 3]`.
    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        features: &G::Value,
    ) -> Result<G::Value, TensorError> {
        let x = self.expansion.forward(g, params, features)?;
        let x = g.pixel_shuffle(&x, self.config.scale)?;
        self.projection.forward(g, params, &x)
    }
}
