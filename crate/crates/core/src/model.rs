//! Encoder plus upsampling head as one super-resolution model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baseline::{SubPixelConfig, SubPixelError, SubPixelHead};
use crate::cuf::{self, CufConfig, CufError, CufHead, InstantiatedHead};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::imaging::Image;
use crate::tensor::{Eager, Graph, Initializer, ParamSpec, ParameterSet, Scalar, Tensor, TensorError};

const ENCODER: &str = "encoder";
const HEAD: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    Cuf(CufConfig),
    Subpixel(SubPixelConfig),
    /// A CUF head frozen at one integer scale.
    CufInstantiated { scale: usize, cuf: CufConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cuf(#[from] CufError),
    #[error(transparent)]
    SubPixel(#[from] SubPixelError),
    #[error("{head} head cannot decode at scale ({s_h}, {s_w})")]
    UnsupportedScale { head: &'static str, s_h: f64, s_w: f64 },
    #[error("parameter set has {got} tensors, model needs {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error("{0}")]
    Unsupported(String),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        match &self.head {
            HeadConfig::Cuf(c) => c.validate()?,
            HeadConfig::Subpixel(c) => c.validate()?,
            HeadConfig::CufInstantiated { scale, cuf } => {
                cuf.validate()?;
                if *scale == 0 {
                    return Err(CufError::NonIntegerScale(0.0).into());
                }
            }
        }
        Ok(())
    }

    pub fn head_kind(&self) -> &'static str {
        match self.head {
            HeadConfig::Cuf(_) => "cuf",
            HeadConfig::Subpixel(_) => "subpixel",
            HeadConfig::CufInstantiated { .. } => "cuf_instantiated",
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.encoder.channels;
        let mut v = Encoder::specs(&self.encoder, ENCODER);
        v.extend(match &self.head {
            HeadConfig::Cuf(cfg) => CufHead::specs(cfg, c, HEAD),
            HeadConfig::Subpixel(cfg) => SubPixelHead::specs(cfg, c, HEAD),
            HeadConfig::CufInstantiated { scale, cuf } => InstantiatedHead::specs(*scale, cuf.kernel, c, HEAD),
        });
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Cuf(CufHead),
    SubPixel(SubPixelHead),
    Instantiated(InstantiatedHead),
}

/// Parameter-free model structure; every forward takes the parameters
/// explicitly so the same architecture runs in any precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
}

impl Architecture {
    pub fn bind<T: Scalar>(config: ModelConfig, params: &ParameterSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.param_specs().len();
        if params.len() != expected {
            return Err(ModelError::ParameterCount { expected, got: params.len() });
        }
        let encoder = Encoder::bind(config.encoder, params, ENCODER)?;
        let c = config.encoder.channels;
        let head = match config.head {
            HeadConfig::Cuf(cfg) => Head::Cuf(CufHead::bind(cfg, c, params, HEAD)?),
            HeadConfig::Subpixel(cfg) => Head::SubPixel(SubPixelHead::bind(cfg, c, params, HEAD)?),
            HeadConfig::CufInstantiated { scale, cuf } => {
                Head::Instantiated(InstantiatedHead::bind(scale, cuf.kernel, c, params, HEAD)?)
            }
        };
        Ok(Self { config, encoder, head })
    }

    /// Integer scale of fixed-scale heads.
    pub fn fixed_scale(&self) -> Option<usize> {
        match &self.head {
            Head::Cuf(_) => None,
            Head::SubPixel(h) => Some(h.scale()),
            Head::Instantiated(h) => Some(h.scale),
        }
    }

    fn check_fixed(&self, s_h: f64, s_w: f64) -> Result<usize, ModelError> {
        match self.fixed_scale() {
            Some(s) if s as f64 == s_h && s as f64 == s_w => Ok(s),
            Some(_) => Err(ModelError::UnsupportedScale {
                head: self.config.head_kind(),
                s_h,
                s_w,
            }),
            None => Err(ModelError::Unsupported("continuous head has no fixed scale".into())),
        }
    }

    /// `[H, W, 3] → [⌊s_h·H⌋, ⌊s_w·W⌋, 3]`.
    pub fn upscale<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        image: &G::Value,
        s_h: f64,
        s_w: f64,
    ) -> Result<G::Value, ModelError> {
        match &self.head {
            Head::Cuf(h) => {
                let f = self.encoder.featurize(g, params, image, h.kernel())?;
                Ok(h.decode_continuous(g, params, &f, s_h, s_w)?)
            }
            Head::SubPixel(h) => {
                self.check_fixed(s_h, s_w)?;
                let f = self.encoder.encode(g, params, image)?;
                Ok(h.forward(g, params, &f)?)
            }
            Head::Instantiated(h) => {
                self.check_fixed(s_h, s_w)?;
                let f = self.encoder.encode(g, params, image)?;
                Ok(h.forward(g, params, &f)?)
            }
        }
    }

    /// Continuous head decoded through its discrete instantiation at integer `s`.
    pub fn upscale_instantiated<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        image: &G::Value,
        s: usize,
    ) -> Result<G::Value, ModelError> {
        match &self.head {
            Head::Cuf(h) => {
                let f = self.encoder.encode(g, params, image)?;
                let bank = h.instantiate_in(g, params, s)?;
                Ok(h.decode_instantiated(g, params, &bank, s, &f)?)
            }
            _ => self.upscale(g, params, image, s as f64, s as f64),
        }
    }

    /// Prediction at arbitrary target-grid coordinates of `lr`, laid out as
    /// `[out_h, out_w, 3]`. Fixed-scale heads need integer coordinates.
    pub fn predict_points<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        lr: &G::Value,
        coords: &[(f64, f64)],
        out_shape: [usize; 2],
        scale: f64,
    ) -> Result<G::Value, ModelError> {
        let (h, w, _) = g.value(lr).dims3()?;
        match &self.head {
            Head::Cuf(head) => {
                let plan = cuf::plan_points((h, w), coords.iter().copied(), out_shape, (scale, scale))?;
                let f = self.encoder.featurize(g, params, lr, head.kernel())?;
                Ok(head.decode_plan(g, params, &f, &plan)?)
            }
            _ => {
                let s = self.check_fixed(scale, scale)?;
                let full = self.upscale(g, params, lr, scale, scale)?;
                let (fh, fw) = (h * s, w * s);
                let mut idx = Vec::with_capacity(coords.len());
                for &(y, x) in coords {
                    if y.fract() != 0.0 || x.fract() != 0.0 || y < 0.0 || x < 0.0 || y as usize >= fh || x as usize >= fw {
                        return Err(CufError::OutOfBounds { y, x, h: fh, w: fw }.into());
                    }
                    idx.push(y as usize * fw + x as usize);
                }
                if idx.len() != out_shape[0] * out_shape[1] {
                    return Err(CufError::EmptyTarget(out_shape[0], out_shape[1]).into());
                }
                let flat = g.reshape(&full, &[fh * fw, 3])?;
                let picked = g.gather_rows(&flat, Arc::from(idx))?;
                Ok(g.reshape(&picked, &[out_shape[0], out_shape[1], 3])?)
            }
        }
    }
}

/// Configuration, architecture and `f32` parameters.
#[derive(Clone, Debug)]
pub struct SrModel {
    pub arch: Architecture,
    pub params: ParameterSet<f32>,
}

impl SrModel {
    /// Fresh model with seeded uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if let HeadConfig::CufInstantiated { .. } = config.head {
            return Err(ModelError::Unsupported(
                "instantiated heads are produced from a trained continuous head".into(),
            ));
        }
        let mut params = ParameterSet::new();
        let mut init = Initializer::new(seed);
        crate::tensor::register_specs(&config.param_specs(), &mut params, &mut init)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParameterSet<f32>) -> Result<Self, ModelError> {
        let arch = Architecture::bind(config, &params)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Eager upscale of an image; output is not clamped.
    pub fn upscale(&self, image: &Image, s_h: f64, s_w: f64) -> Result<Image, ModelError> {
        let mut g = Eager;
        let x = g.constant(image.tensor().clone());
        let y = self.arch.upscale(&mut g, &self.params, &x, s_h, s_w)?;
        Ok(Image::new(Tensor::clone(&y)).expect("three output channels"))
    }

    pub fn upscale_instantiated(&self, image: &Image, s: usize) -> Result<Image, ModelError> {
        let mut g = Eager;
        let x = g.constant(image.tensor().clone());
        let y = self.arch.upscale_instantiated(&mut g, &self.params, &x, s)?;
        Ok(Image::new(Tensor::clone(&y)).expect("three output channels"))
    }

    /// Freezes a continuous head at integer scale `s` into a fixed-scale
    /// model carrying the kernel bank as a parameter.
    pub fn instantiate(&self, s: usize) -> Result<SrModel, ModelError> {
        let Head::Cuf(head) = &self.arch.head else {
            return Err(ModelError::Unsupported(format!(
                "only continuous heads can be instantiated, not {}",
                self.config().head_kind()
            )));
        };
        let HeadConfig::Cuf(cuf) = self.config().head else {
            unreachable!("head and config agree")
        };
        let bank = head.instantiate(&self.params, s)?;
        let config = ModelConfig {
            encoder: self.config().encoder,
            head: HeadConfig::CufInstantiated { scale: s, cuf },
        };
        let mut params = ParameterSet::new();
        for spec in config.param_specs() {
            let value = if spec.name == format!("{HEAD}.kernels") {
                bank.weights.clone()
            } else {
                self.params
                    .by_name(&spec.name)
                    .ok_or_else(|| TensorError::UnknownParameter(spec.name.clone()))?
                    .value
                    .clone()
            };
            params.register(spec.name, value)?;
        }
        Self::from_params(config, params)
    }
}
