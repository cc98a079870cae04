//! Continuous upsampling filters: a hypernetwork that maps a sub-pixel
//! offset, the scale and a kernel tap index to depthwise kernel weights,
//! the continuous decoder built on it, and its discrete instantiation for
//! integer scales.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid;
use crate::nn::Affine;
use crate::posenc::{encode_2d, EncodingConfig, EncodingError};
use crate::tensor::{
    bind_specs, register_specs, ApplyPlan, Eager, Graph, Initializer, ParamId, ParamSpec, ParameterSet, Scalar,
    Tensor, TensorError,
};

/// Hidden layers of the kernel field MLP.
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CufError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("scale must be finite and >= 1, got {0}")]
    InvalidScale(f64),
    #[error("instantiation needs an integer scale >= 1, got {0}")]
    NonIntegerScale(f64),
    #[error("target size {0}x{1} is empty")]
    EmptyTarget(usize, usize),
    #[error("kernel size must be odd and >= 1, got {0}")]
    KernelSize(usize),
    #[error("hidden width must be >= 1")]
    HiddenWidth,
    #[error("target ({y}, {x}) maps outside the {h}x{w} source grid")]
    OutOfBounds { y: f64, x: f64, h: usize, w: usize },
    #[error("kernel bank {got:?} does not fit scale {scale}, {kk} taps, {channels} channels")]
    KernelMismatch {
        got: Vec<usize>,
        scale: usize,
        kk: usize,
        channels: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEncodings {
    pub delta: EncodingConfig,
    pub scale: EncodingConfig,
    pub kernel_index: EncodingConfig,
}

impl Default for FieldEncodings {
    fn default() -> Self {
        Self {
            delta: EncodingConfig::dct(5, 2.0),
            scale: EncodingConfig::dct(5, 2.0),
            kernel_index: EncodingConfig::dct(3, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CufConfig {
    pub kernel: usize,
    pub hidden: usize,
    #[serde(default)]
    pub encodings: FieldEncodings,
}

impl Default for CufConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            hidden: 32,
            encodings: FieldEncodings::default(),
        }
    }
}

impl CufConfig {
    pub fn validate(&self) -> Result<(), CufError> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(CufError::KernelSize(self.kernel));
        }
        if self.hidden == 0 {
            return Err(CufError::HiddenWidth);
        }
        self.encodings.delta.validate()?;
        self.encodings.scale.validate()?;
        self.encodings.kernel_index.validate()?;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let e = &self.encodings;
        e.delta.dim_2d() + e.scale.dim_2d() + e.kernel_index.dim_2d()
    }
}

/// Maps raw hypernetwork inputs into `[0, 1]²` each: `δ` unchanged, scale
/// to `1/s`, tap index to `k/(K-1)` (0 when `K = 1`).
pub fn normalize_inputs(
    delta: (f64, f64),
    scale: (f64, f64),
    kidx: (usize, usize),
    kernel: usize,
) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let k = |i: usize| if kernel > 1 { i as f64 / (kernel - 1) as f64 } else { 0.0 };
    (
        [delta.0, delta.1],
        [1.0 / scale.0, 1.0 / scale.1],
        [k(kidx.0), k(kidx.1)],
    )
}

/// One unique `(δ, s)` hypernetwork query; expands to `K²` MLP rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub delta: (f64, f64),
    pub scale: (f64, f64),
}

/// The hypernetwork `(δ, s, k) ↦ ℝ^C`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    pub config: CufConfig,
    pub channels: usize,
    layers: Vec<Affine>,
}

impl KernelField {
    fn widths(config: &CufConfig, channels: usize) -> Vec<usize> {
        let mut w = vec![config.input_dim()];
        w.extend(std::iter::repeat_n(config.hidden, HIDDEN_LAYERS));
        w.push(channels);
        w
    }

    pub fn specs(config: &CufConfig, channels: usize, prefix: &str) -> Vec<ParamSpec> {
        Self::widths(config, channels)
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| Affine::specs(&format!("{prefix}.{i}"), w[0], w[1]))
            .collect()
    }

    fn from_ids(config: CufConfig, channels: usize, ids: &[ParamId]) -> Self {
        let layers = Self::widths(&config, channels)
            .windows(2)
            .zip(ids.chunks(2))
            .map(|(w, ids)| Affine::from_ids(ids, w[0], w[1]))
            .collect();
        Self { config, channels, layers }
    }

    pub fn new(
        config: CufConfig,
        channels: usize,
        params: &mut ParameterSet<f32>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self, CufError> {
        config.validate()?;
        let ids = register_specs(&Self::specs(&config, channels, prefix), params, init)?;
        Ok(Self::from_ids(config, channels, &ids))
    }

    pub fn bind<T: Scalar>(
        config: CufConfig,
        channels: usize,
        params: &ParameterSet<T>,
        prefix: &str,
    ) -> Result<Self, CufError> {
        config.validate()?;
        let ids = bind_specs(&Self::specs(&config, channels, prefix), params)?;
        Ok(Self::from_ids(config, channels, &ids))
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Affine::param_count).sum()
    }

    pub fn kernel(&self) -> usize {
        self.config.kernel
    }

    /// Encoded MLP input for one tap of one query.
    pub fn encode_input(&self, delta: (f64, f64), scale: (f64, f64), kidx: (usize, usize)) -> Vec<f64> {
        let e = &self.config.encodings;
        let (d, s, k) = normalize_inputs(delta, scale, kidx, self.config.kernel);
        let mut v = encode_2d(d[0], d[1], &e.delta);
        v.extend(encode_2d(s[0], s[1], &e.scale));
        v.extend(encode_2d(k[0], k[1], &e.kernel_index));
        v
    }

    /// Kernel bank `[U, K², C]` for `U` queries; taps in `ki·K + kj` order.
    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        queries: &[Query],
    ) -> Result<G::Value, TensorError> {
        let k = self.config.kernel;
        let d = self.config.input_dim();
        let mut rows = Vec::with_capacity(queries.len() * k * k * d);
        for q in queries {
            for ki in 0..k {
                for kj in 0..k {
                    rows.extend(self.encode_input(q.delta, q.scale, (ki, kj)));
                }
            }
        }
        let mut x = g.constant(Tensor::from_f64(&[queries.len() * k * k, d], &rows)?);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, params, &x)?;
            if i < last {
                x = g.relu(&x)?;
            }
        }
        g.reshape(&x, &[queries.len(), k * k, self.channels])
    }
}

/// Depthwise weights (length `C`) for one tap.
pub fn kernel_at<T: Scalar>(
    field: &KernelField,
    params: &ParameterSet<T>,
    delta: (f64, f64),
    scale: (f64, f64),
    kidx: (usize, usize),
) -> Result<Vec<T>, TensorError> {
    let full = kernel_full(field, params, delta, scale)?;
    let c = field.channels;
    let t = kidx.0 * field.config.kernel + kidx.1;
    Ok(full.data()[t * c..(t + 1) * c].to_vec())
}

/// All `K²` taps, `[K², C]`.
pub fn kernel_full<T: Scalar>(
    field: &KernelField,
    params: &ParameterSet<T>,
    delta: (f64, f64),
    scale: (f64, f64),
) -> Result<Tensor<T>, TensorError> {
    let mut g = Eager;
    let bank = field.forward(&mut g, params, &[Query { delta, scale }])?;
    let k = field.config.kernel;
    Tensor::clone(&bank).reshape(&[k * k, field.channels])
}

/// Discrete kernels for an integer scale: row `i·s + j` holds the kernel for
/// offset `(i/s, j/s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantiatedKernels {
    pub scale: usize,
    pub weights: Tensor<f32>,
}

/// Routing of target pixels to LR sources and unique hypernetwork queries.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodePlan {
    pub apply: Arc<ApplyPlan>,
    pub queries: Vec<Query>,
}

fn check_scale(s: f64) -> Result<(), CufError> {
    if s.is_finite() && s >= 1.0 {
        Ok(())
    } else {
        Err(CufError::InvalidScale(s))
    }
}

/// Builds the plan for arbitrary target coordinates given in the target
/// grid of an `lr_h × lr_w` source. Offsets are deduplicated on a 1e-9
/// quantum so integer scales need exactly `s²` queries.
pub fn plan_points(
    lr: (usize, usize),
    coords: impl IntoIterator<Item = (f64, f64)>,
    out_shape: [usize; 2],
    scale: (f64, f64),
) -> Result<DecodePlan, CufError> {
    check_scale(scale.0)?;
    check_scale(scale.1)?;
    if out_shape[0] == 0 || out_shape[1] == 0 {
        return Err(CufError::EmptyTarget(out_shape[0], out_shape[1]));
    }
    let (h, w) = lr;
    let n = out_shape[0] * out_shape[1];
    let mut source = Vec::with_capacity(n);
    let mut kernel = Vec::with_capacity(n);
    let mut queries = Vec::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (y, x) in coords {
        let (sy, dy) = grid::source_and_offset(y, scale.0);
        let (sx, dx) = grid::source_and_offset(x, scale.1);
        if y < 0.0 || x < 0.0 || sy >= h || sx >= w {
            return Err(CufError::OutOfBounds { y, x, h, w });
        }
        let u = *seen
            .entry((grid::offset_key(dy), grid::offset_key(dx)))
            .or_insert_with(|| {
                queries.push(Query { delta: (dy, dx), scale });
                queries.len() - 1
            });
        source.push(sy * w + sx);
        kernel.push(u);
    }
    if source.len() != n {
        return Err(TensorError::InvalidArgument {
            op: "plan_points",
            msg: format!("{} coordinates for a {}x{} target", source.len(), out_shape[0], out_shape[1]),
        }
        .into());
    }
    Ok(DecodePlan {
        apply: Arc::new(ApplyPlan { out_shape, source, kernel }),
        queries,
    })
}

/// Plan for the full `⌊s_h·H⌋ × ⌊s_w·W⌋` integer target grid.
pub fn plan_grid(lr: (usize, usize), scale: (f64, f64)) -> Result<DecodePlan, CufError> {
    check_scale(scale.0)?;
    check_scale(scale.1)?;
    let oh = grid::scaled_len(lr.0, scale.0);
    let ow = grid::scaled_len(lr.1, scale.1);
    let coords = (0..oh).flat_map(move |y| (0..ow).map(move |x| (y as f64, x as f64)));
    plan_points(lr, coords, [oh, ow], scale)
}

/// Kernel field plus the per-pixel projection back to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct CufHead {
    pub field: KernelField,
    pub dense1: Affine,
    pub dense2: Affine,
}

impl CufHead {
    fn dense_specs(channels: usize, prefix: &str) -> Vec<ParamSpec> {
        let mut v = Affine::specs(&format!("{prefix}.dense1"), channels, channels).to_vec();
        v.extend(Affine::specs(&format!("{prefix}.dense2"), channels, 3));
        v
    }

    pub fn specs(config: &CufConfig, channels: usize, prefix: &str) -> Vec<ParamSpec> {
        let mut v = KernelField::specs(config, channels, &format!("{prefix}.field"));
        v.extend(Self::dense_specs(channels, prefix));
        v
    }

    fn assemble(field: KernelField, ids: &[ParamId]) -> Self {
        let c = field.channels;
        Self {
            field,
            dense1: Affine::from_ids(&ids[0..2], c, c),
            dense2: Affine::from_ids(&ids[2..4], c, 3),
        }
    }

    pub fn new(
        config: CufConfig,
        channels: usize,
        params: &mut ParameterSet<f32>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self, CufError> {
        let field = KernelField::new(config, channels, params, init, &format!("{prefix}.field"))?;
        let ids = register_specs(&Self::dense_specs(channels, prefix), params, init)?;
        Ok(Self::assemble(field, &ids))
    }

    pub fn bind<T: Scalar>(
        config: CufConfig,
        channels: usize,
        params: &ParameterSet<T>,
        prefix: &str,
    ) -> Result<Self, CufError> {
        let field = KernelField::bind(config, channels, params, &format!("{prefix}.field"))?;
        let ids = bind_specs(&Self::dense_specs(channels, prefix), params)?;
        Ok(Self::assemble(field, &ids))
    }

    pub fn channels(&self) -> usize {
        self.field.channels
    }

    pub fn kernel(&self) -> usize {
        self.field.config.kernel
    }

    pub fn dense_param_count(&self) -> usize {
        self.dense1.param_count() + self.dense2.param_count()
    }

    /// dense1 → ReLU → dense2 over the channel axis.
    pub fn project<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        x: &G::Value,
    ) -> Result<G::Value, TensorError> {
        project_rgb(g, params, &self.dense1, &self.dense2, x)
    }

    /// Decodes `features` (unfolded, `[H, W, C·K²]`) along a prepared plan.
    pub fn decode_plan<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        features: &G::Value,
        plan: &DecodePlan,
    ) -> Result<G::Value, TensorError> {
        let bank = self.field.forward(g, params, &plan.queries)?;
        let x = g.kernel_apply(features, &bank, plan.apply.clone())?;
        self.project(g, params, &x)
    }

    /// `[⌊s_h·H⌋, ⌊s_w·W⌋, 3]` from unfolded features.
    pub fn decode_continuous<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        features: &G::Value,
        s_h: f64,
        s_w: f64,
    ) -> Result<G::Value, CufError> {
        let (h, w, _) = g.value(features).dims3()?;
        let plan = plan_grid((h, w), (s_h, s_w))?;
        Ok(self.decode_plan(g, params, features, &plan)?)
    }

    /// Kernel bank `[s², K², C]` recorded in `g`.
    pub fn instantiate_in<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        s: usize,
    ) -> Result<G::Value, CufError> {
        if s == 0 {
            return Err(CufError::NonIntegerScale(0.0));
        }
        let sf = s as f64;
        let queries: Vec<Query> = (0..s)
            .flat_map(|i| (0..s).map(move |j| (i, j)))
            .map(|(i, j)| Query {
                delta: (
                    grid::source_and_offset(i as f64, sf).1,
                    grid::source_and_offset(j as f64, sf).1,
                ),
                scale: (sf, sf),
            })
            .collect();
        Ok(self.field.forward(g, params, &queries)?)
    }

    pub fn instantiate(&self, params: &ParameterSet<f32>, s: usize) -> Result<InstantiatedKernels, CufError> {
        let bank = self.instantiate_in(&mut Eager, params, s)?;
        Ok(InstantiatedKernels {
            scale: s,
            weights: Tensor::clone(&bank),
        })
    }

    /// Checks that a `[s², K², C]` bank fits this head.
    pub fn check_bank(&self, shape: &[usize], s: usize) -> Result<(), CufError> {
        check_bank(shape, s, self.kernel(), self.channels())
    }

    /// Grouped depthwise convolution on the raw LR features `[H, W, C]`,
    /// pixel shuffle, then the RGB projection.
    pub fn decode_instantiated<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        kernels: &G::Value,
        s: usize,
        features: &G::Value,
    ) -> Result<G::Value, CufError> {
        decode_bank(g, params, kernels, s, self.kernel(), features, (&self.dense1, &self.dense2))
    }
}

fn project_rgb<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ParameterSet<T>,
    dense1: &Affine,
    dense2: &Affine,
    x: &G::Value,
) -> Result<G::Value, TensorError> {
    let h = dense1.forward(g, params, x)?;
    let h = g.relu(&h)?;
    dense2.forward(g, params, &h)
}

fn check_bank(shape: &[usize], s: usize, k: usize, channels: usize) -> Result<(), CufError> {
    if shape != [s * s, k * k, channels] {
        return Err(CufError::KernelMismatch {
            got: shape.to_vec(),
            scale: s,
            kk: k * k,
            channels,
        });
    }
    Ok(())
}

fn decode_bank<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ParameterSet<T>,
    kernels: &G::Value,
    s: usize,
    k: usize,
    features: &G::Value,
    dense: (&Affine, &Affine),
) -> Result<G::Value, CufError> {
    let channels = dense.0.fan_in;
    check_bank(g.value(kernels).shape(), s, k, channels)?;
    let (_, _, c) = g.value(features).dims3()?;
    if c != channels {
        return Err(CufError::KernelMismatch {
            got: g.value(features).shape().to_vec(),
            scale: s,
            kk: k * k,
            channels,
        });
    }
    let x = g.grouped_depthwise(features, kernels)?;
    let x = g.pixel_shuffle(&x, s)?;
    Ok(project_rgb(g, params, dense.0, dense.1, &x)?)
}

/// A head frozen at one integer scale: the kernel bank is stored as a
/// parameter and the field is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantiatedHead {
    pub scale: usize,
    pub kernel: usize,
    pub channels: usize,
    pub kernels: ParamId,
    pub dense1: Affine,
    pub dense2: Affine,
}

impl InstantiatedHead {
    pub fn specs(scale: usize, kernel: usize, channels: usize, prefix: &str) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::new(
            format!("{prefix}.kernels"),
            &[scale * scale, kernel * kernel, channels],
            kernel * kernel,
        )];
        v.extend(CufHead::dense_specs(channels, prefix));
        v
    }

    pub fn bind<T: Scalar>(
        scale: usize,
        kernel: usize,
        channels: usize,
        params: &ParameterSet<T>,
        prefix: &str,
    ) -> Result<Self, CufError> {
        if scale == 0 {
            return Err(CufError::NonIntegerScale(0.0));
        }
        if kernel % 2 == 0 {
            return Err(CufError::KernelSize(kernel));
        }
        let ids = bind_specs(&Self::specs(scale, kernel, channels, prefix), params)?;
        Ok(Self {
            scale,
            kernel,
            channels,
            kernels: ids[0],
            dense1: Affine::from_ids(&ids[1..3], channels, channels),
            dense2: Affine::from_ids(&ids[3..5], channels, 3),
        })
    }

    /// `[H, W, C] → [sH, sW, 3]`.
    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        features: &G::Value,
    ) -> Result<G::Value, CufError> {
        let bank = g.param(params, self.kernels);
        decode_bank(g, params, &bank, self.scale, self.kernel, features, (&self.dense1, &self.dense2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::{RngExt, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn head(c: usize, seed: u64) -> (CufHead, ParameterSet<f32>) {
        let mut params = ParameterSet::new();
        let mut init = Initializer::new(seed);
        let h = CufHead::new(CufConfig::default(), c, &mut params, &mut init, "head").unwrap();
        (h, params)
    }

    fn rand_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_inputs((0.0, 0.0), (1.0, 1.0), (1, 1), 3),
            ([0.0, 0.0], [1.0, 1.0], [0.5, 0.5])
        );
        assert_eq!(normalize_inputs((0.3, 0.7), (2.0, 2.0), (0, 2), 3).1, [0.5, 0.5]);
        assert_eq!(normalize_inputs((0.3, 0.7), (4.0, 4.0), (0, 2), 3).1, [0.25, 0.25]);
        assert_eq!(normalize_inputs((0.0, 0.0), (1.0, 1.0), (0, 0), 1).2, [0.0, 0.0]);
    }

    #[test]
    fn parameter_counts() {
        let (h, params) = head(64, 0);
        assert_eq!(h.field.config.input_dim(), 59);
        assert_eq!(h.field.param_count(), 6144);
        assert_eq!(59 * 32 + 32 * 32 + 32 * 32 + 32 * 64 + (32 + 32 + 32 + 64), 6144);
        assert_eq!(h.dense_param_count(), 4355);
        assert_eq!(params.num_elements(), 6144 + 4355);
    }

    #[test]
    fn zero_field_gives_zero_kernel_and_queries_are_deterministic() {
        let (h, mut params) = head(8, 1);
        let a = kernel_at(&h.field, &params, (0.25, 0.5), (2.0, 2.0), (0, 2)).unwrap();
        let b = kernel_at(&h.field, &params, (0.25, 0.5), (2.0, 2.0), (0, 2)).unwrap();
        assert_eq!(a, b);
        let (h2, params2) = head(8, 1);
        assert_eq!(h, h2);
        assert_eq!(
            kernel_full(&h2.field, &params2, (0.1, 0.2), (3.0, 3.0)).unwrap(),
            kernel_full(&h.field, &params, (0.1, 0.2), (3.0, 3.0)).unwrap()
        );
        let names: Vec<String> = params.iter().filter(|p| p.name.contains("field")).map(|p| p.name.clone()).collect();
        for n in names {
            let shape = params.by_name(&n).unwrap().value.shape().to_vec();
            params.assign(&n, Tensor::zeros(&shape)).unwrap();
        }
        let z = kernel_at(&h.field, &params, (0.25, 0.5), (2.0, 2.0), (1, 1)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_at_matches_straight_line_oracle() {
        let (h, params) = head(6, 2);
        let (delta, scale, kidx) = ((0.4, 0.75), (2.5, 2.5), (2, 0));
        let got = kernel_at(&h.field, &params, delta, scale, kidx).unwrap();

        let cosines = |z: f64, n: usize, fmax: f64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let f = fmax * i as f64 / (n - 1) as f64;
                    ((2.0 * z + 1.0) * f * std::f64::consts::PI / 2.0).cos()
                })
                .collect()
        };
        let outer = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect() };
        let mut x = outer(cosines(0.4, 5, 2.0), cosines(0.75, 5, 2.0));
        x.extend(outer(cosines(0.4, 5, 2.0), cosines(0.4, 5, 2.0)));
        x.extend(outer(cosines(1.0, 3, 1.0), cosines(0.0, 3, 1.0)));
        assert_eq!(x.len(), 59);
        for layer in 0..4 {
            let w = params.by_name(&format!("head.field.{layer}.weight")).unwrap().value.clone();
            let b = params.by_name(&format!("head.field.{layer}.bias")).unwrap().value.clone();
            let (cin, cout) = (w.shape()[0], w.shape()[1]);
            let mut y = vec![0.0f64; cout];
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = b.data()[o] as f64 + (0..cin).map(|i| x[i] * w.data()[i * cout + o] as f64).sum::<f64>();
                if layer < 3 {
                    *yo = yo.max(0.0);
                }
            }
            x = y;
        }
        for (g, e) in got.iter().zip(&x) {
            assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn kernel_full_stacks_taps() {
        let (h, params) = head(5, 3);
        let full = kernel_full(&h.field, &params, (0.5, 0.0), (2.0, 2.0)).unwrap();
        assert_eq!(full.shape(), &[9, 5]);
        for ki in 0..3 {
            for kj in 0..3 {
                let row = kernel_at(&h.field, &params, (0.5, 0.0), (2.0, 2.0), (ki, kj)).unwrap();
                assert_eq!(&full.data()[(ki * 3 + kj) * 5..(ki * 3 + kj + 1) * 5], row.as_slice());
            }
        }
        // Transposed taps correspond to transposed index pairs.
        let t = |ki: usize, kj: usize| h.field.encode_input((0.5, 0.0), (2.0, 2.0), (ki, kj));
        assert_ne!(t(0, 1), t(1, 0));

        let mut p1 = ParameterSet::new();
        let cfg = CufConfig { kernel: 1, ..CufConfig::default() };
        let f1 = KernelField::new(cfg, 4, &mut p1, &mut Initializer::new(4), "f").unwrap();
        let full1 = kernel_full(&f1, &p1, (0.2, 0.3), (1.5, 1.5)).unwrap();
        assert_eq!(full1.shape(), &[1, 4]);
        assert_eq!(full1.data(), kernel_at(&f1, &p1, (0.2, 0.3), (1.5, 1.5), (0, 0)).unwrap().as_slice());
    }

    /// Center-tap field and identity projection, built by hand.
    fn delta_head(c: usize) -> (CufHead, ParameterSet<f32>) {
        let (h, mut params) = head(c, 5);
        let set = |params: &mut ParameterSet<f32>, name: &str, f: &dyn Fn(&[usize]) -> Tensor<f32>| {
            let shape = params.by_name(name).unwrap().value.shape().to_vec();
            params.assign(name, f(&shape)).unwrap();
        };
        let zeros = |s: &[usize]| Tensor::zeros(s);
        for l in 0..4 {
            set(&mut params, &format!("head.field.{l}.bias"), &zeros);
        }
        // Entry 8 of the tap encoding is cos(π·k_i)·cos(π·k_j) for the top
        // frequency, i.e. 1 at the center tap and 0 elsewhere.
        set(&mut params, "head.field.0.weight", &|s: &[usize]| {
            Tensor::from_fn(s, |i| if i == (50 + 8) * s[1] { 1.0 } else { 0.0 })
        });
        for l in 1..3 {
            set(&mut params, &format!("head.field.{l}.weight"), &|s: &[usize]| {
                Tensor::from_fn(s, |i| if i == 0 { 1.0 } else { 0.0 })
            });
        }
        set(&mut params, "head.field.3.weight", &|s: &[usize]| {
            Tensor::from_fn(s, |i| if i < s[1] { 1.0 } else { 0.0 })
        });
        set(&mut params, "head.dense1.weight", &|s: &[usize]| {
            Tensor::from_fn(s, |i| if i / s[1] == i % s[1] { 1.0 } else { 0.0 })
        });
        set(&mut params, "head.dense1.bias", &zeros);
        set(&mut params, "head.dense2.weight", &|s: &[usize]| {
            Tensor::from_fn(s, |i| if i / s[1] == i % s[1] { 1.0 } else { 0.0 })
        });
        set(&mut params, "head.dense2.bias", &zeros);
        (h, params)
    }

    #[test]
    fn identity_pipeline_at_unit_scale() {
        let (h, params) = delta_head(4);
        let feats = rand_tensor(&[5, 6, 4], 6, 0.0, 1.0);
        let mut g = Eager;
        let fu = g.constant(ops::unfold(&feats, 3).unwrap());
        let out = h.decode_continuous(&mut g, &params, &fu, 1.0, 1.0).unwrap();
        assert_eq!(out.shape(), &[5, 6, 3]);
        for p in 0..30 {
            for c in 0..3 {
                assert!((out.data()[p * 3 + c] - feats.data()[p * 4 + c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_features_give_constant_output() {
        let (h, params) = head(4, 7);
        // Border taps see zero padding, so only interior targets are constant.
        let feats = Tensor::full(&[6, 6, 4], 0.3f32);
        let mut g = Eager;
        let fu = g.constant(ops::unfold(&feats, 3).unwrap());
        let out = h.decode_continuous(&mut g, &params, &fu, 2.0, 2.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let reference = out.at(&[2 + i, 2 + j, 0]);
                for y in (2..10).step_by(2) {
                    for x in (2..10).step_by(2) {
                        assert!((out.at(&[y + i, x + j, 0]) - reference).abs() < 1e-6);
                    }
                }
            }
        }
    }

    fn naive_decode(h: &CufHead, params: &ParameterSet<f32>, feats: &Tensor<f32>, s_h: f64, s_w: f64) -> Vec<f64> {
        let (hh, ww, c) = feats.dims3().unwrap();
        let (oh, ow) = (grid::scaled_len(hh, s_h), grid::scaled_len(ww, s_w));
        let w1 = params.by_name("head.dense1.weight").unwrap().value.clone();
        let b1 = params.by_name("head.dense1.bias").unwrap().value.clone();
        let w2 = params.by_name("head.dense2.weight").unwrap().value.clone();
        let b2 = params.by_name("head.dense2.bias").unwrap().value.clone();
        let mut out = Vec::new();
        for y in 0..oh {
            for x in 0..ow {
                let (sy, dy) = ((y as f64 / s_h).floor() as usize, (y as f64 % s_h) / s_h);
                let (sx, dx) = ((x as f64 / s_w).floor() as usize, (x as f64 % s_w) / s_w);
                let k = kernel_full(&h.field, params, (dy, dx), (s_h, s_w)).unwrap();
                let mut z = vec![0.0f64; c];
                for (ch, zc) in z.iter_mut().enumerate() {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (iy, ix) = (sy as isize + ki as isize - 1, sx as isize + kj as isize - 1);
                            if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                                continue;
                            }
                            *zc += k.at(&[ki * 3 + kj, ch]) as f64 * feats.at(&[iy as usize, ix as usize, ch]) as f64;
                        }
                    }
                }
                let hid: Vec<f64> = (0..c)
                    .map(|o| (b1.data()[o] as f64 + (0..c).map(|i| z[i] * w1.at(&[i, o]) as f64).sum::<f64>()).max(0.0))
                    .collect();
                for o in 0..3 {
                    out.push(b2.data()[o] as f64 + (0..c).map(|i| hid[i] * w2.at(&[i, o]) as f64).sum::<f64>());
                }
            }
        }
        out
    }

    #[test]
    fn continuous_decode_matches_naive_loop() {
        let (h, params) = head(4, 8);
        let feats = rand_tensor(&[5, 4, 4], 9, -1.0, 1.0);
        for (s_h, s_w) in [(2.5, 2.5), (2.0, 3.5), (1.3, 1.0)] {
            let mut g = Eager;
            let fu = g.constant(ops::unfold(&feats, 3).unwrap());
            let out = h.decode_continuous(&mut g, &params, &fu, s_h, s_w).unwrap();
            assert_eq!(out.shape(), &[grid::scaled_len(5, s_h), grid::scaled_len(4, s_w), 3]);
            let naive = naive_decode(&h, &params, &feats, s_h, s_w);
            for (a, b) in out.data().iter().zip(&naive) {
                assert!((*a as f64 - b).abs() < 1e-5, "s=({s_h},{s_w}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn plan_deduplicates_and_is_periodic() {
        let plan = plan_grid((6, 6), (3.0, 3.0)).unwrap();
        assert_eq!(plan.queries.len(), 9);
        let ow = plan.apply.out_shape[1];
        for y in 0..15 {
            for x in 0..15 {
                assert_eq!(plan.apply.kernel[y * ow + x], plan.apply.kernel[(y + 3) * ow + x + 3]);
            }
        }
        assert_eq!(plan_grid((4, 4), (2.5, 2.5)).unwrap().queries.len(), 25);
        assert!(matches!(plan_grid((4, 4), (0.5, 1.0)), Err(CufError::InvalidScale(_))));
        assert!(matches!(plan_grid((0, 4), (2.0, 2.0)), Err(CufError::EmptyTarget(..))));
        assert!(matches!(
            plan_points((2, 2), [(4.0, 0.0)], [1, 1], (2.0, 2.0)),
            Err(CufError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn instantiate_rows_equal_continuous_queries() {
        let (h, params) = head(6, 10);
        let one = h.instantiate(&params, 1).unwrap();
        assert_eq!(one.weights.shape(), &[1, 9, 6]);
        assert_eq!(
            one.weights.data(),
            kernel_full(&h.field, &params, (0.0, 0.0), (1.0, 1.0)).unwrap().data()
        );
        for s in 2..=4 {
            let inst = h.instantiate(&params, s).unwrap();
            assert_eq!(inst.weights.shape(), &[s * s, 9, 6]);
            for i in 0..s {
                for j in 0..s {
                    let row = kernel_full(&h.field, &params, (i as f64 / s as f64, j as f64 / s as f64), (s as f64, s as f64))
                        .unwrap();
                    let r = i * s + j;
                    assert_eq!(&inst.weights.data()[r * 54..(r + 1) * 54], row.data());
                }
            }
        }
        assert!(h.instantiate(&params, 0).is_err());
    }

    #[test]
    fn instantiated_decode_equals_continuous_decode() {
        for seed in 0..3u64 {
            let (h, params) = head(8, 20 + seed);
            let feats = rand_tensor(&[16, 16, 8], 30 + seed, -1.0, 1.0);
            for s in 1..=4usize {
                let mut g = Eager;
                let raw = g.constant(feats.clone());
                let fu = g.constant(ops::unfold(&feats, 3).unwrap());
                let cont = h.decode_continuous(&mut g, &params, &fu, s as f64, s as f64).unwrap();
                let bank = h.instantiate_in(&mut g, &params, s).unwrap();
                let inst = h.decode_instantiated(&mut g, &params, &bank, s, &raw).unwrap();
                assert_eq!(inst.shape(), &[16 * s, 16 * s, 3]);
                let d = cont.max_abs_diff(&inst).unwrap();
                assert!(d <= 1e-5, "seed {seed} s {s}: {d}");
            }
        }
    }

    #[test]
    fn instantiated_decode_rejects_mismatched_banks() {
        let (h, params) = head(4, 11);
        let mut g = Eager;
        let raw = g.constant(Tensor::zeros(&[4, 4, 4]));
        let bank = h.instantiate_in(&mut g, &params, 2).unwrap();
        assert!(matches!(
            h.decode_instantiated(&mut g, &params, &bank, 3, &raw),
            Err(CufError::KernelMismatch { .. })
        ));
        let wrong = g.constant(Tensor::zeros(&[4, 4, 5]));
        assert!(h.decode_instantiated(&mut g, &params, &bank, 2, &wrong).is_err());
    }

    #[test]
    fn gradients_reach_the_field() {
        use crate::tensor::{check_gradients, Tape};
        let mut p32 = ParameterSet::new();
        let cfg = CufConfig { hidden: 6, ..CufConfig::default() };
        let h = CufHead::new(cfg, 3, &mut p32, &mut Initializer::new(12), "head").unwrap();
        let params = p32.cast::<f64>();
        let feats = rand_tensor(&[4, 4, 3], 13, -1.0, 1.0).cast::<f64>();
        let weights = rand_tensor(&[8, 8, 3], 14, -1.0, 1.0).cast::<f64>();
        let report = check_gradients(&params, 1e-5, 1e-6, |g: &mut Tape<f64>, p| {
            let fu = g.constant(ops::unfold(&feats, 3)?);
            let out = h.decode_continuous(g, p, &fu, 2.0, 2.0).map_err(|e| match e {
                CufError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let r = g.constant(weights.clone());
            let prod = g.mul(&out, &r)?;
            g.sum(&prod)
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
