//! Layer wrappers binding parameter ids to graph ops.

use crate::tensor::{Graph, ParamId, ParamSpec, ParameterSet, Scalar, TensorError};

/// `y = x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    pub fn specs(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in),
            ParamSpec::new(format!("{prefix}.bias"), &[fan_out], fan_in),
        ]
    }

    pub(crate) fn from_ids(ids: &[ParamId], fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: ids[0],
            bias: ids[1],
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        x: &G::Value,
    ) -> Result<G::Value, TensorError> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.dense(x, &w, &b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Same-padded `k×k` convolution, `W: [out, in, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv {
    pub fn specs(prefix: &str, cin: usize, cout: usize, k: usize) -> [ParamSpec; 2] {
        let fan_in = cin * k * k;
        [
            ParamSpec::new(format!("{prefix}.weight"), &[cout, cin, k, k], fan_in),
            ParamSpec::new(format!("{prefix}.bias"), &[cout], fan_in),
        ]
    }

    pub(crate) fn from_ids(ids: &[ParamId], k: usize) -> Self {
        Self {
            weight: ids[0],
            bias: ids[1],
            kernel: k,
        }
    }

    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParameterSet<T>,
        x: &G::Value,
    ) -> Result<G::Value, TensorError> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.conv2d(x, &w, &b, (self.kernel - 1) / 2)
    }
}
